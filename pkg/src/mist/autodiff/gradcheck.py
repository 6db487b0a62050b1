from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from mist.autodiff.tensor import Tensor, no_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    wrt: Optional[Iterable[Tensor]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``sum(f(x))`` against central differences.

    Checks ``x`` plus any extra leaves in ``wrt`` (typically parameters that
    ``f`` closes over).  With ``max_coords`` only that many seeded random
    coordinates per tensor are perturbed.  Returns
    ``max |a - n| / max(1, |a|, |n|)`` over the checked coordinates.
    """
    targets = [x] + [t for t in (wrt or ()) if t is not x]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    loss = out.sum() if out.size != 1 else out
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in targets]

    def value() -> float:
        with no_grad():
            return float(np.sum(f(x).data))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(targets, analytic):
        flat = t.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, t.data):
            t.data = t.data.copy()
            flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = value()
            flat[i] = orig - eps
            minus = value()
            flat[i] = orig
            num = (plus - minus) / (2.0 * eps)
            err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
            worst = max(worst, err)
    for t in targets:
        t.grad = None
    return worst
