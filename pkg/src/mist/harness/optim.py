"""AdamW with decoupled weight decay over a ParamStore."""
from __future__ import annotations

import numpy as np

from mist.autodiff import ParamStore


class MissingGradient(RuntimeError):
    pass


def adamw_step(
    store: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """One bias-corrected Adam update plus ``p -= lr * wd * p``, in path order."""
    for path, p in store.items():
        if p.grad is None:
            raise MissingGradient(f"parameter {path} has no gradient")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for path, p in store.items():
        g = p.grad
        m = store.exp_avg[path] = beta1 * store.exp_avg[path] + (1.0 - beta1) * g
        v = store.exp_avg_sq[path] = beta2 * store.exp_avg_sq[path] + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr * weight_decay * p.data - lr * update
        p.grad = None
