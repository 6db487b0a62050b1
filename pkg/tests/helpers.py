"""Shared test utilities."""
import numpy as np

from mist.autodiff import Module, Tensor, grad_check


def rand(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


def randomize(module: Module, seed: int = 0, std: float = 0.3) -> Module:
    """Give every parameter (norm gains and biases included) a non-trivial value."""
    rng = np.random.default_rng(seed)
    for p in module.named_parameters().values():
        p.data = p.data + rng.normal(0.0, std, size=p.shape)
    return module


def module_grad_check(fn, x: np.ndarray, module: Module, max_coords: int = 12, seed: int = 0) -> float:
    """Finite-difference check w.r.t. the input and a sample of every parameter tensor."""
    params = list(module.named_parameters().values())
    return grad_check(fn, Tensor(x), wrt=params, max_coords=max_coords, seed=seed)


def naive_conv(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct sliding-window summation, one output element at a time."""
    N, Cin, H, W = x.shape
    Cout, Cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((N, Cout, Ho, Wo))
    per = Cout // groups
    for n in range(N):
        for o in range(Cout):
            g = o // per
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[n, g * Cg + c, i * stride + u * dilation, j * stride + v * dilation]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out
