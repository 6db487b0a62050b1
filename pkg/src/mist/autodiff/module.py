"""Parameter containers: a small Module base and the optimizer-facing ParamStore."""
from __future__ import annotations

from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from mist.autodiff.tensor import Tensor, is_shape_only, meta_array

INIT_STD = 0.02


class Parameter(Tensor):
    """A leaf tensor owned by a Module; always requires grad."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def normal_param(rng: Optional[np.random.Generator], shape, std: float = INIT_STD) -> Parameter:
    if is_shape_only() or rng is None:
        return Parameter(meta_array(shape)) if is_shape_only() else Parameter(np.zeros(shape))
    return Parameter(rng.normal(0.0, std, size=shape))


def const_param(shape, value: float) -> Parameter:
    if is_shape_only():
        return Parameter(meta_array(shape))
    return Parameter(np.full(shape, float(value)))


class Module:
    """Attribute-walking parameter registry.

    Parameters are discovered from instance attributes: ``Parameter``
    values, child ``Module`` values and lists/tuples of modules.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + name] = value
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return dict(sorted(out.items()))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


class ParamStore:
    """Lexicographically ordered parameters plus AdamW moment buffers."""

    def __init__(self, params: Mapping[str, Tensor]):
        names = list(params)
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter paths")
        self.params: Dict[str, Tensor] = dict(sorted(params.items()))
        self.exp_avg: Dict[str, np.ndarray] = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.exp_avg_sq: Dict[str, np.ndarray] = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.step = 0

    @classmethod
    def from_module(cls, module: Module, prefix: str = "") -> "ParamStore":
        return cls(module.named_parameters(prefix))

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
