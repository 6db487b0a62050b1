"""Feature-mixing deep-supervision loss.

Every non-empty subset of the n prediction maps is summed into one map and
scored with ``gamma * soft-DICE + (1 - gamma) * cross-entropy``; the
per-subset scores are summed (or averaged).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from mist.autodiff import ShapeError, Tensor, ops


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.3
    n_maps: int = 3
    smooth: float = 1.0
    reduction: str = "sum"  # how per-subset losses combine: sum | mean

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.n_maps < 1:
            raise ValueError("n_maps must be at least 1")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be sum or mean, got {self.reduction!r}")


def subset_masks(n: int) -> List[int]:
    return list(range(1, 2**n))


def enumerate_subsets(maps: Sequence[Tensor]) -> List[Tensor]:
    """Elementwise sums of all 2^n - 1 non-empty subsets, in bitmask order 1..2^n-1."""
    if not maps:
        raise ShapeError("enumerate_subsets needs at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError("all prediction maps must share one shape")
    out = []
    for mask in subset_masks(len(maps)):
        members = [m for i, m in enumerate(maps) if mask >> i & 1]
        agg = members[0]
        for m in members[1:]:
            agg = agg + m
        out.append(agg)
    return out


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    K = logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ValueError(f"class ids must lie in [0, {K})")
    return target


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Soft DICE loss, averaged over classes and batch."""
    target = _check_target(logits, target)
    probs = ops.softmax(logits, axis=1)
    onehot = ops.one_hot(target, logits.shape[1], axis=1)
    inter = (probs * onehot).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + (onehot.sum(axis=(2, 3)) + smooth)
    return (1.0 - (inter * 2.0 + smooth) / denom).mean()


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    target = _check_target(logits, target)
    return ops.cross_entropy(logits, target, axis=1)


def map_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    if cfg.gamma == 0.0:
        return ce_loss(logits, target)
    if cfg.gamma == 1.0:
        return dice_loss(logits, target, cfg.smooth)
    return dice_loss(logits, target, cfg.smooth) * cfg.gamma + ce_loss(logits, target) * (1.0 - cfg.gamma)


def total_loss(maps: Sequence[Tensor], target: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    losses = [map_loss(m, target, cfg) for m in enumerate_subsets(maps)]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    if cfg.reduction == "mean":
        total = total * (1.0 / len(losses))
    return total
