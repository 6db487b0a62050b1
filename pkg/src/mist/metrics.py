"""Hard DICE and boundary Hausdorff distances for 2-D label maps."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


class UndefinedMetric(ValueError):
    """A distance was requested for an empty mask."""


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if m.ndim != 2 or 0 in m.shape:
        raise ValueError(f"binary masks are non-empty 2-D arrays, got shape {m.shape}")
    return m


def dice_score(x, y) -> float:
    """2|X & Y| / (|X| + |Y|); 1.0 when both masks are empty."""
    x, y = _as_mask(x), _as_mask(y)
    if x.shape != y.shape:
        raise ValueError(f"mask dimensions differ: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def extract_boundary(m) -> np.ndarray:
    """(row, col) of foreground pixels with a background or out-of-bounds 4-neighbor."""
    m = _as_mask(m)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return np.argwhere(m & ~interior)


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a`` the Euclidean distance to the nearest point of ``b``."""
    diff = a[:, None, :].astype(np.int64) - b[None, :, :].astype(np.int64)
    sq = (diff * diff).sum(axis=-1).min(axis=1)
    return np.sqrt(sq.astype(np.float64))


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    v = np.sort(values)
    # multiply first: 95 * n is exact, 0.95 * n is not
    rank = max(1, math.ceil(percentile * len(v) / 100.0))
    return float(v[rank - 1])


def hausdorff(x, y, percentile: float = 100.0) -> float:
    """Symmetric boundary Hausdorff distance.

    ``percentile=100`` is the strict max of both directed distances; lower
    values take the nearest-rank percentile of the pooled directed distances.
    Raises :class:`UndefinedMetric` when either mask is empty.
    """
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    x, y = _as_mask(x), _as_mask(y)
    if x.shape != y.shape:
        raise ValueError(f"mask dimensions differ: {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        raise UndefinedMetric("Hausdorff distance is undefined for an empty mask")
    bx, by = extract_boundary(x), extract_boundary(y)
    d_xy = directed_distances(bx, by)
    d_yx = directed_distances(by, bx)
    if percentile == 100.0:
        return float(max(d_xy.max(), d_yx.max()))
    return nearest_rank(np.concatenate([d_xy, d_yx]), percentile)


@dataclass
class CaseReport:
    """Per-class metrics for one case; ``None`` marks an undefined entry."""

    case_id: str
    dice: Dict[int, Optional[float]] = field(default_factory=dict)
    hd95: Dict[int, Optional[float]] = field(default_factory=dict)

    @property
    def mean_dice(self) -> Optional[float]:
        vals = [v for v in self.dice.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_hd95(self) -> Optional[float]:
        vals = [v for v in self.hd95.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self):
        for c in sorted(self.dice):
            if self.dice[c] is not None:
                yield self.case_id, c, self.dice[c], self.hd95.get(c)


def labels_from_prediction(pred) -> np.ndarray:
    """Class map from [K,H,W] scores (argmax, lowest index on ties) or pass-through ids."""
    pred = np.asarray(pred)
    if pred.ndim == 3:
        return np.argmax(pred, axis=0)
    if pred.ndim == 2:
        return pred.astype(np.int64)
    raise ValueError(f"prediction must be [K,H,W] scores or [H,W] ids, got {pred.shape}")


def evaluate_case(pred, target, n_classes: int, case_id: str = "case") -> CaseReport:
    labels = labels_from_prediction(pred)
    target = np.asarray(target)
    if labels.shape != target.shape:
        raise ValueError(f"prediction {labels.shape} and target {target.shape} differ in shape")
    report = CaseReport(case_id)
    for c in range(1, n_classes):
        gt, seg = target == c, labels == c
        if not gt.any() and not seg.any():
            report.dice[c] = None
            report.hd95[c] = None
            continue
        report.dice[c] = dice_score(gt, seg)
        report.hd95[c] = hausdorff(gt, seg, 95.0) if gt.any() and seg.any() else None
    return report


@dataclass
class Summary:
    cases: List[CaseReport]

    @property
    def mean_dice(self) -> float:
        vals = [c.mean_dice for c in self.cases if c.mean_dice is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_hd95(self) -> float:
        vals = [c.mean_hd95 for c in self.cases if c.mean_hd95 is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def n_rows(self) -> int:
        return sum(1 for c in self.cases for _ in c.rows())


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else f"{v:.6f}"


def write_delimited(summary: Summary, stream: io.TextIOBase, sep: str = ",") -> None:
    stream.write(sep.join(("case", "class", "dice", "hd95")) + "\n")
    for case in summary.cases:
        for cid, c, d, h in case.rows():
            stream.write(sep.join((cid, str(c), _fmt(d), _fmt(h))) + "\n")


def format_text(summary: Summary) -> str:
    lines = []
    for case in summary.cases:
        for cid, c, d, h in case.rows():
            lines.append(f"{cid} class {c}: dice {_fmt(d)} hd95 {_fmt(h)}")
    lines.append(f"mean dice {summary.mean_dice:.6f}")
    lines.append(f"mean hd95 {summary.mean_hd95:.6f}")
    return "\n".join(lines) + "\n"
