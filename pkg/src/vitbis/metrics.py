"""Dice score and 95th-percentile Hausdorff distance on label masks.

HD95 is computed between full class point sets (not extracted contours)
and uses the nearest-rank quantile. Nearest points come from an exact
Euclidean distance transform; the distance itself is then recomputed from
the returned coordinates so results are reproducible to the last bit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch

UNDEFINED = math.nan
"""Sentinel for a distance that does not exist (a class set is empty)."""

MEAN_ROW = "mean"


def _pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    pred, gt = _pair(pred, gt)
    p = pred == class_id
    g = gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def nearest_rank(values: np.ndarray, q: float) -> float:
    """``ceil(q * n)``-th smallest value (1-based), no interpolation."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        return UNDEFINED
    rank = max(int(math.ceil(q * v.size)), 1)
    return float(v[rank - 1])


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0)) -> np.ndarray:
    """Distance from every ``src`` pixel to the nearest ``dst`` pixel."""
    src = np.asarray(src, dtype=bool)
    dst = np.asarray(dst, dtype=bool)
    idx = ndimage.distance_transform_edt(~dst, sampling=spacing, return_distances=False, return_indices=True)
    rows, cols = np.nonzero(src)
    dr = (rows - idx[0][rows, cols]) * float(spacing[0])
    dc = (cols - idx[1][rows, cols]) * float(spacing[1])
    return np.sqrt(dr * dr + dc * dc)


def hausdorff_quantile(pred, gt, class_id: int, q: float = 0.95, spacing=(1.0, 1.0)) -> float:
    pred, gt = _pair(pred, gt)
    p = pred == class_id
    g = gt == class_id
    if not p.any() or not g.any():
        return UNDEFINED
    return max(
        nearest_rank(directed_distances(p, g, spacing), q),
        nearest_rank(directed_distances(g, p, spacing), q),
    )


def hd95(pred, gt, class_id: int, spacing=(1.0, 1.0)) -> float:
    """Symmetric 95th-percentile Hausdorff distance in physical units.

    Returns :data:`UNDEFINED` (NaN) when either class set is empty.
    """
    return hausdorff_quantile(pred, gt, class_id, 0.95, spacing)


# ------------------------------------------------------------------ reports


@dataclass
class MetricReport:
    per_class_dice: list[float]
    per_class_hd95: list[float]
    class_names: list[str] = field(default_factory=list)
    undefined_hd95: int = 0

    def __post_init__(self):
        if len(self.per_class_dice) != len(self.per_class_hd95):
            raise ShapeMismatch("per-class lists differ in length")
        if not self.class_names:
            self.class_names = [f"class_{j + 1}" for j in range(len(self.per_class_dice))]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.per_class_dice)) if self.per_class_dice else UNDEFINED

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.per_class_hd95 if not math.isnan(v)]
        return float(np.mean(vals)) if vals else UNDEFINED

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "dice", "hd95_mm"])
        for name, d, h in zip(self.class_names, self.per_class_dice, self.per_class_hd95):
            writer.writerow([name, _fmt(d), _fmt(h)])
        writer.writerow([MEAN_ROW, _fmt(self.mean_dice), _fmt(self.mean_hd95)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["class", "dice", "hd95_mm"]:
            raise ValueError("not a metric report CSV")
        names, dice, hd = [], [], []
        for name, d, h in rows[1:]:
            if name == MEAN_ROW:
                continue
            names.append(name)
            dice.append(_parse(d))
            hd.append(_parse(h))
        return cls(dice, hd, names, sum(math.isnan(v) for v in hd))

    def format_table(self) -> str:
        """Text table: mean Dice %, mean HD95, then Dice % per class."""
        head = ["DSC", "HD"] + self.class_names
        vals = [_pct(self.mean_dice), _mm(self.mean_hd95)] + [_pct(d) for d in self.per_class_dice]
        widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
        lines = [
            " ".join(a.ljust(w) for a, w in zip(head, widths)),
            " ".join(b.ljust(w) for b, w in zip(vals, widths)),
        ]
        if self.undefined_hd95:
            lines.append(f"({self.undefined_hd95} HD95 value(s) undefined: empty class set, excluded from means)")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return "-" if math.isnan(v) else f"{v:.6f}"


def _parse(s: str) -> float:
    return UNDEFINED if s == "-" else float(s)


def _pct(v: float) -> str:
    return "-" if math.isnan(v) else f"{100 * v:.2f}"


def _mm(v: float) -> str:
    return "-" if math.isnan(v) else f"{v:.2f}"


def evaluate(pred_batch, gt_batch, num_classes: int, spacing=(1.0, 1.0), class_names=None) -> MetricReport:
    """Per-image metrics for every foreground class, averaged over images.

    Undefined HD95 values (empty prediction or ground truth) are skipped in
    the per-class average and counted in ``undefined_hd95``.
    """
    pred_batch, gt_batch = _pair(pred_batch, gt_batch)
    if pred_batch.ndim == 2:
        pred_batch, gt_batch = pred_batch[None], gt_batch[None]
    dice, hd, undefined = [], [], 0
    for j in range(1, num_classes):
        d_vals, h_vals = [], []
        for p, g in zip(pred_batch, gt_batch):
            d_vals.append(dice_score(p, g, j))
            h = hd95(p, g, j, spacing)
            if math.isnan(h):
                undefined += 1
            else:
                h_vals.append(h)
        dice.append(float(np.mean(d_vals)))
        hd.append(float(np.mean(h_vals)) if h_vals else UNDEFINED)
    return MetricReport(dice, hd, list(class_names) if class_names else [], undefined)
