"""Segmentation metrics: overlap (DSC, Jaccard), boundary distances
(95th-percentile Hausdorff, average surface distance), and the two training
diagnostics (inter-model disagreement, mean pseudo-label entropy).

Conventions, fixed so every value is oracle-checkable: boundaries use
4-connectivity with the image border counting as background; distances are
Euclidean between pixel centers; percentiles are nearest-rank; an empty-vs-
nonempty boundary pair yields +inf, excluded (and counted) in aggregates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses
from .errors import ShapeError
from .uncertainty import UncertaintyMap


def _binary(labels: np.ndarray, cls: int) -> np.ndarray:
    return np.asarray(labels) == cls


def _check_same(pred: np.ndarray, gt: np.ndarray):
    if np.asarray(pred).shape != np.asarray(gt).shape:
        raise ShapeError(f"label maps differ in shape: {np.asarray(pred).shape} "
                         f"vs {np.asarray(gt).shape}")


def dsc(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _check_same(pred, gt)
    p = _binary(pred, cls)
    g = _binary(gt, cls)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def jaccard(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """|P∩G| / |P∪G|; 1.0 when both masks are empty."""
    _check_same(pred, gt)
    p = _binary(pred, cls)
    g = _binary(gt, cls)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(n, 2) coordinates of foreground pixels with a background 4-neighbor.

    Pixels on the image border always qualify (outside counts as background).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    idx = max(int(math.ceil(pct / 100.0 * len(sorted_vals))), 1) - 1
    return float(sorted_vals[idx])


def surface_distances(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[float, float]:
    """(hd95, asd) between class boundaries, in pixels.

    hd95 is the max of the two directed nearest-rank 95th percentiles; asd is
    the mean over all boundary-to-nearest-opposite distances pooled from both
    directions.  Both empty -> (0, 0); exactly one empty -> (inf, inf).
    """
    _check_same(pred, gt)
    pb = boundary_pixels(_binary(pred, cls))
    gb = boundary_pixels(_binary(gt, cls))
    if len(pb) == 0 and len(gb) == 0:
        return 0.0, 0.0
    if len(pb) == 0 or len(gb) == 0:
        return math.inf, math.inf
    diff = pb[:, None, :].astype(np.float64) - gb[None, :, :].astype(np.float64)
    dmat = np.sqrt((diff ** 2).sum(axis=2))
    d_pg = dmat.min(axis=1)
    d_gp = dmat.min(axis=0)
    hd95 = max(_nearest_rank(np.sort(d_pg), 95.0), _nearest_rank(np.sort(d_gp), 95.0))
    asd = float(np.concatenate([d_pg, d_gp]).mean())
    return hd95, asd


def disagreement(pred1: np.ndarray, pred2: np.ndarray, num_classes: int) -> float:
    """Dice loss between the one-hot encodings of two hardened predictions."""
    _check_same(pred1, pred2)
    p1 = losses.one_hot(np.asarray(pred1)[None, :, :], num_classes)
    p2 = losses.one_hot(np.asarray(pred2)[None, :, :], num_classes)
    value, _ = losses.dice_loss(p1, p2)
    return value


def mean_entropy(maps) -> float:
    """Flat mean over all pixels of one map or a list of maps, in nats."""
    if isinstance(maps, UncertaintyMap):
        maps = [maps]
    vals = [m.values if isinstance(m, UncertaintyMap) else np.asarray(m) for m in maps]
    return float(np.concatenate([v.reshape(-1) for v in vals]).mean())


@dataclass
class MetricRecord:
    """Foreground-macro-averaged metrics for one sample."""

    sample_id: int
    dsc: float
    jaccard: float
    hd95: float
    asd: float


@dataclass
class MetricSummary:
    mean_dsc: float
    mean_jaccard: float
    mean_hd95: float
    mean_asd: float
    n_samples: int
    n_inf_excluded: int


def compute_record(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                   sample_id: int = -1) -> MetricRecord:
    """Macro-average over foreground classes (background excluded)."""
    ds, js, hs, asds = [], [], [], []
    for cls in range(1, num_classes):
        ds.append(dsc(pred, gt, cls))
        js.append(jaccard(pred, gt, cls))
        h, a = surface_distances(pred, gt, cls)
        hs.append(h)
        asds.append(a)
    return MetricRecord(sample_id=sample_id, dsc=float(np.mean(ds)),
                        jaccard=float(np.mean(js)), hd95=float(np.mean(hs)),
                        asd=float(np.mean(asds)))


def summarize(records: list[MetricRecord]) -> MetricSummary:
    """Mean of per-sample rows; +inf surface distances excluded and counted."""
    finite = [r for r in records if math.isfinite(r.hd95) and math.isfinite(r.asd)]
    n_excluded = len(records) - len(finite)
    return MetricSummary(
        mean_dsc=float(np.mean([r.dsc for r in records])),
        mean_jaccard=float(np.mean([r.jaccard for r in records])),
        mean_hd95=float(np.mean([r.hd95 for r in finite])) if finite else math.inf,
        mean_asd=float(np.mean([r.asd for r in finite])) if finite else math.inf,
        n_samples=len(records),
        n_inf_excluded=n_excluded,
    )


def write_metrics_csv(records: list[MetricRecord], summary: MetricSummary, path) -> None:
    """Per-sample rows plus a final 'mean' row (id,dsc,jaccard,hd95,asd)."""
    with open(path, "w") as f:
        f.write("id,dsc,jaccard,hd95,asd\n")
        for r in records:
            f.write(f"{r.sample_id},{r.dsc:.17g},{r.jaccard:.17g},"
                    f"{r.hd95:.17g},{r.asd:.17g}\n")
        f.write(f"mean,{summary.mean_dsc:.17g},{summary.mean_jaccard:.17g},"
                f"{summary.mean_hd95:.17g},{summary.mean_asd:.17g}\n")
