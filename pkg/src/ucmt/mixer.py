"""Region mixing: uncertainty-guided within-image swaps plus a CutMix baseline.

The uncertainty-guided mix is RNG-free: the grid, per-cell scores, and swap
plan are all deterministic functions of the inputs.  Every donor cell is read
from the original image, so applying a plan is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import GeometryError, PreconditionError, ShapeError

SelectMode = Literal["most_uncertain", "most_certain"]


@dataclass(frozen=True)
class RegionGrid:
    """rows x cols partition into r cells of cell_h x cell_w pixels each."""

    rows: int
    cols: int
    cell_h: int
    cell_w: int

    @property
    def r(self) -> int:
        return self.rows * self.cols

    def cell_slices(self, cell: int):
        """(row slice, col slice) for a row-major cell index."""
        i, j = divmod(cell, self.cols)
        return (slice(i * self.cell_h, (i + 1) * self.cell_h),
                slice(j * self.cell_w, (j + 1) * self.cell_w))


@dataclass(frozen=True)
class SwapPlan:
    """(recipient_cell, donor_cell, source_map) triples; recipients distinct."""

    triples: tuple[tuple[int, int, int], ...]
    k: int

    def __len__(self) -> int:
        return len(self.triples)


def partition(height: int, width: int, r: int) -> RegionGrid:
    """Grid of r cells covering the image, factor pair closest to square.

    Among factorizations rows*cols == r with rows | height and cols | width,
    picks the pair minimizing |rows - cols| (ties: rows <= cols).
    """
    if r < 2:
        raise PreconditionError(f"need r >= 2 cells, got {r}")
    best = None
    for rows in range(1, r + 1):
        if r % rows:
            continue
        cols = r // rows
        if height % rows or width % cols:
            continue
        key = (abs(rows - cols), rows)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    if best is None:
        raise GeometryError(f"no rows*cols == {r} factorization divides {height}x{width}")
    _, rows, cols = best
    return RegionGrid(rows=rows, cols=cols, cell_h=height // rows, cell_w=width // cols)


def region_scores(values: np.ndarray, grid: RegionGrid) -> np.ndarray:
    """Mean value per cell, length r, row-major cell order."""
    if values.ndim != 2:
        raise ShapeError(f"expected a 2D per-sample map, got {values.shape}")
    if values.shape != (grid.rows * grid.cell_h, grid.cols * grid.cell_w):
        raise ShapeError(f"map shape {values.shape} does not match grid")
    cells = values.reshape(grid.rows, grid.cell_h, grid.cols, grid.cell_w)
    return cells.mean(axis=(1, 3)).reshape(-1)


def select_topk(scores: np.ndarray, k: int, mode: SelectMode) -> list[int]:
    """Rank-ordered cell indices, ties broken by the lower cell index."""
    scores = np.asarray(scores, dtype=np.float64)
    r = len(scores)
    if not 1 <= 2 * k <= r:
        raise PreconditionError(f"k must satisfy 1 <= k <= r/2, got k={k}, r={r}")
    if mode == "most_uncertain":
        order = sorted(range(r), key=lambda i: (-scores[i], i))
    elif mode == "most_certain":
        order = sorted(range(r), key=lambda i: (scores[i], i))
    else:
        raise PreconditionError(f"unknown mode {mode!r}")
    return order[:k]


def build_swap_plan(u1: np.ndarray, u2: np.ndarray, grid: RegionGrid, k: int) -> SwapPlan:
    """Pair the i-th most uncertain cell of one map with the i-th most certain
    cell of the other map, both directions.

    Triples driven by the first map's uncertainty take donors from the second
    map's certain cells (source_map=2), and vice versa (source_map=1).  If a
    recipient is selected by both halves, only the source_map=1 triple is kept,
    so recipients stay pairwise distinct.
    """
    s1 = region_scores(u1, grid)
    s2 = region_scores(u2, grid)
    unc1 = select_topk(s1, k, "most_uncertain")
    unc2 = select_topk(s2, k, "most_uncertain")
    cert1 = select_topk(s1, k, "most_certain")
    cert2 = select_topk(s2, k, "most_certain")
    from_u2 = set(unc2)
    triples = [(rec, don, 2) for rec, don in zip(unc1, cert2) if rec not in from_u2]
    triples += [(rec, don, 1) for rec, don in zip(unc2, cert1)]
    return SwapPlan(triples=tuple(triples), k=k)


def apply_umix(image: np.ndarray, label: np.ndarray, plan: SwapPlan,
               grid: RegionGrid) -> tuple[np.ndarray, np.ndarray]:
    """Copy donor cells of the ORIGINAL image/label into recipient cells.

    image is (C, H, W), label is (H, W); both move under the same plan.
    """
    if image.ndim != 3 or label.ndim != 2 or image.shape[1:] != label.shape:
        raise ShapeError(f"incompatible image {image.shape} / label {label.shape}")
    if image.shape[1] != grid.rows * grid.cell_h or image.shape[2] != grid.cols * grid.cell_w:
        raise ShapeError(f"image {image.shape} does not match grid")
    out_img = image.copy()
    out_lab = label.copy()
    for rec, don, _src in plan.triples:
        ri, rj = grid.cell_slices(rec)
        di, dj = grid.cell_slices(don)
        out_img[:, ri, rj] = image[:, di, dj]
        out_lab[ri, rj] = label[di, dj]
    return out_img, out_lab


def umix(image: np.ndarray, label: np.ndarray, u1: np.ndarray, u2: np.ndarray,
         k: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """partition -> score -> plan -> apply, all deterministic."""
    grid = partition(image.shape[1], image.shape[2], r)
    plan = build_swap_plan(u1, u2, grid, k)
    return apply_umix(image, label, plan, grid)


def cutmix(image_a: np.ndarray, label_a: np.ndarray, image_b: np.ndarray,
           label_b: np.ndarray, rng_seed, lam: float | None = None):
    """Paste a random-area rectangle of (image_b, label_b) into a copy of
    (image_a, label_a).

    The area fraction lam is Uniform(0,1) unless given; the box has a random
    center and is shifted to lie inside the image, so lam=0 is the identity
    and lam=1 replaces the whole sample.  Deterministic given rng_seed.
    """
    if image_a.shape != image_b.shape or label_a.shape != label_b.shape:
        raise ShapeError("cutmix inputs must share geometry")
    h, w = label_a.shape
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_seed)))
    if lam is None:
        lam = float(rng.uniform())
    box_h = int(round(h * np.sqrt(lam)))
    box_w = int(round(w * np.sqrt(lam)))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = min(max(cy - box_h // 2, 0), h - box_h)
    left = min(max(cx - box_w // 2, 0), w - box_w)
    out_img = image_a.copy()
    out_lab = label_a.copy()
    out_img[:, top:top + box_h, left:left + box_w] = image_b[:, top:top + box_h,
                                                             left:left + box_w]
    out_lab[top:top + box_h, left:left + box_w] = label_b[top:top + box_h,
                                                          left:left + box_w]
    return out_img, out_lab


def plan_csv(plan: SwapPlan) -> str:
    """Debug dump of a plan as CSV text."""
    lines = ["recipient_cell,donor_cell,source_map"]
    lines += [f"{rec},{don},{src}" for rec, don, src in plan.triples]
    return "\n".join(lines) + "\n"
