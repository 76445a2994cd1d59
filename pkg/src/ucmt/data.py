"""Synthetic 2D segmentation data: generation, splitting, batching, file I/O.

Every random draw flows from named seeds through numpy SeedSequence spawn
keys (one independent Philox stream per sample / split / epoch), so datasets,
splits and batch orders are fully reproducible.  Images are quantized to the
1/255 grid at generation time, which makes the 8-bit on-disk format lossless:
regenerating from seed and loading from disk give bit-identical tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataIOError, PreconditionError

# spawn-key tags for derived streams
STREAM_SAMPLE = 0
STREAM_SPLIT = 1
STREAM_BATCH = 2
STREAM_CUTMIX = 3

NOISE_SIGMA = 0.1


@dataclass
class Sample:
    """One image with an optional ground-truth mask (absent for unlabeled)."""

    id: int
    image: np.ndarray  # (1, H, W) float64 in [0, 1], on the 1/255 grid
    mask: np.ndarray | None  # (H, W) int64 class indices, or None

    def without_mask(self) -> "Sample":
        return replace(self, mask=None)


@dataclass
class ManifestEntry:
    id: int
    image: str
    mask: str | None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    label_ratio: float | None = None
    seed: int | None = None

    @property
    def n_total(self) -> int:
        return len(self.entries)

    @property
    def n_labeled(self) -> int:
        return sum(1 for e in self.entries if e.mask is not None)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _ellipse_mask(height, width, cy, cx, sem_i, sem_j, angle) -> np.ndarray:
    ii, jj = np.mgrid[0:height, 0:width]
    di = ii - cy
    dj = jj - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = di * ca + dj * sa
    v = -di * sa + dj * ca
    return (u / sem_i) ** 2 + (v / sem_j) ** 2 <= 1.0


def generate_sample(sample_id: int, height: int, width: int, num_classes: int,
                    seed: int) -> Sample:
    """One image of 1-3 noisy ellipses on a textured background, exact mask."""
    rng = _stream(seed, STREAM_SAMPLE, sample_id)
    bg = rng.uniform(0.15, 0.40)
    contrast = rng.uniform(0.15, 0.45)
    fg = min(bg + contrast, 0.95)
    mask = np.zeros((height, width), dtype=np.int64)
    scale = min(height, width)
    inner = []
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0.18, 0.82) * height
        cx = rng.uniform(0.18, 0.82) * width
        sem_i = rng.uniform(0.09, 0.26) * scale
        sem_j = rng.uniform(0.09, 0.26) * scale
        angle = rng.uniform(0.0, np.pi)
        mask[_ellipse_mask(height, width, cy, cx, sem_i, sem_j, angle)] = 1
        inner.append((cy, cx, 0.45 * sem_i, 0.45 * sem_j, angle))
    if num_classes >= 3:
        for cy, cx, sem_i, sem_j, angle in inner:
            mask[_ellipse_mask(height, width, cy, cx, sem_i, sem_j, angle)] = 2
    img = np.full((height, width), bg)
    img[mask == 1] = fg
    if num_classes >= 3:
        img[mask == 2] = min(fg + 0.2, 1.0)
    img = img + rng.normal(0.0, NOISE_SIGMA, size=(height, width))
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # 1/255 grid: lossless 8-bit storage
    return Sample(id=sample_id, image=img[None, :, :], mask=mask)


def generate_synthetic(n: int, height: int, width: int, num_classes: int,
                       seed: int, start_id: int = 0) -> list[Sample]:
    """n deterministic samples with ids start_id .. start_id+n-1."""
    if n < 1:
        raise PreconditionError(f"need n >= 1 samples, got {n}")
    return [generate_sample(start_id + i, height, width, num_classes, seed)
            for i in range(n)]


def split(samples: list[Sample], label_ratio: float, seed: int):
    """Keep masks on ceil(ratio * n) samples, withhold the rest.

    Returns (labeled, unlabeled) sorted by id; unlabeled samples carry no
    mask (the caller's originals retain theirs for oracle evaluation only).
    """
    if not 0 < label_ratio <= 1:
        raise PreconditionError(f"label_ratio must be in (0, 1], got {label_ratio}")
    n = len(samples)
    n_lab = math.ceil(label_ratio * n)
    order = _stream(seed, STREAM_SPLIT).permutation(n)
    lab_idx = set(order[:n_lab].tolist())
    labeled = sorted((s for i, s in enumerate(samples) if i in lab_idx), key=lambda s: s.id)
    unlabeled = sorted((s.without_mask() for i, s in enumerate(samples) if i not in lab_idx),
                       key=lambda s: s.id)
    return labeled, unlabeled


def batches(d_l: list[Sample], d_u: list[Sample], nl: int, nu: int,
            epoch_seed: int, epoch: int):
    """Minibatches for one epoch: one pass over the unlabeled set.

    The unlabeled set is reshuffled and chunked (tail dropped); the labeled
    set is reshuffled once per epoch and cycled.  With an empty unlabeled set
    (fully-labeled training) the epoch iterates over the labeled set instead.
    Deterministic in (epoch_seed, epoch).
    """
    if nl < 1 or nu < 1:
        raise PreconditionError("batch sizes must be >= 1")
    if not d_l:
        raise PreconditionError("labeled set is empty")
    rng = _stream(epoch_seed, STREAM_BATCH, epoch)
    perm_l = rng.permutation(len(d_l))
    if not d_u:
        for it in range(len(d_l) // nl):
            yield [d_l[i] for i in perm_l[it * nl:(it + 1) * nl]], []
        return
    perm_u = rng.permutation(len(d_u))
    pos = 0
    for it in range(len(d_u) // nu):
        lab = [d_l[perm_l[(pos + j) % len(d_l)]] for j in range(nl)]
        pos += nl
        unl = [d_u[i] for i in perm_u[it * nu:(it + 1) * nu]]
        yield lab, unl


@dataclass
class Task:
    """A ready-to-train bundle: split training pool plus a held-out set."""

    labeled: list[Sample]
    unlabeled: list[Sample]
    val: list[Sample]
    height: int
    width: int
    num_classes: int
    in_channels: int = 1


def make_task(n: int, height: int, width: int, num_classes: int,
              label_ratio: float, seed: int, val_n: int) -> Task:
    """Generate the training pool and a disjoint held-out set from one seed."""
    pool = generate_synthetic(n, height, width, num_classes, seed)
    labeled, unlabeled = split(pool, label_ratio, seed)
    val = generate_synthetic(val_n, height, width, num_classes, seed, start_id=n)
    return Task(labeled=labeled, unlabeled=unlabeled, val=val,
                height=height, width=width, num_classes=num_classes)


def save_dataset(samples: list[Sample], out_dir, label_ratio: float | None = None,
                 seed: int | None = None) -> Manifest:
    """Write images/, masks/ and manifest.tsv under out_dir."""
    out_dir = Path(out_dir)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataIOError("duplicate sample ids")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        if s.image.shape[0] != 1:
            raise DataIOError("only single-channel images are stored")
        img_rel = f"images/{s.id}.png"
        arr = np.round(s.image[0] * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out_dir / img_rel)
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.png"
            Image.fromarray(s.mask.astype(np.uint8), mode="L").save(out_dir / mask_rel)
        entries.append(ManifestEntry(id=s.id, image=img_rel, mask=mask_rel))
    manifest = Manifest(entries=entries, label_ratio=label_ratio, seed=seed)
    with open(out_dir / "manifest.tsv", "w") as f:
        if label_ratio is not None:
            f.write(f"# label_ratio={label_ratio}\n")
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write(f"# n_labeled={manifest.n_labeled}\n")
        f.write(f"# n_total={manifest.n_total}\n")
        for e in entries:
            f.write(f"{e.id}\t{e.image}\t{e.mask if e.mask else 'NONE'}\n")
    return manifest


def load_dataset(in_dir) -> tuple[Manifest, list[Sample]]:
    """Read a dataset directory; labeled entries must have readable masks."""
    in_dir = Path(in_dir)
    mpath = in_dir / "manifest.tsv"
    if not mpath.is_file():
        raise DataIOError(f"missing manifest: {mpath}")
    entries = []
    label_ratio = seed = None
    for line in mpath.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "label_ratio":
                label_ratio = float(val)
            elif key == "seed":
                seed = int(val)
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataIOError(f"malformed manifest line in {mpath}: {line!r}")
        entries.append(ManifestEntry(id=int(parts[0]), image=parts[1],
                                     mask=None if parts[2] == "NONE" else parts[2]))
    samples = []
    for e in entries:
        ipath = in_dir / e.image
        if not ipath.is_file():
            raise DataIOError(f"missing image file: {ipath}")
        try:
            img = np.asarray(Image.open(ipath), dtype=np.float64) / 255.0
        except OSError as exc:
            raise DataIOError(f"corrupt image file: {ipath}") from exc
        mask = None
        if e.mask is not None:
            mp = in_dir / e.mask
            if not mp.is_file():
                raise DataIOError(f"missing mask file for labeled entry: {mp}")
            try:
                mask = np.asarray(Image.open(mp), dtype=np.int64)
            except OSError as exc:
                raise DataIOError(f"corrupt mask file: {mp}") from exc
        samples.append(Sample(id=e.id, image=img[None, :, :], mask=mask))
    return Manifest(entries=entries, label_ratio=label_ratio, seed=seed), samples
