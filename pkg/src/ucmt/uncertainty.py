"""Per-pixel epistemic uncertainty: entropy of fused teacher/student softmax."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError, ShapeError, ValidationError
from .gridnet import softmax_channels

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class UncertaintyMap:
    """Entropy in nats per pixel, (B, H, W); source_student 1 or 2, 0 if unattributed."""

    values: np.ndarray
    source_student: int = 0

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]


def fused_probability(student_logits: np.ndarray, teacher_logits: np.ndarray) -> np.ndarray:
    """Average of the two per-pixel softmax distributions."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ: {student_logits.shape} "
                         f"vs {teacher_logits.shape}")
    return 0.5 * (softmax_channels(student_logits) + softmax_channels(teacher_logits))


def entropy_map(probs: np.ndarray, source_student: int = 0) -> UncertaintyMap:
    """Shannon entropy in nats over the channel axis, with 0*log(0) = 0."""
    if probs.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) probabilities, got {probs.shape}")
    if probs.min() < 0:
        raise ValidationError("probabilities must be >= 0")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > NORMALIZATION_TOL:
        raise ValidationError(
            f"channel sums deviate from 1 by {np.abs(sums - 1.0).max():.3e}")
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return UncertaintyMap(values=-plogp.sum(axis=1), source_student=source_student)


def student_uncertainty(m: int, student_logits: np.ndarray,
                        teacher_logits: np.ndarray) -> UncertaintyMap:
    """Entropy of the fused student-m/teacher distribution."""
    if m not in (1, 2):
        raise PreconditionError(f"student index must be 1 or 2, got {m}")
    return entropy_map(fused_probability(student_logits, teacher_logits), source_student=m)


def write_entropy_csv(umap: UncertaintyMap, out_dir, stem: str = "entropy") -> list[Path]:
    """Dump one row-major CSV grid per batch item; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(umap.batch_size):
        path = out_dir / f"{stem}_{i:03d}.csv"
        with open(path, "w") as f:
            for row in umap.values[i]:
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")
        paths.append(path)
    return paths
