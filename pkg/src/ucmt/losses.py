"""Training losses: soft dice with analytic gradient, the supervised /
cross-pseudo / mean-teacher compositions, Gaussian ramp-up, hardening.

All pseudo-label targets are hardened by argmax and treated as constants:
no gradient flows through the branch that produced a target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ShapeError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class RampConfig:
    """Gaussian ramp-up: weight lam_max * exp(-5 (1 - t/t_max)^2), clamped past t_max."""

    lam_max: float
    t_max: int

    def __post_init__(self):
        if self.lam_max <= 0:
            raise PreconditionError(f"lam_max must be > 0, got {self.lam_max}")
        if self.t_max < 1:
            raise PreconditionError(f"t_max must be >= 1, got {self.t_max}")


@dataclass(frozen=True)
class LossReport:
    """Loss components at one iteration; l_total = l_s + lam * (l_cps + l_mts)."""

    l_total: float
    l_s: float
    l_cps: float
    l_mts: float
    lam: float
    t: int


def ramp_up(t: int, cfg: RampConfig) -> float:
    if t < 0:
        raise PreconditionError(f"iteration must be >= 0, got {t}")
    frac = min(t, cfg.t_max) / cfg.t_max
    return cfg.lam_max * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def _check_pair(probs: np.ndarray, target: np.ndarray):
    if probs.ndim != 4 or target.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) tensors, got {probs.shape} and {target.shape}")
    if probs.shape != target.shape:
        raise ShapeError(f"probs shape {probs.shape} != target shape {target.shape}")


def dice_loss(probs: np.ndarray, target: np.ndarray, eps: float = DICE_EPS):
    """Soft dice loss averaged over batch and all classes.

    loss = 1 - mean_{b,c} (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps),
    sums over pixels.  Returns (loss, d loss / d probs); the target is a
    constant one-hot tensor.
    """
    _check_pair(probs, target)
    b, c = probs.shape[0], probs.shape[1]
    inter = (probs * target).sum(axis=(2, 3))
    sp = probs.sum(axis=(2, 3))
    sg = target.sum(axis=(2, 3))
    num = 2.0 * inter + eps
    den = sp + sg + eps
    loss = 1.0 - float((num / den).mean())
    # d(num/den)/dp = (2*g*den - num) / den^2 per pixel
    coef = -1.0 / (b * c)
    grad = coef * (2.0 * target * den[:, :, None, None] - num[:, :, None, None]) \
        / (den ** 2)[:, :, None, None]
    return loss, grad


def harden(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    if probs.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {probs.shape}")
    if probs.shape[1] < 2:
        raise PreconditionError("need at least 2 classes to harden")
    return probs.argmax(axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, H, W) integer labels -> (B, C, H, W) float64 one-hot."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"expected (B, H, W) labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes, *labels.shape[1:]))
    np.put_along_axis(out, labels[:, None, :, :], 1.0, axis=1)
    return out


def supervised_loss(probs1, probs2, target_onehot, eps: float = DICE_EPS):
    """Dice of each student against ground truth, summed over students.

    probs2 may be None for single-student methods.  Returns
    (value, grad1, grad2) with grad2 None when probs2 is None.
    """
    if probs1.shape[0] == 0:
        raise PreconditionError("labeled batch is empty")
    l1, g1 = dice_loss(probs1, target_onehot, eps)
    if probs2 is None:
        return l1, g1, None
    l2, g2 = dice_loss(probs2, target_onehot, eps)
    return l1 + l2, g1, g2


def cps_loss(probs1, probs2, eps: float = DICE_EPS):
    """Cross pseudo supervision: each student fits the other's hardened map.

    Symmetric in its arguments; hardened targets are constants.  Returns
    (value, grad1, grad2).
    """
    if probs1.shape[0] == 0:
        raise PreconditionError("unlabeled batch is empty")
    _check_pair(probs1, probs2)
    c = probs1.shape[1]
    t2 = one_hot(harden(probs2), c)
    t1 = one_hot(harden(probs1), c)
    l1, g1 = dice_loss(probs1, t2, eps)
    l2, g2 = dice_loss(probs2, t1, eps)
    return l1 + l2, g1, g2


def mts_loss(probs1, probs2, teacher, eps: float = DICE_EPS):
    """Students fit the teacher's hardened map (a constant).

    `teacher` is either a (B, C, H, W) probability tensor, hardened here, or
    an already-hardened (B, H, W) label map.  probs2 may be None (one-student
    mode).  Returns (value, grad1, grad2).
    """
    if probs1.shape[0] == 0:
        raise PreconditionError("batch is empty")
    teacher = np.asarray(teacher)
    label = harden(teacher) if teacher.ndim == 4 else teacher
    tgt = one_hot(label, probs1.shape[1])
    l1, g1 = dice_loss(probs1, tgt, eps)
    if probs2 is None:
        return l1, g1, None
    l2, g2 = dice_loss(probs2, tgt, eps)
    return l1 + l2, g1, g2


def total_loss(l_s: float, l_cps: float, l_mts: float, t: int, cfg: RampConfig,
               enable_cps: bool, enable_mts: bool) -> LossReport:
    """Compose the iteration loss; disabled terms contribute 0 and report 0."""
    lam = ramp_up(t, cfg)
    cps = l_cps if enable_cps else 0.0
    mts = l_mts if enable_mts else 0.0
    return LossReport(l_total=l_s + lam * (cps + mts), l_s=l_s,
                      l_cps=cps, l_mts=mts, lam=lam, t=t)
