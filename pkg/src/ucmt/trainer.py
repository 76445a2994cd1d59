"""Two-student/EMA-teacher training engine with the two-step mixed iteration.

One outer iteration in the full method runs two student-update phases: the
first on original batches (also producing per-sample uncertainty maps and
teacher pseudo labels), the second on region-mixed inputs where the
mean-teacher target for unlabeled items is the mixed phase-1 pseudo label.
Method variants toggle the architecture (single / teacher-student /
student-student / student-teacher-student), the two unsupervised losses and
the mixing strategy.  Everything is deterministic given the three seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, gridnet, losses, metrics, mixer
from .errors import ConfigError, DataIOError, DivergenceError
from .gridnet import AdamWState, LayerSpec, NetParams
from .losses import LossReport, RampConfig
from .uncertainty import UncertaintyMap, student_uncertainty

METHOD_NAMES = ("baseline", "mt", "cps", "cmt_v1", "cmt_v2", "cmt_v3", "ucmt")
MIX_NAMES = ("none", "cutmix", "umix")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MethodFlags:
    architecture: str  # "single" | "ts" | "ss" | "sts"
    enable_cps: bool
    enable_mts: bool
    enable_umix: bool

    @property
    def two_students(self) -> bool:
        return self.architecture in ("ss", "sts")

    @property
    def uses_unlabeled(self) -> bool:
        return self.enable_cps or self.enable_mts


_METHOD_TABLE = {
    "baseline": MethodFlags("single", False, False, False),
    "mt": MethodFlags("ts", False, True, False),
    "cps": MethodFlags("ss", True, False, False),
    "cmt_v1": MethodFlags("sts", False, True, False),
    "cmt_v2": MethodFlags("sts", True, False, False),
    "cmt_v3": MethodFlags("sts", True, True, False),
    "ucmt": MethodFlags("sts", True, True, True),
}


def method_flags(method: str) -> MethodFlags:
    """Architecture and loss/mix switches for each method variant."""
    if method not in _METHOD_TABLE:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHOD_NAMES)}")
    return _METHOD_TABLE[method]


def default_mix(method: str) -> str:
    return "umix" if method_flags(method).enable_umix else "none"


@dataclass
class TrainConfig:
    """All training hyperparameters; mix=None resolves to the method default."""

    method: str = "ucmt"
    mix: str | None = None
    lam_max: float = 1.0
    alpha: float = 0.99
    beta: float = 0.99
    k: int = 2
    r: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    seed_init1: int = 1
    seed_init2: int = 2
    seed_data: int = 0
    eps_dice: float = losses.DICE_EPS
    hidden_channels: tuple[int, ...] = gridnet.DEFAULT_HIDDEN
    kernel_size: int = 3
    val_batch: int = 4
    # fresh teacher forward on mixed unlabeled inputs in phase 2, instead of
    # the mixed phase-1 pseudo label (non-default reading)
    phase2_fresh_teacher: bool = False

    def __post_init__(self):
        flags = method_flags(self.method)
        if self.mix is None:
            self.mix = default_mix(self.method)
        if self.mix not in MIX_NAMES:
            raise ConfigError(f"unknown mix {self.mix!r}; valid: {', '.join(MIX_NAMES)}")
        if self.mix == "umix" and not flags.two_students:
            valid = [m for m in METHOD_NAMES if method_flags(m).two_students]
            raise ConfigError(
                f"mix=umix needs two uncertainty maps; method {self.method!r} has a "
                f"single student. Valid methods for umix: {', '.join(valid)}")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ConfigError(f"alpha/beta must be in (0, 1), got {self.alpha}, {self.beta}")
        if self.lam_max <= 0:
            raise ConfigError(f"lam_max must be > 0, got {self.lam_max}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.mix == "umix" and not 1 <= 2 * self.k <= self.r:
            raise ConfigError(f"umix needs 1 <= k <= r/2, got k={self.k}, r={self.r}")

    @property
    def flags(self) -> MethodFlags:
        return method_flags(self.method)


@dataclass
class TriadState:
    """Teacher (EMA-only, no optimizer) plus one or two optimized students."""

    teacher: NetParams
    student1: NetParams
    student2: NetParams | None
    opt1: AdamWState
    opt2: AdamWState | None
    t: int = 0
    rng_seed: int = 0


@dataclass
class HistoryRecord:
    t: int
    lam: float
    l_total: float
    l_s: float
    l_cps: float
    l_mts: float
    disagreement: float
    mean_entropy: float
    val_dsc: float | None = None


@dataclass
class Phase1Output:
    report: LossReport
    u1_labeled: UncertaintyMap | None = None
    u2_labeled: UncertaintyMap | None = None
    u1_unlabeled: UncertaintyMap | None = None
    u2_unlabeled: UncertaintyMap | None = None
    teacher_pseudo_unlabeled: np.ndarray | None = None


class TrainingDiverged(DivergenceError):
    """Raised on non-finite training values; carries the partial run."""

    def __init__(self, message: str, state: TriadState, history: list[HistoryRecord]):
        super().__init__(message)
        self.state = state
        self.history = history


def init_triad(cfg: TrainConfig, spec: LayerSpec) -> TriadState:
    """Students from their two seeds; teacher starts as their beta-combination."""
    s1 = gridnet.init_params(spec, cfg.seed_init1)
    if cfg.flags.two_students:
        s2 = gridnet.init_params(spec, cfg.seed_init2)
        teacher = gridnet.combine_params(s1, s2, cfg.beta)
        opt2 = gridnet.init_adamw_state(s2)
    else:
        s2 = None
        teacher = s1.copy()
        opt2 = None
    return TriadState(teacher=teacher, student1=s1, student2=s2,
                      opt1=gridnet.init_adamw_state(s1), opt2=opt2,
                      t=0, rng_seed=cfg.seed_data)


def ema_update(state: TriadState, alpha: float, beta: float) -> TriadState:
    """teacher <- alpha*teacher + (1-alpha)*(beta*s1 + (1-beta)*s2); students untouched.

    With a single student the inner combination degenerates to that student.
    """
    if state.student2 is not None:
        inner = gridnet.combine_params(state.student1, state.student2, beta)
    else:
        inner = state.student1
    return replace(state, teacher=gridnet.combine_params(state.teacher, inner, alpha))


def _stack_images(samples: list[data.Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _stack_masks(samples: list[data.Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples])


def _student_step(params: NetParams, opt: AdamWState, cache, probs: np.ndarray,
                  grad_probs: np.ndarray, cfg: TrainConfig):
    grad_logits = gridnet.softmax_backward(probs, grad_probs)
    grads = gridnet.backward_from_cache(params, cache, grad_logits)
    return gridnet.adamw_update(params, grads, opt, lr=cfg.lr, beta1=ADAM_BETA1,
                                beta2=ADAM_BETA2, eps=ADAM_EPS,
                                weight_decay=cfg.weight_decay)


def _train_phase(state: TriadState, cfg: TrainConfig, ramp: RampConfig,
                 x_lab: np.ndarray, y_lab: np.ndarray, x_unl: np.ndarray | None,
                 mts_target, num_classes: int):
    """Shared loss/update machinery for both phases.

    mts_target: None (disabled), "teacher" (forward the current teacher on
    x_unl and harden), or a constant (Bu, H, W) label map.  Returns
    (new_state, report, forward bundle for uncertainty reuse).
    """
    flags = cfg.flags
    n_lab = x_lab.shape[0]
    use_unl = flags.uses_unlabeled and x_unl is not None
    x_all = np.concatenate([x_lab, x_unl]) if use_unl else x_lab

    logits1, cache1 = gridnet.forward_with_cache(state.student1, x_all)
    probs1 = gridnet.softmax_channels(logits1)
    logits2 = cache2 = probs2 = None
    if flags.two_students:
        logits2, cache2 = gridnet.forward_with_cache(state.student2, x_all)
        probs2 = gridnet.softmax_channels(logits2)

    target = losses.one_hot(y_lab, num_classes)
    p2_lab = probs2[:n_lab] if probs2 is not None else None
    l_s, gs1, gs2 = losses.supervised_loss(probs1[:n_lab], p2_lab, target, cfg.eps_dice)

    l_cps = l_mts = 0.0
    gc1 = gc2 = gm1 = gm2 = None
    teacher_label = None
    if use_unl and flags.enable_cps:
        l_cps, gc1, gc2 = losses.cps_loss(probs1[n_lab:], probs2[n_lab:], cfg.eps_dice)
    if use_unl and flags.enable_mts:
        if isinstance(mts_target, str) and mts_target == "teacher":
            t_logits = gridnet.forward(state.teacher, x_unl)
            teacher_label = losses.harden(gridnet.softmax_channels(t_logits))
        else:
            teacher_label = mts_target
        p2_unl = probs2[n_lab:] if probs2 is not None else None
        l_mts, gm1, gm2 = losses.mts_loss(probs1[n_lab:], p2_unl, teacher_label,
                                          cfg.eps_dice)

    report = losses.total_loss(l_s, l_cps, l_mts, state.t, ramp,
                               flags.enable_cps, flags.enable_mts)

    g1 = np.zeros_like(probs1)
    g1[:n_lab] += gs1
    if gc1 is not None:
        g1[n_lab:] += report.lam * gc1
    if gm1 is not None:
        g1[n_lab:] += report.lam * gm1
    s1, opt1 = _student_step(state.student1, state.opt1, cache1, probs1, g1, cfg)

    s2, opt2 = state.student2, state.opt2
    if flags.two_students:
        g2 = np.zeros_like(probs2)
        g2[:n_lab] += gs2
        if gc2 is not None:
            g2[n_lab:] += report.lam * gc2
        if gm2 is not None:
            g2[n_lab:] += report.lam * gm2
        s2, opt2 = _student_step(state.student2, state.opt2, cache2, probs2, g2, cfg)

    new_state = replace(state, student1=s1, student2=s2, opt1=opt1, opt2=opt2)
    new_state = ema_update(new_state, cfg.alpha, cfg.beta)
    bundle = {"logits1": logits1, "logits2": logits2, "n_lab": n_lab,
              "teacher_label": teacher_label}
    return new_state, report, bundle


def step_phase1(state: TriadState, labeled: list[data.Sample],
                unlabeled: list[data.Sample], cfg: TrainConfig,
                ramp: RampConfig, num_classes: int):
    """Loss/update on original batches, emitting uncertainty maps and the
    teacher pseudo labels the mixer consumes.

    Uncertainty maps fuse the same per-step forward passes used for the loss
    (one forward per network per step); t is not incremented here.
    """
    flags = cfg.flags
    x_lab = _stack_images(labeled)
    y_lab = _stack_masks(labeled)
    x_unl = _stack_images(unlabeled) if unlabeled else None

    mts_target = "teacher" if flags.enable_mts else None
    new_state, report, bundle = _train_phase(
        state, cfg, ramp, x_lab, y_lab, x_unl, mts_target, num_classes)

    out = Phase1Output(report=report,
                       teacher_pseudo_unlabeled=bundle["teacher_label"])
    need_maps = cfg.mix == "umix"
    need_pseudo = cfg.mix in ("umix", "cutmix") and flags.uses_unlabeled
    if need_pseudo and out.teacher_pseudo_unlabeled is None and x_unl is not None:
        t_logits = gridnet.forward(state.teacher, x_unl)
        out.teacher_pseudo_unlabeled = losses.harden(gridnet.softmax_channels(t_logits))
    if need_maps:
        n_lab = bundle["n_lab"]
        t_lab = gridnet.forward(state.teacher, x_lab)
        out.u1_labeled = student_uncertainty(1, bundle["logits1"][:n_lab], t_lab)
        out.u2_labeled = student_uncertainty(2, bundle["logits2"][:n_lab], t_lab)
        if x_unl is not None and flags.uses_unlabeled:
            t_unl = gridnet.forward(state.teacher, x_unl)
            out.u1_unlabeled = student_uncertainty(1, bundle["logits1"][n_lab:], t_unl)
            out.u2_unlabeled = student_uncertainty(2, bundle["logits2"][n_lab:], t_unl)
    return new_state, out


def step_phase2(state: TriadState, mixed_labeled: np.ndarray, mixed_masks: np.ndarray,
                mixed_unlabeled: np.ndarray | None, mixed_pseudo: np.ndarray | None,
                cfg: TrainConfig, ramp: RampConfig, num_classes: int):
    """Same machinery on mixed inputs; the mean-teacher target is the mixed
    phase-1 pseudo label (no fresh teacher forward unless configured).
    Increments t: one outer iteration is a (phase1, phase2) pair."""
    mts_target = None
    if cfg.flags.enable_mts:
        mts_target = "teacher" if cfg.phase2_fresh_teacher else mixed_pseudo
    new_state, report, _ = _train_phase(
        state, cfg, ramp, mixed_labeled, mixed_masks, mixed_unlabeled,
        mts_target, num_classes)
    return replace(new_state, t=new_state.t + 1), report


def _build_mixed(state: TriadState, p1: Phase1Output, labeled, unlabeled,
                 cfg: TrainConfig, height: int, width: int):
    """Phase-2 inputs from phase-1 outputs under the configured mix."""
    x_lab = _stack_images(labeled)
    y_lab = _stack_masks(labeled)
    uses_unl = cfg.flags.uses_unlabeled and unlabeled
    if cfg.mix == "umix":
        grid = mixer.partition(height, width, cfg.r)
        mixed_imgs, mixed_masks = [], []
        for i, s in enumerate(labeled):
            plan = mixer.build_swap_plan(p1.u1_labeled.values[i],
                                         p1.u2_labeled.values[i], grid, cfg.k)
            xi, yi = mixer.apply_umix(s.image, s.mask, plan, grid)
            mixed_imgs.append(xi)
            mixed_masks.append(yi)
        mu_imgs, mu_pseudo = [], []
        if uses_unl:
            for j, s in enumerate(unlabeled):
                plan = mixer.build_swap_plan(p1.u1_unlabeled.values[j],
                                             p1.u2_unlabeled.values[j], grid, cfg.k)
                xj, pj = mixer.apply_umix(s.image, p1.teacher_pseudo_unlabeled[j],
                                          plan, grid)
                mu_imgs.append(xj)
                mu_pseudo.append(pj)
        return (np.stack(mixed_imgs), np.stack(mixed_masks),
                np.stack(mu_imgs) if mu_imgs else None,
                np.stack(mu_pseudo) if mu_pseudo else None)
    # cutmix: partner is the batch-reversal sample
    n = len(labeled)
    mixed_imgs, mixed_masks = [], []
    for i, s in enumerate(labeled):
        p = labeled[n - 1 - i]
        ss = np.random.SeedSequence(cfg.seed_data,
                                    spawn_key=(data.STREAM_CUTMIX, state.t, 0, i))
        xi, yi = mixer.cutmix(s.image, s.mask, p.image, p.mask, ss)
        mixed_imgs.append(xi)
        mixed_masks.append(yi)
    mu_imgs, mu_pseudo = [], []
    if uses_unl:
        m = len(unlabeled)
        pseudo = p1.teacher_pseudo_unlabeled
        for j, s in enumerate(unlabeled):
            p = unlabeled[m - 1 - j]
            ss = np.random.SeedSequence(cfg.seed_data,
                                        spawn_key=(data.STREAM_CUTMIX, state.t, 1, j))
            xj, pj = mixer.cutmix(s.image, pseudo[j], p.image, pseudo[m - 1 - j], ss)
            mu_imgs.append(xj)
            mu_pseudo.append(pj)
    return (np.stack(mixed_imgs), np.stack(mixed_masks),
            np.stack(mu_imgs) if mu_imgs else None,
            np.stack(mu_pseudo) if mu_pseudo else None)


def predict_labels(params: NetParams, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Hardened predictions (B, H, W) for a stack of images."""
    preds = []
    for s in range(0, images.shape[0], batch):
        logits = gridnet.forward(params, images[s:s + batch])
        preds.append(losses.harden(gridnet.softmax_channels(logits)))
    return np.concatenate(preds)


def evaluate_dsc(params: NetParams, samples: list[data.Sample], num_classes: int) -> float:
    """Mean foreground-macro DSC of a network over labeled samples."""
    images = _stack_images(samples)
    preds = predict_labels(params, images)
    scores = []
    for i, s in enumerate(samples):
        scores.append(np.mean([metrics.dsc(preds[i], s.mask, c)
                               for c in range(1, num_classes)]))
    return float(np.mean(scores))


def evaluate_records(params: NetParams, samples: list[data.Sample], num_classes: int):
    """Full per-sample metric records plus their summary."""
    images = _stack_images(samples)
    preds = predict_labels(params, images)
    records = [metrics.compute_record(preds[i], s.mask, num_classes, sample_id=s.id)
               for i, s in enumerate(samples)]
    return records, metrics.summarize(records)


def _diagnostics(state: TriadState, val_x: np.ndarray, num_classes: int):
    """Disagreement and mean fused entropy on the fixed validation batch."""
    t_logits = gridnet.forward(state.teacher, val_x)
    s1_logits = gridnet.forward(state.student1, val_x)
    maps = [student_uncertainty(1, s1_logits, t_logits)]
    pred1 = losses.harden(gridnet.softmax_channels(s1_logits))
    if state.student2 is not None:
        s2_logits = gridnet.forward(state.student2, val_x)
        maps.append(student_uncertainty(2, s2_logits, t_logits))
        pred_other = losses.harden(gridnet.softmax_channels(s2_logits))
    else:
        pred_other = losses.harden(gridnet.softmax_channels(t_logits))
    d, _ = losses.dice_loss(losses.one_hot(pred1, num_classes),
                            losses.one_hot(pred_other, num_classes))
    return d, metrics.mean_entropy(maps)


def run_training(cfg: TrainConfig, task: data.Task):
    """Full loop: per-iteration history, per-epoch teacher validation DSC.

    Returns (final TriadState, history).  On divergence raises
    TrainingDiverged carrying the partial history.
    """
    flags = cfg.flags
    if flags.uses_unlabeled and not task.unlabeled:
        raise ConfigError(f"method {cfg.method!r} needs unlabeled data, got none")
    spec = LayerSpec(task.in_channels, tuple(cfg.hidden_channels), task.num_classes,
                     cfg.kernel_size)
    if cfg.mix == "umix":
        mixer.partition(task.height, task.width, cfg.r)  # fail fast on bad geometry
    state = init_triad(cfg, spec)

    pool = task.unlabeled if task.unlabeled else task.labeled
    per_epoch = len(task.unlabeled) // cfg.batch_unlabeled if task.unlabeled \
        else len(task.labeled) // cfg.batch_labeled
    if cfg.epochs > 0 and per_epoch < 1:
        raise ConfigError(f"batch size exceeds the available pool ({len(pool)} samples)")
    total_iters = cfg.epochs * per_epoch
    ramp = RampConfig(cfg.lam_max, max(total_iters - 1, 1))
    val_x = _stack_images(task.val[:cfg.val_batch])

    history: list[HistoryRecord] = []
    try:
        for epoch in range(cfg.epochs):
            for lab, unl in data.batches(task.labeled, task.unlabeled,
                                         cfg.batch_labeled, cfg.batch_unlabeled,
                                         cfg.seed_data, epoch):
                state, p1 = step_phase1(state, lab, unl, cfg, ramp, task.num_classes)
                if cfg.mix != "none":
                    mx_lab, mx_masks, mx_unl, mx_pseudo = _build_mixed(
                        state, p1, lab, unl, cfg, task.height, task.width)
                    state, _ = step_phase2(state, mx_lab, mx_masks, mx_unl,
                                           mx_pseudo, cfg, ramp, task.num_classes)
                else:
                    state = replace(state, t=state.t + 1)
                dis, ent = _diagnostics(state, val_x, task.num_classes)
                r = p1.report
                history.append(HistoryRecord(
                    t=r.t, lam=r.lam, l_total=r.l_total, l_s=r.l_s,
                    l_cps=r.l_cps, l_mts=r.l_mts,
                    disagreement=dis, mean_entropy=ent))
            if history:
                vd = evaluate_dsc(state.teacher, task.val, task.num_classes)
                history[-1] = replace(history[-1], val_dsc=vd)
    except DivergenceError as e:
        raise TrainingDiverged(str(e), state=state, history=history) from e
    return state, history


def write_history_csv(history: list[HistoryRecord], path) -> None:
    with open(path, "w") as f:
        f.write("t,lambda,l_total,l_s,l_cps,l_mts,disagreement,mean_entropy,val_dsc\n")
        for r in history:
            vd = "" if r.val_dsc is None else f"{r.val_dsc:.17g}"
            f.write(f"{r.t},{r.lam:.17g},{r.l_total:.17g},{r.l_s:.17g},"
                    f"{r.l_cps:.17g},{r.l_mts:.17g},{r.disagreement:.17g},"
                    f"{r.mean_entropy:.17g},{vd}\n")


def read_history_csv(path) -> list[HistoryRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "t,lambda,l_total,l_s,l_cps,l_mts,disagreement,mean_entropy,val_dsc":
        raise DataIOError(f"not a history CSV: {path}")
    out = []
    for line in lines[1:]:
        p = line.split(",")
        out.append(HistoryRecord(
            t=int(p[0]), lam=float(p[1]), l_total=float(p[2]), l_s=float(p[3]),
            l_cps=float(p[4]), l_mts=float(p[5]), disagreement=float(p[6]),
            mean_entropy=float(p[7]), val_dsc=float(p[8]) if p[8] else None))
    return out


def save_triad(state: TriadState, out_dir) -> None:
    """Checkpoint the triad: one binary file per network plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roles = {"teacher": state.teacher, "student1": state.student1}
    if state.student2 is not None:
        roles["student2"] = state.student2
    with open(out_dir / "manifest.tsv", "w") as f:
        f.write(f"# t={state.t}\n")
        for role in sorted(roles):
            gridnet.save_params(roles[role], out_dir / f"{role}.net")
            f.write(f"{role}\t{role}.net\n")


def load_triad(in_dir) -> dict[str, NetParams]:
    """Load checkpointed networks by role; optimizer state is not persisted."""
    in_dir = Path(in_dir)
    mpath = in_dir / "manifest.tsv"
    if not mpath.is_file():
        raise DataIOError(f"missing checkpoint manifest: {mpath}")
    roles = {}
    for line in mpath.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        role, fname = line.split("\t")
        roles[role] = gridnet.load_params(in_dir / fname)
    if "teacher" not in roles:
        raise DataIOError(f"checkpoint manifest lacks a teacher entry: {mpath}")
    return roles
