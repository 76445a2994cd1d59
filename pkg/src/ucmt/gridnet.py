"""Minimal float64 conv-net substrate with explicit forward/backward.

A stack of same-padding odd-kernel convolutions with leaky-ReLU between
layers (none after the last), hand-written backprop, AdamW with decoupled
weight decay, elementwise parameter mixing, and a binary checkpoint format.
Everything is float64 and bit-deterministic for fixed inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _conv
from .errors import ConfigError, DataIOError, DivergenceError, PreconditionError, ShapeError

LEAK = 0.01
DEFAULT_HIDDEN = (6, 12, 6)

CHECKPOINT_MAGIC = b"UCMTNET1"


@dataclass(frozen=True)
class LayerSpec:
    """Architecture of a conv stack: channel chain and kernel size."""

    in_channels: int
    hidden_channels: tuple[int, ...]
    num_classes: int
    kernel_size: int = 3

    def __post_init__(self):
        chain = self.channels
        if any(c < 1 for c in chain):
            raise ConfigError(f"all channel counts must be >= 1, got {chain}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 output classes")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {self.kernel_size}")

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.in_channels, *self.hidden_channels, self.num_classes)

    @property
    def num_layers(self) -> int:
        return len(self.channels) - 1


@dataclass
class NetParams:
    """Weights/biases of one network; layer i maps channels[i] -> channels[i+1]."""

    spec: LayerSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_seed: int = -1

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "NetParams":
        return NetParams(self.spec, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.init_seed)


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class AdamWState:
    """First/second moment tensors per parameter tensor plus the step counter."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0


def init_params(spec: LayerSpec, seed: int) -> NetParams:
    """He-style fan-in uniform init from a counter-based (Philox) stream; zero biases.

    Two different seeds give parameter sets differing in at least one value;
    the same (spec, seed) pair is bitwise reproducible.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    chain = spec.channels
    k = spec.kernel_size
    weights, biases = [], []
    for cin, cout in zip(chain[:-1], chain[1:]):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        biases.append(np.zeros(cout))
    return NetParams(spec, weights, biases, init_seed=seed)


def _check_batch(params: NetParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ShapeError(f"batch must be (B, Cin, H, W), got shape {batch.shape}")
    if batch.shape[1] != params.spec.in_channels:
        raise ShapeError(f"batch has {batch.shape[1]} channels, "
                         f"spec expects {params.spec.in_channels}")
    return batch


def forward_with_cache(params: NetParams, batch: np.ndarray):
    """Forward pass returning (logits, cache) for a later backward_from_cache."""
    x = _check_batch(params, batch)
    padded_inputs, preacts = [], []
    h = np.ascontiguousarray(x)
    n = params.spec.num_layers
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        out, xp = _conv.conv_forward(h, w, b)
        padded_inputs.append(xp)
        preacts.append(out)
        h = out if li == n - 1 else np.maximum(out, LEAK * out)
    if not np.isfinite(h).all():
        raise DivergenceError("forward produced non-finite logits")
    return h, (padded_inputs, preacts)


def forward(params: NetParams, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch; pure, spatial size preserved by same padding."""
    logits, _ = forward_with_cache(params, batch)
    return logits


def backward_from_cache(params: NetParams, cache, grad_logits: np.ndarray) -> ParamGrads:
    padded_inputs, preacts = cache
    g = np.ascontiguousarray(np.asarray(grad_logits, dtype=np.float64))
    if g.shape != preacts[-1].shape:
        raise ShapeError(f"grad_logits shape {g.shape} != logits shape {preacts[-1].shape}")
    n = params.spec.num_layers
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for li in range(n - 1, -1, -1):
        dw, db, dx = _conv.conv_backward(padded_inputs[li], params.weights[li], g)
        dws[li] = dw
        dbs[li] = db
        if li > 0:
            g = np.ascontiguousarray(dx * np.where(preacts[li - 1] > 0, 1.0, LEAK))
    return ParamGrads(dws, dbs)


def backward(params: NetParams, batch: np.ndarray, grad_logits: np.ndarray) -> ParamGrads:
    """d(loss)/d(param) for every tensor, recomputing forward intermediates."""
    _, cache = forward_with_cache(params, batch)
    return backward_from_cache(params, cache, grad_logits)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain grad through softmax: p * (g - sum_c g*p) per pixel."""
    if probs.shape != grad_probs.shape:
        raise ShapeError(f"probs shape {probs.shape} != grad shape {grad_probs.shape}")
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def init_adamw_state(params: NetParams) -> AdamWState:
    return AdamWState(
        m_w=[np.zeros_like(w) for w in params.weights],
        v_w=[np.zeros_like(w) for w in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
        step=0,
    )


def adamw_update(params: NetParams, grads: ParamGrads, state: AdamWState, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0) -> tuple[NetParams, AdamWState]:
    """One decoupled-weight-decay Adam step with bias correction."""
    if lr <= 0:
        raise PreconditionError(f"lr must be > 0, got {lr}")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise PreconditionError(f"betas must be in [0, 1), got {beta1}, {beta2}")
    for li, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not np.isfinite(gw).all():
            raise DivergenceError(f"non-finite gradient in layer {li} weights")
        if not np.isfinite(gb).all():
            raise DivergenceError(f"non-finite gradient in layer {li} biases")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    def step(p, g, m, v):
        m_new = beta1 * m + (1 - beta1) * g
        v_new = beta2 * v + (1 - beta2) * g * g
        mhat = m_new / bc1
        vhat = v_new / bc2
        p_new = p - lr * (mhat / (np.sqrt(vhat) + eps)) - lr * weight_decay * p
        return p_new, m_new, v_new

    new_w, new_b = [], []
    new_state = AdamWState([], [], [], [], step=t)
    for li in range(len(params.weights)):
        pw, mw, vw = step(params.weights[li], grads.weights[li], state.m_w[li], state.v_w[li])
        pb, mb, vb = step(params.biases[li], grads.biases[li], state.m_b[li], state.v_b[li])
        new_w.append(pw)
        new_b.append(pb)
        new_state.m_w.append(mw)
        new_state.v_w.append(vw)
        new_state.m_b.append(mb)
        new_state.v_b.append(vb)
    return NetParams(params.spec, new_w, new_b, params.init_seed), new_state


def combine_params(p1: NetParams, p2: NetParams, beta: float) -> NetParams:
    """Elementwise beta*p1 + (1-beta)*p2; layer specs must match."""
    if p1.spec != p2.spec:
        raise ShapeError(f"layer specs differ: {p1.spec} vs {p2.spec}")
    ws = [beta * w1 + (1 - beta) * w2 for w1, w2 in zip(p1.weights, p2.weights)]
    bs = [beta * b1 + (1 - beta) * b2 for b1, b2 in zip(p1.biases, p2.biases)]
    return NetParams(p1.spec, ws, bs, p1.init_seed)


def save_params(params: NetParams, path) -> None:
    """Binary checkpoint: magic, length-prefixed spec integers, '<f8' tensors."""
    spec = params.spec
    chain = spec.channels
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(chain)))
        for c in chain:
            f.write(struct.pack("<I", c))
        f.write(struct.pack("<I", spec.kernel_size))
        for w, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path) -> NetParams:
    """Read a checkpoint written by save_params; rejects bad magic or truncation."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataIOError(f"bad checkpoint magic in {path}")
    off = 8
    try:
        (n_chain,) = struct.unpack_from("<I", data, off)
        off += 4
        chain = struct.unpack_from(f"<{n_chain}I", data, off)
        off += 4 * n_chain
        (k,) = struct.unpack_from("<I", data, off)
        off += 4
    except struct.error as e:
        raise DataIOError(f"truncated checkpoint header in {path}") from e
    spec = LayerSpec(chain[0], tuple(chain[1:-1]), chain[-1], kernel_size=k)
    weights, biases = [], []
    for cin, cout in zip(chain[:-1], chain[1:]):
        wn = cout * cin * k * k
        need = (wn + cout) * 8
        if off + need > len(data):
            raise DataIOError(f"truncated checkpoint tensors in {path}")
        w = np.frombuffer(data, dtype="<f8", count=wn, offset=off).reshape(cout, cin, k, k)
        off += wn * 8
        b = np.frombuffer(data, dtype="<f8", count=cout, offset=off)
        off += cout * 8
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise DataIOError(f"trailing bytes in checkpoint {path}")
    return NetParams(spec, weights, biases)
