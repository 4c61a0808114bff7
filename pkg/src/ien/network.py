"""The full network: embedding, unrolled recurrent cell, and a per-step
softmax classifier shared across timesteps.

Feature arrays have shape ``(..., T_plus_1, d_v)``; any leading axes are
treated as a batch of independent segments. Background is class 0 and the
action classes are ``1..K``, so every probability row has ``K + 1`` entries.
"""

import copy
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cells import (GATE_ORDER, MERGE_MODES, CellParams, CellVariant, cell_backward, unroll, weight_name,
                    weight_shapes)
from .embedding import EmbeddingParams, embed_backward, embed_forward
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .numerics import (DEFAULT_DTYPE, Parameter, adam_step, cross_entropy, init_matrix, make_rng,
                       one_hot, outer_sum, softmax)


@dataclass
class IenConfig:
    T_plus_1: int = 8
    d_v: int = 2048
    d_e: int = 512
    d_h: int = 512
    K: int = 20
    cell_variant: str = "ieu"
    merge_mode: str = "concat"

    def __post_init__(self):
        for name in ("T_plus_1", "d_v", "d_e", "d_h", "K"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        try:
            self.cell_variant = CellVariant(self.cell_variant).value
        except ValueError:
            raise ConfigError(f"unknown cell variant {self.cell_variant!r}")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.merge_mode == "addition" and self.d_h != self.d_e:
            raise ConfigError("addition merge mode requires d_h == d_e")

    @property
    def n_classes(self):
        return self.K + 1


@dataclass
class IenModel:
    config: IenConfig
    embed: EmbeddingParams
    cell: CellParams
    W_cls: Parameter  # (K+1) x d_h

    def __post_init__(self):
        cfg = self.config
        if self.embed.W_embed.shape != (cfg.d_e, cfg.d_v):
            raise ShapeError(f"W_embed shape {self.embed.W_embed.shape} != {(cfg.d_e, cfg.d_v)}")
        if (self.cell.variant.value, self.cell.d_h, self.cell.d_e, self.cell.merge_mode) != (
                cfg.cell_variant, cfg.d_h, cfg.d_e, cfg.merge_mode):
            raise ShapeError("cell parameters do not match the model configuration")
        if self.W_cls.shape != (cfg.n_classes, cfg.d_h):
            raise ShapeError(f"W_cls shape {self.W_cls.shape} != {(cfg.n_classes, cfg.d_h)}")

    @classmethod
    def init(cls, config, rng=0, scheme="xavier_uniform", dtype=DEFAULT_DTYPE):
        rng = make_rng(rng)
        embed = EmbeddingParams.init(config.d_v, config.d_e, scheme, rng, dtype)
        cell = CellParams.init(config.cell_variant, config.d_h, config.d_e, config.merge_mode,
                               scheme, rng, dtype)
        W_cls = Parameter(init_matrix(config.n_classes, config.d_h, scheme, rng, dtype), "W_cls")
        return cls(config, embed, cell, W_cls)

    def parameters(self):
        """All parameters in checkpoint order: embedding, cell gates, classifier."""
        return self.embed.parameters() + self.cell.parameters() + [self.W_cls]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class IenTrace:
    embed: object
    cells: list
    hidden: np.ndarray  # (..., T_plus_1, d_h)
    probs: np.ndarray


def _check_feats(model, feats):
    feats = np.asarray(feats)
    cfg = model.config
    if feats.ndim < 2 or feats.shape[-2:] != (cfg.T_plus_1, cfg.d_v):
        raise ShapeError(f"expected features of shape (..., {cfg.T_plus_1}, {cfg.d_v}), got {feats.shape}")
    return feats


def ien_forward(model, feats):
    """Per-chunk class probabilities for a segment (or batch of segments)."""
    feats = _check_feats(model, feats)
    xs, etrace = embed_forward(model.embed, feats)
    states, ctraces = unroll(model.cell, xs)
    hidden = np.stack([s.h for s in states], axis=-2)
    probs = softmax(hidden @ model.W_cls.value.T)
    return probs, IenTrace(etrace, ctraces, hidden, probs)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise UsageError(f"labels must lie in [0, {n_classes - 1}]")
    return labels.astype(np.int64, copy=False)


def ien_loss(probs, labels):
    """Cross-entropy summed over the chunks of each segment, averaged over segments."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[-1])
    if labels.shape != probs.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    per_segment = cross_entropy(probs, one_hot(labels, probs.shape[-1], probs.dtype)).sum(axis=-1)
    return float(np.mean(per_segment))


def ien_backward(model, trace, labels):
    """Accumulate gradients of ``ien_loss`` into every parameter.

    Returns the gradient with respect to the input features.
    """
    probs = trace.probs
    labels = _check_labels(labels, model.config.n_classes)
    if labels.shape != probs.shape[:-1]:
        raise UsageError(f"labels shape {labels.shape} does not match the traced forward {probs.shape}")
    if len(trace.cells) != model.config.T_plus_1:
        raise UsageError("trace length does not match T_plus_1")
    n_segments = int(np.prod(probs.shape[:-2], dtype=np.int64))
    d_logits = (probs - one_hot(labels, probs.shape[-1], probs.dtype)) / n_segments
    model.W_cls.grad += outer_sum(d_logits, trace.hidden)
    d_hidden = d_logits @ model.W_cls.value

    d_xs = np.zeros_like(trace.embed.pre)
    d_x0 = np.zeros_like(d_xs[..., -1, :])
    d_h = np.zeros_like(d_hidden[..., 0, :])
    d_C = np.zeros_like(d_h)
    for t in range(model.config.T_plus_1 - 1, -1, -1):
        d_h, d_C, d_xt, d_x0_t = cell_backward(model.cell, trace.cells[t], d_hidden[..., t, :] + d_h, d_C)
        d_xs[..., t, :] += d_xt
        d_x0 += d_x0_t
    # x_0 is the last embedding, fanned out to every step.
    d_xs[..., -1, :] += d_x0
    return embed_backward(model.embed, trace.embed, d_xs)


def predict_current(model, feats):
    """Probabilities for the last chunk of each segment."""
    probs, _ = ien_forward(model, feats)
    return probs[..., -1, :]


class StreamInferer:
    """Sliding-window online inference over one chunk stream.

    Holds the most recent ``T_plus_1`` raw features; the window starts out
    filled with zero features so every pushed chunk yields one prediction.
    """

    def __init__(self, model):
        self.model = model
        cfg = model.config
        dtype = model.W_cls.value.dtype
        self.window = deque((np.zeros(cfg.d_v, dtype=dtype) for _ in range(cfg.T_plus_1)),
                            maxlen=cfg.T_plus_1)

    def push(self, feat):
        feat = np.asarray(feat, dtype=self.model.W_cls.value.dtype)
        if feat.shape != (self.model.config.d_v,):
            raise ShapeError(f"chunk feature must have length {self.model.config.d_v}, got shape {feat.shape}")
        self.window.append(feat)
        return predict_current(self.model, np.stack(self.window))


def stream_infer(model, chunks):
    """Return an ``(n_chunks, K+1)`` array with one prediction per chunk."""
    inferer = StreamInferer(model)
    out = [inferer.push(c) for c in chunks]
    if not out:
        return np.zeros((0, model.config.n_classes))
    return np.stack(out)


def padded_windows(feats, T_plus_1):
    """Offline counterpart of the streaming window: one zero-padded window per chunk."""
    feats = np.asarray(feats)
    pad = np.zeros((T_plus_1 - 1, feats.shape[-1]), dtype=feats.dtype)
    full = np.concatenate([pad, feats], axis=0)
    return np.stack([full[n:n + T_plus_1] for n in range(len(feats))])


@dataclass
class TrainResult:
    model: IenModel
    losses: list = field(default_factory=list)  # mean segment loss per epoch


def train(model, feats, labels, epochs=10, batch_size=32, lr=1e-3, rng=0,
          beta1=0.9, beta2=0.999, eps=1e-8, callback=None):
    """Minibatch Adam on ``(feats, labels)`` segment arrays, updating ``model`` in place.

    Shuffling draws from ``rng`` only, so a fixed seed fixes the whole run.
    ``callback(epoch, loss)`` is called after each epoch if given.
    """
    feats = np.asarray(feats, dtype=model.W_cls.value.dtype)
    labels = np.asarray(labels)
    if len(feats) == 0:
        raise UsageError("cannot train on an empty dataset")
    if len(feats) != len(labels):
        raise UsageError(f"{len(feats)} feature segments but {len(labels)} label segments")
    if batch_size < 1 or epochs < 0:
        raise UsageError("batch_size must be >= 1 and epochs >= 0")
    rng = make_rng(rng)
    params = model.parameters()
    model.zero_grad()
    result = TrainResult(model)
    step = 0
    n = len(feats)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            probs, trace = ien_forward(model, feats[idx])
            total += ien_loss(probs, labels[idx]) * len(idx)
            ien_backward(model, trace, labels[idx])
            step += 1
            for p in params:
                adam_step(p, lr, beta1, beta2, eps, step)
        result.losses.append(total / n)
        if callback is not None:
            callback(epoch, result.losses[-1])
    return result


# Checkpoint layout (all integers little-endian u32):
#   "IENM" | version | T_plus_1 | d_v | d_e | d_h | K | variant code | merge code
#   then per matrix, in IenModel.parameters() order:
#   rows | cols | rows*cols float64 little-endian, row-major
CHECKPOINT_MAGIC = b"IENM"
CHECKPOINT_VERSION = 1
VARIANT_CODES = [v.value for v in CellVariant]
_HEADER = struct.Struct("<4s8I")
_DIMS = struct.Struct("<2I")


def save_checkpoint(model, path):
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.T_plus_1, cfg.d_v, cfg.d_e,
                              cfg.d_h, cfg.K, VARIANT_CODES.index(cfg.cell_variant),
                              MERGE_MODES.index(cfg.merge_mode)))
        for p in model.parameters():
            fh.write(_DIMS.pack(*p.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint header truncated", len(data))
    magic, version, T1, d_v, d_e, d_h, K, vcode, mcode = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if vcode >= len(VARIANT_CODES):
        raise FormatError(f"unknown cell variant code {vcode}", 28)
    if mcode >= len(MERGE_MODES):
        raise FormatError(f"unknown merge mode code {mcode}", 32)
    config = IenConfig(T1, d_v, d_e, d_h, K, VARIANT_CODES[vcode], MERGE_MODES[mcode])

    offset = _HEADER.size
    cell_shapes = weight_shapes(config.cell_variant, d_h, d_e, config.merge_mode)
    names = ["W_embed"] + [weight_name(g) for g in GATE_ORDER if g in cell_shapes] + ["W_cls"]
    expected = [(d_e, d_v)] + [cell_shapes[g] for g in GATE_ORDER if g in cell_shapes] + [(K + 1, d_h)]
    values = []
    for name, shape in zip(names, expected):
        if len(data) < offset + _DIMS.size:
            raise FormatError(f"truncated before {name} dimensions", offset)
        dims = _DIMS.unpack_from(data, offset)
        if dims != shape:
            raise FormatError(f"{name} has dimensions {dims}, expected {shape}", offset)
        offset += _DIMS.size
        nbytes = 8 * shape[0] * shape[1]
        if len(data) < offset + nbytes:
            raise FormatError(f"truncated inside {name}", len(data))
        values.append(np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1],
                                    offset=offset).reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after last matrix", offset)

    embed = EmbeddingParams(Parameter(values[0], "W_embed"))
    gates = [g for g in GATE_ORDER if g in cell_shapes]
    cell = CellParams(config.cell_variant, d_h, d_e, config.merge_mode,
                      {g: Parameter(v, weight_name(g)) for g, v in zip(gates, values[1:-1])})
    return IenModel(config, embed, cell, Parameter(values[-1], "W_cls"))
