"""Synthetic labelled chunk streams and the IENF feature-file format.

A stream alternates background runs with action episodes. Each class owns a
fixed random prototype vector (background is class 0); chunk features are a
prototype plus Gaussian noise.

Evidence modes:

``persistent``
    every chunk of an episode shows its class prototype.
``early_only``
    only the first ``ceil(evidence_fraction * length)`` chunks of an episode
    show the class prototype; the rest show the background prototype but keep
    the class label. A memoryless classifier cannot label those chunks.
``separable``
    like ``persistent`` but with mutually orthogonal prototypes, so the
    current chunk alone separates the classes linearly.

IENF layout (little-endian)::

    offset  size          field
    0       4             magic b"IENF"
    4       4             u32 version (1)
    8       4             u32 stream_len
    12      4             u32 d_v
    16      4             u32 K
    20      (4+4*d_v)*n   per chunk: u32 label, then d_v float32 features
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from .numerics import make_rng

EVIDENCE_MODES = ("persistent", "early_only", "separable")


@dataclass
class StreamSpec:
    K: int = 3
    d_v: int = 16
    stream_len: int = 2000
    episode_len_range: tuple = (8, 16)
    background_rate: float = 0.5
    evidence_mode: str = "early_only"
    noise_sigma: float = 0.5
    seed: int = 0
    split: int = 0  # streams with equal seed share prototypes; split picks the draw
    evidence_fraction: float = 0.25
    prototype_scale: float = 1.0
    min_len: int = 8  # smallest allowed stream, normally the window length

    def validate(self):
        lo, hi = self.episode_len_range
        if self.K < 1 or self.d_v < 1:
            raise UsageError("K and d_v must be >= 1")
        if self.stream_len < self.min_len:
            raise UsageError(f"stream_len {self.stream_len} is shorter than the window {self.min_len}")
        if not (1 <= lo <= hi):
            raise UsageError(f"episode_len_range must satisfy 1 <= min <= max, got {self.episode_len_range}")
        if not 0.0 <= self.background_rate <= 1.0:
            raise UsageError(f"background_rate must be in [0, 1], got {self.background_rate}")
        if not 0.0 < self.evidence_fraction <= 1.0:
            raise UsageError(f"evidence_fraction must be in (0, 1], got {self.evidence_fraction}")
        if self.evidence_mode not in EVIDENCE_MODES:
            raise UsageError(f"evidence_mode must be one of {EVIDENCE_MODES}, got {self.evidence_mode!r}")
        if self.evidence_mode == "separable" and self.d_v < self.K + 1:
            raise UsageError("separable mode needs d_v >= K + 1")
        if self.noise_sigma < 0:
            raise UsageError("noise_sigma must be non-negative")


@dataclass
class LabeledStream:
    feats: np.ndarray  # (stream_len, d_v)
    labels: np.ndarray  # (stream_len,)
    K: int

    def __len__(self):
        return len(self.labels)

    @property
    def d_v(self):
        return self.feats.shape[1]


@dataclass
class LabeledSegments:
    feats: np.ndarray  # (n, T_plus_1, d_v)
    labels: np.ndarray  # (n, T_plus_1)

    def __len__(self):
        return len(self.labels)


def class_prototypes(spec, rng):
    if spec.evidence_mode == "separable":
        basis = np.zeros((spec.K + 1, spec.d_v))
        basis[np.arange(spec.K + 1), rng.permutation(spec.d_v)[:spec.K + 1]] = 1.0
        return spec.prototype_scale * basis
    protos = rng.standard_normal((spec.K + 1, spec.d_v))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return spec.prototype_scale * protos


def _label_plan(spec, rng):
    """Return (labels, evidence) arrays; evidence marks chunks showing their class prototype."""
    lo, hi = spec.episode_len_range
    labels, evidence = [], []
    rate = spec.background_rate
    while len(labels) < spec.stream_len:
        if rate >= 1.0:
            n_bg, n_ep = spec.stream_len, 0
        else:
            # Background runs are episode-length draws scaled so that their
            # share of chunks is background_rate on average.
            n_bg = int(round(rng.integers(lo, hi + 1) * rate / (1.0 - rate)))
            n_ep = int(rng.integers(lo, hi + 1))
        labels += [0] * n_bg
        evidence += [True] * n_bg
        if n_ep:
            k = int(rng.integers(1, spec.K + 1))
            n_ev = n_ep if spec.evidence_mode != "early_only" else math.ceil(spec.evidence_fraction * n_ep)
            labels += [k] * n_ep
            evidence += [True] * n_ev + [False] * (n_ep - n_ev)
    return np.array(labels[:spec.stream_len], dtype=np.int64), np.array(evidence[:spec.stream_len])


def generate_stream(spec):
    """Draw a labelled stream; the same spec (seed included) gives the same stream.

    Prototypes depend on ``seed`` only, so train and test splits drawn with one
    seed and different ``split`` values describe the same classes.
    """
    spec.validate()
    protos = class_prototypes(spec, make_rng(spec.seed))
    rng = make_rng((spec.seed, spec.split + 1))
    labels, evidence = _label_plan(spec, rng)
    shown = np.where(evidence, labels, 0)
    feats = protos[shown]
    if spec.noise_sigma > 0:
        feats = feats + spec.noise_sigma * rng.standard_normal(feats.shape)
    return LabeledStream(feats, labels, spec.K)


def segment_windows(stream, T_plus_1):
    """All stride-1 windows of length ``T_plus_1``."""
    n = len(stream) - T_plus_1 + 1
    if T_plus_1 < 1 or n < 1:
        raise UsageError(f"stream of length {len(stream)} is shorter than the window {T_plus_1}")
    idx = np.arange(n)[:, None] + np.arange(T_plus_1)[None, :]
    return LabeledSegments(stream.feats[idx], stream.labels[idx])


IENF_MAGIC = b"IENF"
IENF_VERSION = 1
_IENF_HEADER = struct.Struct("<4s4I")


def write_features(path, stream):
    n, d_v = stream.feats.shape
    record = np.dtype([("label", "<u4"), ("feat", "<f4", (d_v,))])
    rows = np.empty(n, dtype=record)
    rows["label"] = stream.labels
    rows["feat"] = stream.feats
    with open(path, "wb") as fh:
        fh.write(_IENF_HEADER.pack(IENF_MAGIC, IENF_VERSION, n, d_v, stream.K))
        fh.write(rows.tobytes())


def read_features(path):
    """Load an IENF file; features come back as float64 holding float32 values."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _IENF_HEADER.size:
        raise FormatError("header truncated", len(data))
    magic, version, n, d_v, K = _IENF_HEADER.unpack_from(data, 0)
    if magic != IENF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != IENF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if d_v < 1 or K < 1:
        raise FormatError(f"invalid d_v={d_v} or K={K}", 12)
    record_size = 4 + 4 * d_v
    expected = _IENF_HEADER.size + n * record_size
    if len(data) < expected:
        # Point at the first byte of the first incomplete record.
        complete = (len(data) - _IENF_HEADER.size) // record_size
        raise FormatError(f"truncated after {complete} of {n} chunks",
                          _IENF_HEADER.size + complete * record_size)
    if len(data) > expected:
        raise FormatError("trailing bytes after last chunk", expected)
    record = np.dtype([("label", "<u4"), ("feat", "<f4", (d_v,))])
    rows = np.frombuffer(data, dtype=record, count=n, offset=_IENF_HEADER.size)
    labels = rows["label"].astype(np.int64)
    bad = np.flatnonzero(labels > K)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} exceeds K={K}", _IENF_HEADER.size + bad[0] * record_size)
    return LabeledStream(rows["feat"].astype(np.float64), labels, K)


def check_stream_matches(stream, d_v, K):
    """Raise ConfigError if a stream's width or class count disagrees with a model."""
    if stream.d_v != d_v:
        raise ConfigError(f"feature width {stream.d_v} does not match model d_v={d_v}")
    if stream.K != K:
        raise ConfigError(f"file has K={stream.K} classes but the model expects K={K}")
