"""Dense kernels shared by every layer: activations, softmax/cross-entropy,
Adam, initialisation and a central-difference gradient oracle.

Vectors and matrices are plain ``numpy`` arrays. Kernels accept any number of
leading batch axes so the same code serves single-vector calls and batched
training.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, UsageError

# Lower clamp applied to probabilities before taking the log.
PROB_FLOOR = 1e-12

DEFAULT_DTYPE = np.float64


def make_rng(seed):
    """Return a ``numpy`` PCG64 generator.

    ``seed`` may be an int (treated as an unsigned 64-bit seed), a tuple of
    such ints (hashed together by ``SeedSequence``), or an existing
    ``np.random.Generator``, which is passed through untouched.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.Generator(np.random.PCG64([int(s) & 0xFFFFFFFFFFFFFFFF for s in seed]))
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def affine(W, v):
    """Apply ``W`` to ``v`` (or to each row of a batch ``v``)."""
    W = np.asarray(W)
    v = np.asarray(v)
    if W.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got shape {W.shape}")
    if v.shape[-1:] != (W.shape[1],):
        raise ShapeError(f"expected input of length {W.shape[1]}, got shape {v.shape}")
    return v @ W.T


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def tanh(x):
    return np.tanh(x)


def elu(x):
    x = np.asarray(x)
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(pre):
    """Derivative of ELU (alpha = 1) evaluated at the pre-activation."""
    pre = np.asarray(pre)
    return np.where(pre >= 0, 1.0, np.exp(np.minimum(pre, 0))).astype(pre.dtype, copy=False)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "elu": elu}


def activation(kind, v):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(v)


def softmax(v):
    """Softmax over the last axis, with max-subtraction for overflow safety."""
    v = np.asarray(v)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(p, y):
    """``-sum(y * log p)`` over the last axis; ``p`` is clamped at PROB_FLOOR."""
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and targets {y.shape} differ in shape")
    return -np.sum(y * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def one_hot(labels, n_classes, dtype=DEFAULT_DTYPE):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def outer_sum(dout, inp):
    """Sum of outer products ``dout[n] ⊗ inp[n]`` over all leading axes.

    This is the weight gradient of ``inp @ W.T`` for upstream ``dout``.
    """
    dout = np.asarray(dout)
    inp = np.asarray(inp)
    return dout.reshape(-1, dout.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])


@dataclass
class Parameter:
    """A trainable matrix with its gradient and Adam moment buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        for attr in ("grad", "adam_m", "adam_v"):
            buf = getattr(self, attr)
            if buf is None:
                setattr(self, attr, np.zeros_like(self.value))
            elif np.shape(buf) != self.value.shape:
                raise ShapeError(f"{self.name}: {attr} shape {np.shape(buf)} != {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self):
        return Parameter(self.value.copy(), self.name, self.grad.copy(),
                         self.adam_m.copy(), self.adam_v.copy())


def adam_step(p, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update of ``p`` in place; zeroes ``p.grad``."""
    if t < 1:
        raise UsageError(f"Adam step count must be >= 1, got {t}")
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * g * g
    m_hat = p.adam_m / (1.0 - beta1 ** t)
    v_hat = p.adam_v / (1.0 - beta2 ** t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()
    return p


def init_matrix(rows, cols, scheme="xavier_uniform", rng=0, dtype=DEFAULT_DTYPE):
    if rows < 1 or cols < 1:
        raise UsageError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=dtype)
    if scheme == "xavier_uniform":
        bound = np.sqrt(6.0 / (rows + cols))
        return make_rng(rng).uniform(-bound, bound, size=(rows, cols)).astype(dtype)
    raise UsageError(f"unknown init scheme {scheme!r}")


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise UsageError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective is non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor=1e-8):
    """Normwise relative difference ``|a - b| / max(|a|, |b|)`` (2-norms)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
