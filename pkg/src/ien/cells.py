"""Recurrent cells: the information elevation unit and three LSTM baselines.

Every variant is described by a small wiring table: which gates exist, which
sources (``h`` = previous hidden state, ``x`` = embedding at step t,
``x0`` = embedding of the current chunk) each gate reads, and whether the
elevation term ``r_t * e_t`` enters the cell update. One forward and one
backward routine then serve all four variants.

Gate inputs are merged by concatenation by default. ``merge_mode="addition"``
sums the sources instead and needs ``d_h == d_e``.

All functions accept vectors or batches (leading axes) of vectors.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .numerics import DEFAULT_DTYPE, Parameter, init_matrix, make_rng, outer_sum, sigmoid


class CellVariant(str, Enum):
    IEU = "ieu"
    LSTM_PLAIN = "lstm_plain"
    LSTM_BUNDLE = "lstm_bundle"
    LSTM_SOPHISTICATED = "lstm_sophisticated"


MERGE_MODES = ("concat", "addition")

# Fixed gate order; also the on-disk order of cell weights in checkpoints.
GATE_ORDER = ("f", "e", "r", "c", "i", "o")
SIGMOID_GATES = frozenset({"f", "e", "i", "o"})

_H_X = ("h", "x")
_X_X0 = ("x", "x0")
_ALL = ("h", "x", "x0")

WIRING = {
    CellVariant.IEU: {"f": _H_X, "e": ("h", "x0"), "r": _H_X, "c": _H_X, "i": _X_X0, "o": _X_X0},
    CellVariant.LSTM_PLAIN: {"f": _H_X, "c": _H_X, "i": _H_X, "o": _H_X},
    CellVariant.LSTM_BUNDLE: {"f": _ALL, "c": _ALL, "i": _ALL, "o": _ALL},
    CellVariant.LSTM_SOPHISTICATED: {"f": _H_X, "c": _H_X, "i": _X_X0, "o": _X_X0},
}


def weight_name(gate):
    return f"W_{gate}"


def weight_shapes(variant, d_h, d_e, merge_mode="concat"):
    """Map gate -> (rows, cols) of its weight matrix, stored output x input."""
    width = {"h": d_h, "x": d_e, "x0": d_e}
    shapes = {}
    for gate, srcs in WIRING[CellVariant(variant)].items():
        cols = d_h if merge_mode == "addition" else sum(width[s] for s in srcs)
        shapes[gate] = (d_h, cols)
    return shapes


@dataclass
class CellState:
    h: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, d_h, batch_shape=(), dtype=DEFAULT_DTYPE):
        shape = tuple(batch_shape) + (d_h,)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass
class CellTrace:
    """Forward intermediates for one step; enough for an exact backward."""

    variant: CellVariant
    sources: dict  # "h" -> h_{t-1}, "x" -> x_t, "x0" -> x_0
    inputs: dict  # gate -> merged gate input
    gates: dict  # gate -> activation
    C_prev: np.ndarray
    tanh_C: np.ndarray


@dataclass
class CellParams:
    variant: CellVariant
    d_h: int
    d_e: int
    merge_mode: str = "concat"
    weights: dict = field(default_factory=dict)  # gate -> Parameter

    def __post_init__(self):
        self.variant = CellVariant(self.variant)
        if self.merge_mode not in MERGE_MODES:
            raise UsageError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.merge_mode == "addition" and self.d_h != self.d_e:
            raise UsageError(f"addition merge needs d_h == d_e, got {self.d_h} and {self.d_e}")
        for gate, shape in self.expected_shapes().items():
            if gate not in self.weights:
                raise ShapeError(f"{self.variant.value} cell is missing {weight_name(gate)}")
            if self.weights[gate].shape != shape:
                raise ShapeError(f"{weight_name(gate)} has shape {self.weights[gate].shape}, expected {shape}")
        extra = set(self.weights) - set(self.wiring)
        if extra:
            raise ShapeError(f"{self.variant.value} cell has no gates {sorted(extra)}")

    @property
    def wiring(self):
        return WIRING[self.variant]

    @property
    def gates(self):
        return [g for g in GATE_ORDER if g in self.wiring]

    def source_width(self, source):
        return self.d_h if source == "h" else self.d_e

    def expected_shapes(self):
        return weight_shapes(self.variant, self.d_h, self.d_e, self.merge_mode)

    def parameters(self):
        return [self.weights[g] for g in self.gates]

    @classmethod
    def init(cls, variant, d_h, d_e, merge_mode="concat", scheme="xavier_uniform", rng=0,
             dtype=DEFAULT_DTYPE):
        variant = CellVariant(variant)
        rng = make_rng(rng)
        shapes = weight_shapes(variant, d_h, d_e, merge_mode)
        weights = {}
        for gate in [g for g in GATE_ORDER if g in shapes]:
            rows, cols = shapes[gate]
            weights[gate] = Parameter(init_matrix(rows, cols, scheme, rng, dtype), weight_name(gate))
        return cls(variant, d_h, d_e, merge_mode, weights)


def _merge(params, srcs, sources):
    if params.merge_mode == "addition":
        out = sources[srcs[0]]
        for s in srcs[1:]:
            out = out + sources[s]
        return out
    return np.concatenate([sources[s] for s in srcs], axis=-1)


def _check_input(name, v, width):
    if v.shape[-1:] != (width,):
        raise ShapeError(f"{name} must have trailing length {width}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")


def cell_forward(params, prev, x_t, x_0):
    """Advance one step. Returns ``(next_state, trace)``."""
    x_t = np.asarray(x_t)
    x_0 = np.asarray(x_0)
    _check_input("x_t", x_t, params.d_e)
    _check_input("x_0", x_0, params.d_e)
    _check_input("prev.h", prev.h, params.d_h)
    _check_input("prev.C", prev.C, params.d_h)

    sources = {"h": prev.h, "x": x_t, "x0": x_0}
    inputs, gates = {}, {}
    for gate in params.gates:
        inp = _merge(params, params.wiring[gate], sources)
        pre = inp @ params.weights[gate].value.T
        inputs[gate] = inp
        gates[gate] = sigmoid(pre) if gate in SIGMOID_GATES else np.tanh(pre)

    C = prev.C * gates["f"]
    if "e" in gates:
        C = C + gates["r"] * gates["e"]
    C = C + gates["c"] * gates["i"]
    tanh_C = np.tanh(C)
    h = gates["o"] * tanh_C
    trace = CellTrace(params.variant, sources, inputs, gates, prev.C, tanh_C)
    return CellState(h, C), trace


def cell_backward(params, trace, grad_h, grad_C):
    """Backpropagate one step.

    ``grad_h`` and ``grad_C`` are the gradients of the objective with respect
    to this step's outputs. Weight gradients are added to ``Parameter.grad``.
    Returns ``(grad_prev_h, grad_prev_C, grad_x_t, grad_x_0)``.
    """
    if trace.variant != params.variant:
        raise UsageError(f"trace from a {trace.variant.value} cell passed to a {params.variant.value} cell")
    g = trace.gates
    grad_h = np.asarray(grad_h)
    dC = grad_C + grad_h * g["o"] * (1.0 - trace.tanh_C ** 2)

    d_act = {
        "o": grad_h * trace.tanh_C,
        "f": dC * trace.C_prev,
        "c": dC * g["i"],
        "i": dC * g["c"],
    }
    if "e" in g:
        d_act["r"] = dC * g["e"]
        d_act["e"] = dC * g["r"]

    d_src = {s: np.zeros_like(v) for s, v in trace.sources.items()}
    for gate in params.gates:
        a = g[gate]
        d_pre = d_act[gate] * (a * (1.0 - a) if gate in SIGMOID_GATES else 1.0 - a * a)
        W = params.weights[gate]
        W.grad += outer_sum(d_pre, trace.inputs[gate])
        d_inp = d_pre @ W.value
        srcs = params.wiring[gate]
        if params.merge_mode == "addition":
            for s in srcs:
                d_src[s] += d_inp
        else:
            start = 0
            for s in srcs:
                width = params.source_width(s)
                d_src[s] += d_inp[..., start:start + width]
                start += width

    grad_prev_C = dC * g["f"]
    return d_src["h"], grad_prev_C, d_src["x"], d_src["x0"]


def unroll(params, xs):
    """Run the cell over ``xs`` (time on axis -2) from a zero state.

    ``x_0`` is fixed to the last element of ``xs``. Returns ``(states, traces)``
    with one entry per timestep.
    """
    xs = np.asarray(xs)
    if xs.ndim < 2 or xs.shape[-2] == 0:
        raise UsageError("unroll needs a non-empty sequence of embeddings")
    x_0 = xs[..., -1, :]
    state = CellState.zeros(params.d_h, xs.shape[:-2], xs.dtype)
    states, traces = [], []
    for t in range(xs.shape[-2]):
        state, trace = cell_forward(params, state, xs[..., t, :], x_0)
        states.append(state)
        traces.append(trace)
    return states, traces
