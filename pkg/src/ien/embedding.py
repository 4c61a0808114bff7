"""Early embedding: one bias-free fully connected layer followed by ELU."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .numerics import DEFAULT_DTYPE, Parameter, elu, elu_grad, init_matrix, outer_sum


@dataclass
class EmbeddingParams:
    W_embed: Parameter  # d_e x d_v

    @property
    def d_e(self):
        return self.W_embed.shape[0]

    @property
    def d_v(self):
        return self.W_embed.shape[1]

    def parameters(self):
        return [self.W_embed]

    @classmethod
    def init(cls, d_v, d_e, scheme="xavier_uniform", rng=0, dtype=DEFAULT_DTYPE):
        return cls(Parameter(init_matrix(d_e, d_v, scheme, rng, dtype), "W_embed"))


@dataclass
class EmbeddingTrace:
    feat: np.ndarray
    pre: np.ndarray
    d_v: int


def embed_forward(params, feat):
    """Return ``(elu(W_embed @ feat), trace)``; ``feat`` may carry batch axes."""
    feat = np.asarray(feat)
    if feat.shape[-1:] != (params.d_v,):
        raise ShapeError(f"feature width must be {params.d_v}, got shape {feat.shape}")
    pre = feat @ params.W_embed.value.T
    return elu(pre), EmbeddingTrace(feat, pre, params.d_v)


def embed_backward(params, trace, grad_x):
    """Accumulate the weight gradient and return the gradient w.r.t. the features."""
    if trace.d_v != params.d_v or trace.pre.shape[-1] != params.d_e:
        raise UsageError("embedding trace does not match these parameters")
    d_pre = np.asarray(grad_x) * elu_grad(trace.pre)
    params.W_embed.grad += outer_sum(d_pre, trace.feat)
    return d_pre @ params.W_embed.value
