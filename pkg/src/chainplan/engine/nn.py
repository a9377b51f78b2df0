"""Neural-net building blocks on top of the tensor core.

Everything here is a thin parameter container plus a forward function;
no module magic, parameters are collected explicitly via ``parameters()``.
"""

from __future__ import annotations

import math

import numpy as np

from .core import (
    EngineError,
    Parameter,
    Tensor,
    add,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 3:  # conv kernel (C_out, C_in, K)
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    else:
        fan_in = fan_out = int(np.prod(shape))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, name: str, rng: np.random.Generator,
                 bias: bool = True):
        self.w = Parameter(xavier_uniform((n_in, n_out), rng), f"{name}.w")
        self.b = Parameter(np.zeros(n_out), f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])


class MLP3:
    """Two stacked linears with ReLU between: the [in -> hidden -> out] shape."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, name: str,
                 rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, f"{name}.fc1", rng)
        self.fc2 = Linear(n_hidden, n_out, f"{name}.fc2", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


class LayerNorm:
    """Affine layer norm over the last axis."""

    def __init__(self, dim: int, name: str, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, axis=-1, eps=self.eps), self.gain), self.bias)

    def parameters(self):
        return [self.gain, self.bias]


class AttentionParams:
    """Per-head query/key/value projections plus the output projection."""

    def __init__(self, d_model: int, name: str, rng: np.random.Generator):
        self.wq = Linear(d_model, d_model, f"{name}.q", rng)
        self.wk = Linear(d_model, d_model, f"{name}.k", rng)
        self.wv = Linear(d_model, d_model, f"{name}.v", rng)
        self.wo = Linear(d_model, d_model, f"{name}.o", rng)

    def parameters(self):
        return (self.wq.parameters() + self.wk.parameters()
                + self.wv.parameters() + self.wo.parameters())


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor,
                         n_heads: int, params: AttentionParams) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    ``queries`` is (..., L_q, d); ``keys``/``values`` are (..., L_kv, d) and
    may be unbatched (plain 2-D) against batched queries.
    """
    d = queries.shape[-1]
    if d % n_heads != 0:
        raise EngineError(f"d_model {d} not divisible by n_heads {n_heads}")
    q = _split_heads(params.wq(queries), n_heads)
    k = _split_heads(params.wk(keys), n_heads)
    v = _split_heads(params.wv(values), n_heads)
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))),
                   1.0 / math.sqrt(d // n_heads))
    attn = softmax(scores, axis=-1)
    return params.wo(_merge_heads(matmul(attn, v)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., L, d) -> (..., H, L, d/H)."""
    *lead, length, d = x.shape
    y = reshape(x, (*lead, length, n_heads, d // n_heads))
    order = list(range(y.ndim))
    order[-3], order[-2] = order[-2], order[-3]
    return transpose(y, tuple(order))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, d/H) -> (..., L, d)."""
    order = list(range(x.ndim))
    order[-3], order[-2] = order[-2], order[-3]
    y = transpose(x, tuple(order))
    *lead, length, heads, d_head = y.shape
    return reshape(y, (*lead, length, heads * d_head))


def _swap_last(ndim: int) -> tuple:
    order = list(range(ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return tuple(order)
