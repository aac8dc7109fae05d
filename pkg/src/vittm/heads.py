"""Read/write heads that move information between the two token streams.

Every head is called as ``head(x1, x2)``: ``x1`` supplies keys and values,
``x2`` supplies queries, and the output has one row per row of ``x2``.
Token summary ignores ``x2`` and pools ``x1`` into a fixed number of tokens.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import HeadKind, ViTTMConfig
from .errors import ConfigurationError, DimensionError
from .nn import Module, normal
from .tensor import Parameter, Tensor


def _check_dims(x1: Tensor, x2: Tensor, d: int, name: str) -> None:
    if x1.shape[-1] != d or x2.shape[-1] != d:
        raise DimensionError(f"{name}: inputs {x1.shape} and {x2.shape} must both have {d} columns")


def linear_attention(w_q: Tensor, w_k: Tensor, w_v: Tensor, x1: Tensor, x2: Tensor,
                     normalized: bool = False) -> Tensor:
    """``phi(x2 W_q) @ (phi(x1 W_k)^T @ (x1 W_v))`` with ``phi = 1 + elu``.

    Cost is linear in the number of rows of both inputs: the c x d summary
    ``phi(K)^T V`` is formed first.  With ``normalized`` each output row is
    divided by ``phi(q) . sum_t phi(k_t)``.
    """
    _check_dims(x1, x2, w_q.shape[0], "linear_attention")
    q = T.elu_plus_one(T.matmul(x2, w_q))
    k = T.elu_plus_one(T.matmul(x1, w_k))
    v = T.matmul(x1, w_v)
    kv = T.matmul(T.transpose(k), v)
    out = T.matmul(q, kv)
    if normalized:
        ksum = T.sum(k, axis=-2, keepdims=True)
        denom = T.matmul(q, T.transpose(ksum))
        out = T.div(out, denom)
    return out


def cross_attention(x1: Tensor, x2: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                    heads: int) -> Tensor:
    """Multi-head softmax attention, queries from ``x2``, keys/values from ``x1``."""
    d = w_q.shape[0]
    _check_dims(x1, x2, d, "cross_attention")
    if heads < 1 or d % heads:
        raise ConfigurationError(f"cross_attention: {heads} heads do not divide d={d}")
    squeeze = x2.ndim == 2
    if squeeze:
        x1, x2 = T.reshape(x1, (1,) + x1.shape), T.reshape(x2, (1,) + x2.shape)
    b, n1, _ = x1.shape
    n2 = x2.shape[1]
    dh = d // heads

    def split(x, n):
        return T.permute(T.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(T.matmul(x2, w_q), n2)
    k = split(T.matmul(x1, w_k), n1)
    v = split(T.matmul(x1, w_v), n1)
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, n2, d))
    out = T.matmul(merged, w_o)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def token_summary(x: Tensor, w_s: Tensor) -> Tensor:
    """Pool ``n`` tokens into ``s`` tokens with softmax weights over ``n``.

    ``logits = x @ w_s`` is (n, s); each column is normalised over the n
    input tokens and the summaries are ``weights^T @ x``.
    """
    if x.shape[-1] != w_s.shape[0]:
        raise DimensionError(f"token_summary: tokens {x.shape} vs w_s {w_s.shape}")
    weights = T.softmax(T.matmul(x, w_s), axis=-2)
    return T.matmul(T.transpose(weights), x)


class LinearAttentionHead(Module):
    def __init__(self, d: int, c: int, rng, *, std: float = 0.02, dtype="f64", normalized: bool = False):
        if c < 1:
            raise ConfigurationError("latent dim c must be >= 1")
        dtype = T.resolve_dtype(dtype)
        self.w_q = Parameter(normal(rng, (d, c), std, dtype))
        self.w_k = Parameter(normal(rng, (d, c), std, dtype))
        self.w_v = Parameter(normal(rng, (d, d), std, dtype))
        self.c = c
        self.normalized = normalized

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        return linear_attention(self.w_q, self.w_k, self.w_v, x1, x2, self.normalized)


class CrossAttentionHead(Module):
    def __init__(self, d: int, heads: int, rng, *, std: float = 0.02, dtype="f64"):
        if d % heads:
            raise ConfigurationError(f"cross attention: {heads} heads do not divide d={d}")
        dtype = T.resolve_dtype(dtype)
        self.w_q = Parameter(normal(rng, (d, d), std, dtype))
        self.w_k = Parameter(normal(rng, (d, d), std, dtype))
        self.w_v = Parameter(normal(rng, (d, d), std, dtype))
        self.w_o = Parameter(normal(rng, (d, d), std, dtype))
        self.heads = heads

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        return cross_attention(x1, x2, self.w_q, self.w_k, self.w_v, self.w_o, self.heads)


class TokenSummaryHead(Module):
    def __init__(self, d: int, out_tokens: int, rng, *, std: float = 0.02, dtype="f64"):
        if out_tokens < 1:
            raise ConfigurationError("token summary needs at least one output token")
        self.w_s = Parameter(normal(rng, (d, out_tokens), std, T.resolve_dtype(dtype)))

    def forward(self, x1: Tensor, x2: Tensor | None = None) -> Tensor:
        return token_summary(x1, self.w_s)


def make_head(cfg: ViTTMConfig, out_tokens: int, rng, dtype) -> Module:
    """Head for one direction; ``out_tokens`` only matters for token summary."""
    if cfg.head_kind is HeadKind.LINEAR:
        return LinearAttentionHead(cfg.d, cfg.c, rng, std=cfg.init_std, dtype=dtype,
                                   normalized=cfg.normalized_linear_attention)
    if cfg.head_kind is HeadKind.CROSS:
        return CrossAttentionHead(cfg.d, cfg.n_cross_heads, rng, std=cfg.init_std, dtype=dtype)
    return TokenSummaryHead(cfg.d, out_tokens, rng, std=cfg.init_std, dtype=dtype)


def read(head: Module, p_prev: Tensor, memory: Tensor) -> Tensor:
    """Read tokens for the process stream: queries from P, keys/values from M."""
    return head(memory, p_prev)


def write(head: Module, process: Tensor, memory: Tensor) -> Tensor:
    """Write tokens for the memory stream: queries from M, keys/values from P."""
    return head(process, memory)
