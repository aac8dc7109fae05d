"""Merge rules for folding read/write tokens back into a stream."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import FusionKind
from .errors import DimensionError
from .nn import Module
from .tensor import Parameter, Tensor


def add_erase_gate(incoming: Tensor, w_alpha: Tensor, b_alpha: Tensor | None = None) -> Tensor:
    """Per-token mixing weight ``sigmoid(W_alpha @ mean_tokens(incoming))``.

    Returns shape ``(..., n, 1)`` so it broadcasts over channels.
    """
    avg = T.mean(incoming, axis=-2)                       # (..., d)
    logits = T.matmul(T.reshape(avg, avg.shape[:-1] + (1, avg.shape[-1])), T.transpose(w_alpha))
    if b_alpha is not None:
        logits = T.add(logits, b_alpha)
    alpha = T.sigmoid(logits)                             # (..., 1, n)
    return T.transpose(alpha)


def fuse(kind: FusionKind, base: Tensor, incoming: Tensor, w_alpha: Tensor | None = None,
         b_alpha: Tensor | None = None) -> Tensor:
    kind = FusionKind(kind)
    if base.shape != incoming.shape:
        raise DimensionError(f"fuse: base {base.shape} and incoming {incoming.shape} differ")
    if kind is FusionKind.ERASE:
        return incoming
    if kind is FusionKind.ADD:
        return T.add(base, incoming)
    if w_alpha is None or w_alpha.shape != (base.shape[-2], base.shape[-1]):
        raise DimensionError(f"add-erase gate must be {(base.shape[-2], base.shape[-1])}")
    alpha = add_erase_gate(incoming, w_alpha, b_alpha)
    return T.add(T.mul(alpha, incoming), T.mul(T.sub(1.0, alpha), base))


class Fusion(Module):
    """One fusion site (process side or memory side) of a block."""

    def __init__(self, kind: FusionKind, num_tokens: int, d: int, rng, *, std: float = 0.02, dtype="f64"):
        self.kind = FusionKind(kind)
        self.w_alpha = None
        self.b_alpha = None
        if self.kind is FusionKind.ADD_ERASE:
            dtype = T.resolve_dtype(dtype)
            self.w_alpha = Parameter((rng.standard_normal((num_tokens, d)) * std).astype(dtype))
            self.b_alpha = Parameter(np.zeros(num_tokens, dtype=dtype))

    def forward(self, base: Tensor, incoming: Tensor) -> Tensor:
        return fuse(self.kind, base, incoming, self.w_alpha, self.b_alpha)
