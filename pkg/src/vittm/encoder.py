"""Transformer encoder block and the two-stream ViTTM block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ViTTMConfig
from .errors import ConfigurationError, DimensionError
from .fusion import Fusion
from .heads import make_head, read, write
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng, *, std: float, dtype):
        if d % heads:
            raise ConfigurationError(f"{heads} heads do not divide d={d}")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng, std=std, dtype=dtype)
        self.proj = Linear(d, d, rng, std=std, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = T.permute(T.reshape(self.qkv(x), (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        return self.proj(T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, n, d)))


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng, *, std: float, dtype):
        self.fc1 = Linear(d, hidden, rng, std=std, dtype=dtype)
        self.fc2 = Linear(hidden, d, rng, std=std, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``+ mlp(ln(.))``."""

    def __init__(self, d: int, heads: int, hidden: int, rng, *, std: float = 0.02, dtype="f64"):
        self.d = d
        self.norm1 = LayerNorm(d, dtype)
        self.attn = SelfAttention(d, heads, rng, std=std, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.mlp = MLP(d, hidden, rng, std=std, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise DimensionError(f"encoder block expects {self.d} features, got {x.shape}")
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        x = T.add(x, self.attn(self.norm1(x)))
        x = T.add(x, self.mlp(self.norm2(x)))
        return T.reshape(x, x.shape[1:]) if squeeze else x


def encoder_block(block: EncoderBlock, x: Tensor) -> Tensor:
    return block(x)


class MemoryMLP(Module):
    """Optional residual MLP on the memory stream: ``m + mlp(ln(m))``."""

    def __init__(self, d: int, hidden: int, rng, *, std: float = 0.02, dtype="f64"):
        self.norm = LayerNorm(d, dtype)
        self.mlp = MLP(d, hidden, rng, std=std, dtype=dtype)

    def forward(self, m: Tensor) -> Tensor:
        return T.add(m, self.mlp(self.norm(m)))


@dataclass
class BlockState:
    """Intermediates of one block: read tokens and write tokens."""

    layer: int
    read_tokens: Tensor
    write_tokens: Tensor


class ViTTMBlock(Module):
    """read -> fuse into P -> encode P -> write -> fuse into M (-> memory MLP)."""

    def __init__(self, cfg: ViTTMConfig, rng, dtype="f64", layer: int = 1):
        k, t, d = cfg.num_process_tokens, cfg.num_memory_tokens, cfg.d
        std = cfg.init_std
        self.layer = layer
        # LayerNorms on the head inputs; memory is normalised once and shared
        # by the read and the write head
        self.norm_memory = LayerNorm(d, dtype) if cfg.head_norm else None
        self.norm_read = LayerNorm(d, dtype) if cfg.head_norm else None
        self.norm_write = LayerNorm(d, dtype) if cfg.head_norm else None
        self.read = make_head(cfg, k, rng, dtype)
        self.fuse_process = Fusion(cfg.fusion_process, k, d, rng, std=std, dtype=dtype)
        self.encoder = EncoderBlock(d, cfg.heads, cfg.hidden_dim, rng, std=std, dtype=dtype)
        self.write = make_head(cfg, t, rng, dtype)
        self.fuse_memory = Fusion(cfg.fusion_memory, t, d, rng, std=std, dtype=dtype)
        self.memory_mlp = (MemoryMLP(d, cfg.memory_hidden_dim, rng, std=std, dtype=dtype)
                           if cfg.memory_mlp_ratio else None)

    def forward(self, p_prev: Tensor, memory: Tensor, trace: list | None = None,
                states: list | None = None) -> tuple[Tensor, Tensor]:
        m_in = self.norm_memory(memory) if self.norm_memory is not None else memory
        p_in = self.norm_read(p_prev) if self.norm_read is not None else p_prev
        r = read(self.read, p_in, m_in)
        if trace is not None:
            trace.append("read")
        fused = self.fuse_process(p_prev, r)
        if trace is not None:
            trace.append("fuse_process")
        p_new = self.encoder(fused)
        if trace is not None:
            trace.append("encoder")
        w = write(self.write, self.norm_write(p_new) if self.norm_write is not None else p_new, m_in)
        if trace is not None:
            trace.append("write")
        m_new = self.fuse_memory(memory, w)
        if trace is not None:
            trace.append("fuse_memory")
        if self.memory_mlp is not None:
            m_new = self.memory_mlp(m_new)
            if trace is not None:
                trace.append("memory_mlp")
        if states is not None:
            states.append(BlockState(self.layer, r, w))
        return p_new, m_new


def vittm_block(block: ViTTMBlock, p_prev: Tensor, memory: Tensor, trace: list | None = None):
    return block(p_prev, memory, trace=trace)
