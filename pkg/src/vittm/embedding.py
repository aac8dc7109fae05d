"""Image -> (memory, process) token streams."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import InitMode, ViTTMConfig
from .errors import ConfigurationError, DimensionError
from .nn import Module, normal
from .tensor import Parameter, Tensor

CHANNEL_MEAN = 0.5
CHANNEL_STD = 0.5


def normalize(img: np.ndarray) -> np.ndarray:
    """Standardise pixels already scaled to [0, 1]."""
    return (np.asarray(img, dtype=np.float64) - CHANNEL_MEAN) / CHANNEL_STD


def _as_batch(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W) image, got shape {arr.shape}")
    return arr


def patchify(img, p: int) -> np.ndarray:
    """Split images into non-overlapping p x p patches.

    Returns ``(B, (H/p)(W/p), C*p*p)``; patches in raster order, each
    flattened channel-major then row-major.  A single (C,H,W) image gives B=1.
    """
    x = _as_batch(img)
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def unpatchify(patches: np.ndarray, p: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b = patches.shape[0]
    gh, gw = height // p, width // p
    x = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, channels, height, width)
    return x[0] if squeeze else x


def embed_stream(patches, proj: Tensor, pos: Tensor) -> Tensor:
    """Linear projection of flattened patches plus a positional table."""
    patches = T.as_tensor(patches, like=proj)
    if patches.shape[-1] != proj.shape[0] or patches.shape[-2] != pos.shape[0] or proj.shape[1] != pos.shape[1]:
        raise DimensionError(
            f"embed_stream: patches {patches.shape}, proj {proj.shape}, pos {pos.shape} do not conform")
    return T.add(T.matmul(patches, proj), pos)


class PatchEmbed(Module):
    def __init__(self, patch: int, num_tokens: int, d: int, rng, *, std: float, dtype, channels: int = 3):
        dtype = T.resolve_dtype(dtype)
        self.patch = patch
        self.proj = Parameter(normal(rng, (channels * patch * patch, d), std, dtype))
        self.pos = Parameter(normal(rng, (num_tokens, d), std, dtype))

    def forward(self, img) -> Tensor:
        return embed_stream(patchify(img, self.patch).astype(self.proj.dtype), self.proj, self.pos)


def downsample_tokens(memory: Tensor, num_out: int) -> Tensor:
    """Average-pool a square token grid (B, T, d) down to (B, num_out, d)."""
    b, t, d = memory.shape
    g, go = math.isqrt(t), math.isqrt(num_out)
    if g * g != t or go * go != num_out or go == 0 or g % go:
        raise ConfigurationError(f"cannot pool a {t}-token grid to {num_out} tokens")
    r = g // go
    grid = T.reshape(memory, (b, go, r, go, r, d))
    return T.reshape(T.mean(grid, axis=(2, 4)), (b, num_out, d))


class ProcessInit(Module):
    """Builds process tokens in one of three ways.

    ``latent``: a learned K x d table, independent of the image.
    ``downsample``: average pooling of the memory token grid.
    ``patch``: a separate patch embedding at the process patch size.
    """

    def __init__(self, cfg: ViTTMConfig, rng, dtype):
        self.mode = cfg.init_mode
        self.num_tokens = cfg.num_process_tokens
        self.latent = None
        self.embed = None
        if self.mode is InitMode.LATENT:
            self.latent = Parameter(normal(rng, (self.num_tokens, cfg.d), cfg.init_std, T.resolve_dtype(dtype)))
        elif self.mode is InitMode.PATCH:
            self.embed = PatchEmbed(cfg.p_proc, self.num_tokens, cfg.d, rng,
                                    std=cfg.init_std, dtype=dtype, channels=cfg.channels)

    def forward(self, img, memory: Tensor) -> Tensor:
        if self.mode is InitMode.LATENT:
            b = memory.shape[0]
            return T.broadcast_to(self.latent, (b,) + self.latent.shape)
        if self.mode is InitMode.DOWNSAMPLE:
            return downsample_tokens(memory, self.num_tokens)
        return self.embed(img)


def init_process(init: ProcessInit, img, memory: Tensor) -> Tensor:
    return init(img, memory)
