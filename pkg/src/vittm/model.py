"""Full networks (ViTTM and the single-stream ViT baseline) and checkpoints."""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from . import tensor as T
from .config import ModelKind, ViTTMConfig, build_preset
from .embedding import PatchEmbed, ProcessInit, _as_batch
from .encoder import EncoderBlock, ViTTMBlock
from .errors import CompatibilityError, ConfigurationError, FormatError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

CKPT_MAGIC = b"VTTMCKPT"
CKPT_VERSION = 1


class _Network(Module):
    cfg: ViTTMConfig

    def _check_image(self, img) -> np.ndarray:
        x = _as_batch(img)
        c, h, w = x.shape[1:]
        s = self.cfg.image_size
        if (c, h, w) != (self.cfg.channels, s, s):
            raise ConfigurationError(f"model expects ({self.cfg.channels}, {s}, {s}) images, got {(c, h, w)}")
        return x.astype(self.dtype, copy=False)

    def _classify(self, tokens: Tensor) -> Tensor:
        pooled = T.mean(self.norm(tokens), axis=-2)
        return self.head(pooled)

    def predict(self, img) -> np.ndarray:
        with T.no_grad():
            return self(img).data


class ViTTM(_Network):
    """Two-stream network; the classifier reads only the memory stream."""

    def __init__(self, cfg: ViTTMConfig, seed: int = 0, dtype="f64"):
        if cfg.kind is not ModelKind.VITTM:
            raise ConfigurationError("ViTTM needs a config with kind='vittm'")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = T.resolve_dtype(dtype)
        self.memory_embed = PatchEmbed(cfg.p_mem, cfg.num_memory_tokens, cfg.d, rng,
                                       std=cfg.init_std, dtype=dtype, channels=cfg.channels)
        self.process_init = ProcessInit(cfg, rng, dtype)
        self.blocks = [ViTTMBlock(cfg, rng, dtype, layer=i + 1) for i in range(cfg.depth)]
        self.norm = LayerNorm(cfg.d, dtype)
        self.head = Linear(cfg.d, cfg.num_classes, rng, std=cfg.init_std, dtype=dtype)
        self.name_parameters()

    def streams(self, img, trace: list | None = None, states: list | None = None) -> tuple[Tensor, Tensor]:
        """Final (process, memory) tokens, each (B, n, d)."""
        x = self._check_image(img)
        memory = self.memory_embed(x)
        process = self.process_init(x, memory)
        for block in self.blocks:
            process, memory = block(process, memory, trace=trace, states=states)
        return process, memory

    def forward(self, img, trace: list | None = None) -> Tensor:
        single = np.ndim(img.data if isinstance(img, Tensor) else img) == 3
        _, memory = self.streams(img, trace=trace)
        logits = self._classify(memory)
        return T.reshape(logits, logits.shape[1:]) if single else logits


class ViTBaseline(_Network):
    """Plain ViT: one stream of ``(H/p_mem)^2`` tokens through the encoder."""

    def __init__(self, cfg: ViTTMConfig, seed: int = 0, dtype="f64"):
        if cfg.kind is not ModelKind.VIT:
            raise ConfigurationError("ViTBaseline needs a config with kind='vit'")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = T.resolve_dtype(dtype)
        self.embed = PatchEmbed(cfg.p_mem, cfg.num_memory_tokens, cfg.d, rng,
                                std=cfg.init_std, dtype=dtype, channels=cfg.channels)
        self.blocks = [EncoderBlock(cfg.d, cfg.heads, cfg.hidden_dim, rng, std=cfg.init_std, dtype=dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.d, dtype)
        self.head = Linear(cfg.d, cfg.num_classes, rng, std=cfg.init_std, dtype=dtype)
        self.name_parameters()

    def forward(self, img, trace: list | None = None) -> Tensor:
        single = np.ndim(img.data if isinstance(img, Tensor) else img) == 3
        x = self.embed(self._check_image(img))
        for block in self.blocks:
            x = block(x)
            if trace is not None:
                trace.append("encoder")
        logits = self._classify(x)
        return T.reshape(logits, logits.shape[1:]) if single else logits


def build_model(cfg: ViTTMConfig | str, seed: int = 0, dtype="f64") -> _Network:
    if isinstance(cfg, str):
        cfg = build_preset(cfg)
    cls = ViTTM if cfg.kind is ModelKind.VITTM else ViTBaseline
    return cls(cfg, seed=seed, dtype=dtype)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: _Network, path: str | os.PathLike) -> None:
    """Write config JSON and every named parameter tensor to ``path``."""
    buf = io.BytesIO()
    cfg_raw = model.cfg.to_json().encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(cfg_raw)))
    buf.write(cfg_raw)
    named = list(model.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        T.write_tensor(p, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str | os.PathLike) -> tuple[ViTTMConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    fh = io.BytesIO(data)
    if T._read_exact(fh, 8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<IQ", T._read_exact(fh, 12))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ViTTMConfig.from_json(T._read_exact(fh, cfg_len).decode())
    except (ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad config header: {exc}") from None
    (count,) = struct.unpack("<I", T._read_exact(fh, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", T._read_exact(fh, 4))
        name = T._read_exact(fh, n).decode()
        tensors[name] = T.read_tensor(fh).data
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return cfg, tensors


def load_checkpoint(model: _Network, path: str | os.PathLike) -> None:
    """Copy checkpoint tensors into ``model``; nothing is modified on error."""
    _, tensors = read_checkpoint(path)
    named = list(model.named_parameters())
    for name, p in named:
        if name not in tensors:
            raise CompatibilityError(f"checkpoint has no tensor {name!r}")
        got = tensors[name]
        if got.shape != p.shape or got.dtype != p.dtype:
            raise CompatibilityError(
                f"tensor {name!r}: checkpoint {got.shape}/{got.dtype} vs model {p.shape}/{p.dtype}")
    extra = set(tensors) - {name for name, _ in named}
    if extra:
        raise CompatibilityError(f"checkpoint tensor {sorted(extra)[0]!r} is not in the model")
    for name, p in named:
        p.data = tensors[name].copy()


def load_model(path: str | os.PathLike, seed: int = 0) -> _Network:
    cfg, tensors = read_checkpoint(path)
    dtype = next(iter(tensors.values())).dtype if tensors else "f64"
    model = build_model(cfg, seed=seed, dtype=dtype)
    load_checkpoint(model, path)
    return model
