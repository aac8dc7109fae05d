"""Architecture configuration and named presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigurationError


class HeadKind(str, Enum):
    LINEAR = "linear"
    CROSS = "cross"
    SUMMARY = "summary"


class FusionKind(str, Enum):
    ERASE = "erase"
    ADD = "add"
    ADD_ERASE = "add_erase"


class InitMode(str, Enum):
    LATENT = "latent"
    DOWNSAMPLE = "downsample"
    PATCH = "patch"


class ModelKind(str, Enum):
    VITTM = "vittm"
    VIT = "vit"


@dataclass(frozen=True)
class ViTTMConfig:
    """Full description of a ViTTM (or plain ViT baseline) network.

    For ``kind == "vit"`` only ``p_mem`` is used as the patch size and the
    head/fusion/init fields are ignored.
    """

    image_size: int = 224
    d: int = 768
    depth: int = 12
    heads: int = 12
    p_mem: int = 16
    p_proc: int = 32
    head_kind: HeadKind = HeadKind.LINEAR
    latent_dim: int | None = None  # c; None means d // 4
    fusion_process: FusionKind = FusionKind.ADD
    fusion_memory: FusionKind = FusionKind.ADD
    init_mode: InitMode = InitMode.PATCH
    memory_mlp_ratio: float | None = None
    num_classes: int = 1000
    normalized_linear_attention: bool = False
    head_norm: bool = True  # LayerNorm on read/write head inputs
    kind: ModelKind = ModelKind.VITTM
    cross_heads: int | None = None  # None means max(1, d // 64)
    mlp_ratio: float = 4.0
    init_std: float = 0.02
    channels: int = 3

    def __post_init__(self):
        for name, enum in (("head_kind", HeadKind), ("fusion_process", FusionKind),
                           ("fusion_memory", FusionKind), ("init_mode", InitMode),
                           ("kind", ModelKind)):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError:
                raise ConfigurationError(f"{name}: unknown value {getattr(self, name)!r}") from None
        self.validate()

    # derived sizes
    @property
    def c(self) -> int:
        return self.latent_dim if self.latent_dim is not None else max(1, self.d // 4)

    @property
    def n_cross_heads(self) -> int:
        return self.cross_heads if self.cross_heads is not None else max(1, self.d // 64)

    @property
    def num_memory_tokens(self) -> int:
        return (self.image_size // self.p_mem) ** 2

    @property
    def num_process_tokens(self) -> int:
        return (self.image_size // self.p_proc) ** 2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.d * self.mlp_ratio))

    @property
    def memory_hidden_dim(self) -> int:
        return int(round(self.d * self.memory_mlp_ratio)) if self.memory_mlp_ratio else 0

    def validate(self) -> None:
        if self.d < 1 or self.depth < 0 or self.heads < 1:
            raise ConfigurationError("d and heads must be positive, depth non-negative")
        if self.d % self.heads:
            raise ConfigurationError(f"heads={self.heads} does not divide d={self.d}")
        patches = [self.p_mem] if self.kind is ModelKind.VIT else [self.p_mem, self.p_proc]
        for p in patches:
            if p < 1 or self.image_size % p:
                raise ConfigurationError(f"image size {self.image_size} not divisible by patch {p}")
        if self.kind is ModelKind.VIT:
            return
        if self.p_proc < self.p_mem:
            raise ConfigurationError("p_proc must be >= p_mem so that K <= T")
        if not 1 <= self.c <= self.d:
            raise ConfigurationError(f"latent dim c={self.c} must lie in [1, d]")
        if self.head_kind is HeadKind.CROSS and self.d % self.n_cross_heads:
            raise ConfigurationError(f"cross heads {self.n_cross_heads} do not divide d={self.d}")
        if self.memory_mlp_ratio is not None and self.memory_mlp_ratio <= 0:
            raise ConfigurationError("memory_mlp_ratio must be positive")
        if self.init_mode is InitMode.DOWNSAMPLE and self.p_proc % self.p_mem:
            raise ConfigurationError("downsample init needs p_proc to be a multiple of p_mem")

    def replace(self, **changes) -> "ViTTMConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in dataclasses.asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ViTTMConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ViTTMConfig":
        return cls.from_dict(json.loads(text))


# token count at 224x224 -> patch size
_PATCH_FOR_TOKENS = {16: 56, 49: 32, 64: 28, 196: 16, 256: 14}

ABLATION_GRID = [(k, t) for k in (16, 49, 64) for t in (64, 196, 256)]

_BASE = dict(image_size=224, d=768, depth=12, heads=12)
_SMALL = dict(image_size=224, d=384, depth=12, heads=6)
_MICRO = dict(image_size=8, d=16, depth=2, heads=2, num_classes=10, init_std=0.1)


def _presets() -> dict[str, dict]:
    presets = {
        "vit-b16": dict(_BASE, kind="vit", p_mem=16),
        "vit-b32": dict(_BASE, kind="vit", p_mem=32),
        "vit-s16": dict(_SMALL, kind="vit", p_mem=16),
        "vittm-b-m16-p32": dict(_BASE, p_mem=16, p_proc=32),
        "vittm-s-m16-p32": dict(_SMALL, p_mem=16, p_proc=32),
        "vittm-micro": dict(_MICRO, p_mem=2, p_proc=4),
        "vit-micro-p2": dict(_MICRO, kind="vit", p_mem=2),
        "vit-micro-p4": dict(_MICRO, kind="vit", p_mem=4),
    }
    for k, t in ABLATION_GRID:
        presets[f"vittm-b-{k}-{t}"] = dict(_BASE, p_mem=_PATCH_FOR_TOKENS[t], p_proc=_PATCH_FOR_TOKENS[k])
    for k in (16, 49, 64):
        presets[f"vit-b-{k}"] = dict(_BASE, kind="vit", p_mem=_PATCH_FOR_TOKENS[k])
    return presets


PRESETS = _presets()


def preset_names() -> list[str]:
    return sorted(PRESETS)


def build_preset(name: str, **overrides) -> ViTTMConfig:
    """Return the named configuration, optionally with fields overridden.

    ``vittm-b-{K}-{T}`` presets realise the process/memory token grid at
    224x224 by picking patch sizes (56->16, 32->49, 28->64, 16->196, 14->256).
    """
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(preset_names())}")
    return ViTTMConfig(**{**PRESETS[name], **overrides})
