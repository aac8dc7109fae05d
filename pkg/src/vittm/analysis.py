"""Closed-form FLOP/parameter counts and a wall-clock latency harness.

FLOPs follow the multiply-accumulate convention: an (m x k) @ (k x n)
product costs m*k*n.  Elementwise work (activations, norms, softmax, the
additions inside fusion) is not counted.

``linear_only`` mode leaves out the two n^2 products inside softmax
attention (scores and the weighted sum of values).  Tools that trace only
linear layers miss exactly these when attention runs as a fused kernel,
which is why ViT-B/16 is usually quoted at 16.9 GFLOPs rather than 17.6.
``full`` counts everything.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .config import FusionKind, HeadKind, InitMode, ModelKind, ViTTMConfig
from .errors import ContractError


class CountMode(str, Enum):
    LINEAR_ONLY = "linear_only"
    FULL = "full"


@dataclass
class CostRow:
    name: str
    flops: int
    params: int


@dataclass
class CostReport:
    mode: CountMode
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def add(self, name: str, flops: int = 0, params: int = 0) -> None:
        self.rows.append(CostRow(name, int(flops), int(params)))

    def by_component(self) -> dict[str, CostRow]:
        """Rows summed over blocks, keyed by component (``read``, ``encoder``...)."""
        out: dict[str, CostRow] = {}
        for r in self.rows:
            key = r.name.split(".")[-1] if r.name.startswith("block.") else r.name
            row = out.setdefault(key, CostRow(key, 0, 0))
            row.flops += r.flops
            row.params += r.params
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "rows": [{"component": r.name, "flops": r.flops, "params": r.params} for r in self.rows],
            "total_flops": self.total_flops,
            "total_params": self.total_params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["component", "flops", "params"])
        for r in self.rows:
            w.writerow([r.name, r.flops, r.params])
        w.writerow(["total", self.total_flops, self.total_params])
        return buf.getvalue()


# ------------------------------------------------------------- per-part costs


def linear_flops(n: int, d_in: int, d_out: int) -> int:
    return n * d_in * d_out


def head_flops(kind: HeadKind, n_query: int, n_source: int, d: int, c: int, *,
               cross_heads: int = 1, normalized: bool = False,
               mode: CountMode = CountMode.LINEAR_ONLY) -> int:
    """FLOPs of one read or write head.

    ``n_query`` rows receive output, ``n_source`` rows supply keys/values
    (for token summary: ``n_source`` tokens pooled into ``n_query``).
    """
    kind = HeadKind(kind)
    if kind is HeadKind.LINEAR:
        f = (n_query * d * c            # Q = X2 W_q
             + n_source * d * c         # K = X1 W_k
             + n_source * d * d         # V = X1 W_v
             + c * n_source * d         # phi(K)^T V
             + n_query * c * d)         # phi(Q) (phi(K)^T V)
        if normalized:
            f += n_query * c
        return f
    if kind is HeadKind.CROSS:
        f = n_query * d * d + 2 * n_source * d * d + n_query * d * d
        if CountMode(mode) is CountMode.FULL:
            f += 2 * n_query * n_source * d
        return f
    return n_source * d * n_query + n_query * n_source * d


def encoder_flops(n: int, d: int, hidden: int, mode: CountMode) -> int:
    f = n * d * 3 * d + n * d * d + 2 * n * d * hidden
    if CountMode(mode) is CountMode.FULL:
        f += 2 * n * n * d
    return f


def encoder_params(d: int, hidden: int) -> int:
    return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def head_params(kind: HeadKind, d: int, c: int, out_tokens: int) -> int:
    kind = HeadKind(kind)
    if kind is HeadKind.LINEAR:
        return 2 * d * c + d * d
    if kind is HeadKind.CROSS:
        return 4 * d * d
    return d * out_tokens


def fusion_params(kind: FusionKind, n: int, d: int) -> int:
    return n * d + n if FusionKind(kind) is FusionKind.ADD_ERASE else 0


def fusion_flops(kind: FusionKind, n: int, d: int) -> int:
    return n * d if FusionKind(kind) is FusionKind.ADD_ERASE else 0


# --------------------------------------------------------------- whole model


def count_flops(cfg: ViTTMConfig, mode: CountMode | str = CountMode.LINEAR_ONLY) -> CostReport:
    """Per-component FLOPs and parameters for one image."""
    mode = CountMode(mode)
    rep = CostReport(mode)
    d, ch = cfg.d, cfg.channels
    hid = cfg.hidden_dim

    if cfg.kind is ModelKind.VIT:
        n = cfg.num_memory_tokens
        rep.add("embed", n * ch * cfg.p_mem ** 2 * d, ch * cfg.p_mem ** 2 * d + n * d)
        for i in range(cfg.depth):
            rep.add(f"block.{i}.encoder", encoder_flops(n, d, hid, mode), encoder_params(d, hid))
        rep.add("norm", 0, 2 * d)
        rep.add("head", d * cfg.num_classes, d * cfg.num_classes + cfg.num_classes)
        return rep

    k, t, c = cfg.num_process_tokens, cfg.num_memory_tokens, cfg.c
    rep.add("memory_embed", t * ch * cfg.p_mem ** 2 * d, ch * cfg.p_mem ** 2 * d + t * d)
    if cfg.init_mode is InitMode.PATCH:
        rep.add("process_embed", k * ch * cfg.p_proc ** 2 * d, ch * cfg.p_proc ** 2 * d + k * d)
    elif cfg.init_mode is InitMode.LATENT:
        rep.add("process_embed", 0, k * d)
    else:
        rep.add("process_embed", 0, 0)

    hkw = dict(cross_heads=cfg.n_cross_heads, normalized=cfg.normalized_linear_attention, mode=mode)
    for i in range(cfg.depth):
        b = f"block.{i}"
        ln = 2 * d if cfg.head_norm else 0
        rep.add(f"{b}.read", head_flops(cfg.head_kind, k, t, d, c, **hkw),
                head_params(cfg.head_kind, d, c, k) + 2 * ln)
        rep.add(f"{b}.fuse_process", fusion_flops(cfg.fusion_process, k, d),
                fusion_params(cfg.fusion_process, k, d))
        rep.add(f"{b}.encoder", encoder_flops(k, d, hid, mode), encoder_params(d, hid))
        rep.add(f"{b}.write", head_flops(cfg.head_kind, t, k, d, c, **hkw),
                head_params(cfg.head_kind, d, c, t) + ln)
        rep.add(f"{b}.fuse_memory", fusion_flops(cfg.fusion_memory, t, d),
                fusion_params(cfg.fusion_memory, t, d))
        if cfg.memory_mlp_ratio:
            hm = cfg.memory_hidden_dim
            rep.add(f"{b}.memory_mlp", 2 * t * d * hm, 2 * d + d * hm + hm + hm * d + d)
    rep.add("norm", 0, 2 * d)
    rep.add("head", d * cfg.num_classes, d * cfg.num_classes + cfg.num_classes)
    return rep


def count_params(cfg: ViTTMConfig) -> int:
    """Closed-form parameter count for a configuration."""
    return count_flops(cfg).total_params


def enumerate_params(model) -> int:
    """Parameter count by walking the model's Parameter objects."""
    return int(sum(p.size for p in model.parameters()))


# ------------------------------------------------------------------ latency


@dataclass
class LatencyReport:
    batch: int
    warmup: int
    runs: int
    median_ms: float
    iqr_ms: float
    samples_ms: list[float] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"batch": self.batch, "warmup": self.warmup, "runs": self.runs,
                "median_ms": self.median_ms, "iqr_ms": self.iqr_ms}


def bench_latency(model, batch: int = 1, warmup: int = 5, runs: int = 30, seed: int = 0) -> LatencyReport:
    """Median/IQR wall-clock time of forward passes on random f32 images."""
    if runs < 30:
        raise ContractError(f"runs must be >= 30, got {runs}")
    if warmup < 5:
        raise ContractError(f"warmup must be >= 5, got {warmup}")
    if model.dtype != T.DTYPES["f32"]:
        raise ContractError("latency is measured in f32; build the model with dtype='f32'")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)
    samples = []
    with T.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            model(x)
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return LatencyReport(batch, warmup, runs, float(med), float(q3 - q1), samples)
