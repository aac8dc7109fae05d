"""Cross-entropy training with AdamW for toy-scale experiments."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Parameter


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class TrainingDiverged(ContractError):
    """Loss became non-finite; the message carries per-parameter diagnostics."""


class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ``np.argmax`` breaks ties toward the lowest class index."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(model, dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = []
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            logits = model(dataset.images[i:i + batch_size]).data
            preds.append(np.argmax(logits, axis=-1))
    return float(np.mean(np.concatenate(preds) == dataset.labels))


def _diagnostics(model, limit: int = 8) -> str:
    """The ``limit`` parameters with the largest (or non-finite) gradient norms."""
    rows = []
    for name, p in model.named_parameters():
        w, g = float(np.linalg.norm(p.data)), float(np.linalg.norm(p.grad))
        rows.append((math.inf if not math.isfinite(g) else g, name, w, g))
    rows.sort(key=lambda r: -r[0])
    lines = [f"  {name}: |w|={w:.3e} |g|={g:.3e}" for _, name, w, g in rows[:limit]]
    if len(rows) > limit:
        lines.append(f"  ... {len(rows) - limit} more")
    return "\n".join(lines)


def train(model, dataset, cfg: TrainConfig, eval_set=None, log=None) -> list[dict]:
    """Run ``cfg.epochs`` epochs; returns ``[{epoch, loss, acc}, ...]``.

    ``acc`` is measured on ``eval_set`` (or the training set when absent)
    after each epoch.  ``log`` receives each history record as it is made.
    """
    if dataset.num_classes != model.cfg.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, model {model.cfg.num_classes}")
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    eval_set = eval_set if eval_set is not None else dataset
    n = len(dataset)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                T.backward(loss)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}\n"
                                       + _diagnostics(model))
            T.backward(loss)
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            total += value * len(idx)
        record = {"epoch": epoch, "loss": total / n, "acc": evaluate(model, eval_set)}
        history.append(record)
        if log is not None:
            log(record)
    return history


def history_to_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)
