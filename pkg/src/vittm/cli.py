"""``vittm`` command line: cost tables, benchmarks, training and ablations.

Every command writes machine-readable output (canonical JSON or CSV) to
stdout or ``--out``.  Exit codes: 0 success, 1 contract/format error,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import tensor as T
from .analysis import CountMode, bench_latency, count_flops, count_params, enumerate_params
from .config import ABLATION_GRID, FusionKind, HeadKind, ViTTMConfig, build_preset, preset_names
from .data import ArrayDataset, SyntheticDataset, SyntheticTaskSpec, TaskMode, load_cifar10_arrays
from .errors import ConfigurationError, VittmError
from .model import build_model, load_model, save_checkpoint
from .trainer import TrainConfig, evaluate, train

EVAL_START = 10 ** 6  # synthetic evaluation indices start here, far from training ones


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------- output


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _dump_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _table(obj: dict, header: list[str], rows: list[list], fmt: str) -> str:
    return _dump_json(obj) if fmt == "json" else _dump_csv(header, rows)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _threads() -> int:
    raw = os.environ.get("VITTM_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"VITTM_THREADS must be an integer, got {raw!r}") from None


# ----------------------------------------------------------------- config


def _resolve_config(args, default_preset: str) -> ViTTMConfig:
    overrides = {}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError("config JSON must be an object of ViTTMConfig fields")
    try:
        if args.preset is None and args.config:
            return ViTTMConfig.from_dict(overrides)
        base = build_preset(args.preset or default_preset)
        return ViTTMConfig.from_dict({**base.to_dict(), **overrides})
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _dataset(args, size: int, start: int, cfg: ViTTMConfig):
    if args.task == "cifar10":
        if not args.data:
            raise UsageError("--task cifar10 needs --data PATH")
        images, labels = load_cifar10_arrays(args.data)
        return ArrayDataset(images[start:start + size], labels[start:start + size], 10)
    spec = SyntheticTaskSpec(image_size=cfg.image_size, num_classes=cfg.num_classes, seed=args.seed,
                             mode=TaskMode(args.task))
    return SyntheticDataset(spec, size, start=start)


# --------------------------------------------------------------- commands


def cmd_flops(args) -> str:
    cfg = _resolve_config(args, "vit-b16")
    rep = count_flops(cfg, CountMode(args.mode))
    if args.format == "json":
        return rep.to_json() + "\n"
    return rep.to_csv()


def cmd_params(args) -> str:
    cfg = _resolve_config(args, "vittm-b-m16-p32")
    closed = count_params(cfg)
    obj = {"closed_form": closed}
    if args.enumerate:
        obj["enumerated"] = enumerate_params(build_model(cfg, seed=args.seed, dtype="f32"))
    return _table(obj, list(obj), [list(obj.values())], args.format)


def cmd_bench(args) -> str:
    cfg = _resolve_config(args, "vittm-b-m16-p32")
    model = build_model(cfg, seed=args.seed, dtype="f32")
    rep = bench_latency(model, batch=args.batch, warmup=args.warmup, runs=args.runs, seed=args.seed)
    obj = rep.to_dict()
    return _table(obj, list(obj), [list(obj.values())], args.format)


def cmd_train(args) -> str:
    cfg = _resolve_config(args, "vittm-micro")
    model = build_model(cfg, seed=args.seed)
    train_set = _dataset(args, args.samples, 0, cfg)
    eval_set = _dataset(args, args.eval_samples, EVAL_START if args.task != "cifar10" else args.samples, cfg)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    history = train(model, train_set, tcfg, eval_set=eval_set if len(eval_set) else None)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    if args.format == "json":
        return "".join(_dump_json(h) for h in history)
    return _dump_csv(["epoch", "loss", "acc"], [[h["epoch"], repr(h["loss"]), repr(h["acc"])] for h in history])


def cmd_eval(args) -> str:
    model = load_model(args.checkpoint)
    start = EVAL_START if args.task != "cifar10" else 0
    acc = evaluate(model, _dataset(args, args.samples, start, model.cfg))
    obj = {"accuracy": acc, "samples": args.samples}
    return _table(obj, list(obj), [list(obj.values())], args.format)


def cmd_gradcheck(args) -> str:
    cfg = _resolve_config(args, "vittm-micro")
    combos = ([(h, f) for h in HeadKind for f in FusionKind] if args.all
              else [(cfg.head_kind, cfg.fusion_process)])
    spec = SyntheticTaskSpec(image_size=cfg.image_size, num_classes=cfg.num_classes, seed=args.seed)
    data = SyntheticDataset(spec, args.batch)
    rows = []
    for head, fusion in combos:
        c = cfg.replace(head_kind=head, fusion_process=fusion, fusion_memory=fusion) if args.all else cfg
        model = build_model(c, seed=args.seed, dtype="f64")
        err = T.grad_check(lambda: T.cross_entropy(model(data.images), data.labels), model.parameters())
        rows.append({"head": HeadKind(head).value, "fusion": FusionKind(fusion).value, "max_rel_error": err})
    obj = {"max_rel_error": max(r["max_rel_error"] for r in rows), "cells": rows}
    return _table(obj, ["head", "fusion", "max_rel_error"],
                  [[r["head"], r["fusion"], repr(r["max_rel_error"])] for r in rows], args.format)


def _rw_fusion_cell(args, cfg: ViTTMConfig, head: HeadKind, fusion: FusionKind) -> dict:
    c = cfg.replace(head_kind=head, fusion_process=fusion, fusion_memory=fusion)
    spec = SyntheticTaskSpec(image_size=c.image_size, num_classes=c.num_classes, seed=args.seed,
                             mode=TaskMode(args.task))
    train_set = SyntheticDataset(spec, args.samples)
    eval_set = SyntheticDataset(spec, args.eval_samples, start=EVAL_START)
    hist = train(build_model(c, seed=args.seed), train_set,
                 TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed),
                 eval_set=eval_set)
    return {"head": head.value, "fusion": fusion.value, "acc": hist[-1]["acc"],
            "gflops": count_flops(c).gflops}


def cmd_ablate(args) -> str:
    if args.grid == "rw-fusion":
        if args.task == "cifar10":
            raise UsageError("the rw-fusion grid runs on a synthetic task")
        cfg = _resolve_config(args, "vittm-micro")
        cells = [(h, f) for h in HeadKind for f in FusionKind]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            rows = list(pool.map(lambda hf: _rw_fusion_cell(args, cfg, *hf), cells))
        return _table({"grid": "rw-fusion", "cells": rows}, ["head", "fusion", "acc", "gflops"],
                      [[r["head"], r["fusion"], repr(r["acc"]), repr(r["gflops"])] for r in rows], args.format)
    if args.grid == "patch":
        rows = []
        for k, t in ABLATION_GRID:
            c = build_preset(f"vittm-b-{k}-{t}")
            rows.append({"K": k, "T": t, "gflops": count_flops(c).gflops, "params": count_params(c)})
        return _table({"grid": "patch", "cells": rows}, ["K", "T", "gflops", "params"],
                      [[r["K"], r["T"], repr(r["gflops"]), r["params"]] for r in rows], args.format)
    # memory-mlp
    base = _resolve_config(args, "vittm-b-49-196")
    rows = []
    for ratio in (None, 0.5, 1.0, 2.0):
        c = base.replace(memory_mlp_ratio=ratio)
        rows.append({"ratio": ratio, "gflops": count_flops(c).gflops, "params": count_params(c)})
    return _table({"grid": "memory-mlp", "cells": rows}, ["ratio", "gflops", "params"],
                  [["none" if r["ratio"] is None else r["ratio"], repr(r["gflops"]), r["params"]] for r in rows],
                  args.format)


# ----------------------------------------------------------------- parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--preset", default=d(None), help="named configuration (see `vittm presets`)")
    p.add_argument("--config", default=d(None), help="JSON file of ViTTMConfig fields (overrides the preset)")
    p.add_argument("--out", default=d(None), help="write output here instead of stdout")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--format", choices=("json", "csv"), default=d("json"))


def _task_flags(p: argparse.ArgumentParser, samples: int) -> None:
    p.add_argument("--task", choices=[m.value for m in TaskMode] + ["cifar10"], default="local_patch")
    p.add_argument("--data", help="CIFAR-10 binary batch file for --task cifar10")
    p.add_argument("--samples", type=int, default=samples)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vittm", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("flops", parents=[common], help="per-component FLOP/param table")
    p.add_argument("--mode", choices=[m.value for m in CountMode], default="linear_only")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("params", parents=[common], help="parameter count")
    p.add_argument("--enumerate", action="store_true", help="also build the model and count its tensors")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", parents=[common], help="median forward latency (f32)")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=30)
    p.set_defaults(func=cmd_bench)

    for name, func, samples in (("train", cmd_train, 2000), ("eval", cmd_eval, 1000)):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a synthetic task or CIFAR-10")
        _task_flags(p, samples)
        p.add_argument("--checkpoint", required=name == "eval",
                       help="checkpoint to write (train) or read (eval)")
        if name == "train":
            p.add_argument("--epochs", type=int, default=10)
            p.add_argument("--lr", type=float, default=3e-3)
            p.add_argument("--batch-size", type=int, default=32)
            p.add_argument("--eval-samples", type=int, default=1000)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", parents=[common], help="ablation tables")
    p.add_argument("--grid", choices=("rw-fusion", "patch", "memory-mlp"), required=True)
    _task_flags(p, 2000)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--eval-samples", type=int, default=1000)
    p.set_defaults(func=cmd_ablate, task="global_majority")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--all", action="store_true", help="every head x fusion combination")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("presets", parents=[common], help="list preset names")
    p.set_defaults(func=lambda a: "".join(n + "\n" for n in preset_names()))
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _emit(args.func(args), args.out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (VittmError, OSError) as exc:
        print(f"vittm: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
