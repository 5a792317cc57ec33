"""Command-line front end.

    afd pretrain       natural training, writes pretrained.afdc + pretrain.jsonl
    afd finetune       adversarial fine-tuning of run.pretrained (--sweep for the grid)
    afd evaluate       clean / robust accuracy and feature gap of run.checkpoint
    afd dump-features  AFDF feature file for run.checkpoint
    afd sweep          same as ``finetune --sweep``

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from afd import checkpoint
from afd.config import RunConfig, load_config
from afd.data import Dataset, SyntheticSpec, load_cifar10_binary, make_synthetic
from afd.diagnostics import dump_features, evaluate
from afd.errors import AFDError, ConfigError, DataError, FormatError, UsageError
from afd.model import ModelBundle, merged_model
from afd.training import TrainRunRecord, finetune, pretrain_natural

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_data(cfg: RunConfig, need_test: bool = True) -> tuple[Dataset, Dataset | None]:
    source = cfg.get("data.source")
    if source == "synthetic":
        spec = SyntheticSpec(
            num_classes=cfg.get("data.num_classes"),
            samples_per_class=cfg.get("data.samples_per_class"),
            input_shape=cfg.get("data.input_shape"),
            separation=cfg.get("data.separation"),
            noise=cfg.get("data.noise"),
            seed=cfg.get("data.seed"),
        )
        full = make_synthetic(spec)
        n_test = cfg.get("data.test_size")
        if not 0 <= n_test < len(full):
            raise ConfigError(f"data.test_size must lie in [0, {len(full)})")
        train = full.subset(np.arange(len(full) - n_test))
        test = full.subset(np.arange(len(full) - n_test, len(full))) if n_test else None
    elif source == "cifar10":
        cfg.require("data.train")
        train = load_cifar10_binary(cfg.get("data.train"))
        test = None
        if need_test:
            cfg.require("data.test")
            test = load_cifar10_binary(cfg.get("data.test"))
    else:
        raise ConfigError(f"data.source must be 'synthetic' or 'cifar10', got {source!r}")
    if need_test and test is None:
        raise ConfigError("an evaluation split is required: set data.test_size > 0 or data.test")
    limit = cfg.get("data.eval_limit")
    if test is not None and limit > 0:
        test = test.head(limit)
    return train, test


def _write_record(path: Path, record: TrainRunRecord | list[dict]) -> None:
    if isinstance(record, TrainRunRecord):
        path.write_text(record.jsonl())
    else:
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in record))


def _load_checkpoint(cfg: RunConfig, key: str) -> tuple[ModelBundle, dict]:
    cfg.require(key)
    return checkpoint.load(cfg.get(key))


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    train, _ = load_data(cfg, need_test=False)
    arch = cfg.architecture(train.input_shape, train.num_classes)
    model, record = pretrain_natural(train, cfg.pretrain_config(), arch)
    record.config = cfg.to_dict()
    ck = checkpoint.save(out / "pretrained.afdc", model, kind="pretrained", config=cfg.to_dict(),
                         config_hash=config_hash(cfg), epoch=cfg.get("pretrain.epochs") - 1)
    _write_record(out / "pretrain.jsonl", record)
    return {"checkpoint": str(ck), "train_acc": record.epochs[-1]["train_acc"]}


def _check_arch(cfg: RunConfig, model: ModelBundle, data: Dataset) -> None:
    want = cfg.architecture(data.input_shape, data.num_classes)
    if model.arch != want:
        raise ConfigError(f"checkpoint architecture {model.arch.to_dict()} does not match the configured "
                          f"{want.to_dict()}")


def _finetune_one(cfg: RunConfig, pre: ModelBundle, train: Dataset, test: Dataset, out: Path, prefix: str) -> dict:
    ft = cfg.finetune_config()
    live, ema, record = finetune(pre, train, ft, eval_data=test, eval_attack=cfg.eval_attack(),
                                 metrics_every=ft.epochs)
    record.config = cfg.to_dict()
    meta = dict(config=cfg.to_dict(), config_hash=config_hash(cfg), epoch=ft.epochs - 1, mode=ft.mode)
    paths = {
        "live": checkpoint.save(out / f"{prefix}live.afdc", live, kind="live", **meta),
        "ema": checkpoint.save(out / f"{prefix}ema.afdc", ema, kind="ema", **meta),
        "merged": checkpoint.save(out / f"{prefix}merged.afdc", merged_model(ema), kind="merged", **meta),
    }
    record.checkpoints.update({f"{k}_path": str(v) for k, v in paths.items()})
    _write_record(out / f"{prefix}finetune.jsonl", record)
    return {"mode": ft.mode, "alpha": ft.alpha, "beta": ft.beta, "gamma": ft.gamma,
            "metrics": record.final_metrics(), "checkpoints": {k: str(v) for k, v in paths.items()}}


def sweep_cells(cfg: RunConfig) -> list[tuple[float, float, float]]:
    """One-at-a-time grid: vary each of α, β, γ over its sweep values, others at their finetune.* values."""
    base = (cfg.get("finetune.alpha"), cfg.get("finetune.beta"), cfg.get("finetune.gamma"))
    cells = []
    for i, key in enumerate(("sweep.alpha", "sweep.beta", "sweep.gamma")):
        for v in cfg.get(key):
            cell = list(base)
            cell[i] = float(v)
            if tuple(cell) not in cells:
                cells.append(tuple(cell))
    return cells


def cmd_finetune(cfg: RunConfig, out: Path, sweep: bool = False) -> dict:
    pre, _ = _load_checkpoint(cfg, "run.pretrained")
    if pre.has_disentangler:
        raise ConfigError("run.pretrained must be a naturally pre-trained checkpoint (no disentangler)")
    train, test = load_data(cfg)
    _check_arch(cfg, pre, train)
    if not sweep:
        return _finetune_one(cfg, pre, train, test, out, "")
    rows = []
    for alpha, beta, gamma in sweep_cells(cfg):
        cell = RunConfig(values={s: dict(v) for s, v in cfg.values.items()})
        for k, v in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
            cell.set(f"finetune.{k}", repr(v))
        rows.append(_finetune_one(cell, pre, train, test, out, f"sweep-a{alpha:g}-b{beta:g}-g{gamma:g}-"))
    _write_record(out / "sweep.jsonl", rows)
    return {"cells": len(rows), "record": str(out / "sweep.jsonl")}


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    model, meta = _load_checkpoint(cfg, "run.checkpoint")
    _, test = load_data(cfg)
    _check_arch(cfg, model, test)
    metrics = evaluate(model, test, cfg.eval_attack(), epoch=meta.get("epoch"))
    result = {"checkpoint": str(cfg.get("run.checkpoint")), "kind": meta.get("kind"),
              "attack": cfg.to_dict()["eval"], "metrics": metrics.to_dict()}
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_dump_features(cfg: RunConfig, out: Path) -> dict:
    model, _ = _load_checkpoint(cfg, "run.checkpoint")
    _, test = load_data(cfg)
    _check_arch(cfg, model, test)
    n = cfg.get("run.samples")
    if n < 0 or n > len(test):
        raise ConfigError(f"run.samples must lie in [0, {len(test)}]")
    if n:
        test = test.head(n)
    path = dump_features(model, test, cfg.eval_attack(), out / "features.afdf")
    return {"features": str(path), "rows": len(test)}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "dump-features": cmd_dump_features,
    "sweep": lambda cfg, out: cmd_finetune(cfg, out, sweep=True),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="sets pretrain.seed and finetune.seed")
    common.add_argument("--out", type=Path, default=Path("afd-out"), help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    p = argparse.ArgumentParser(prog="afd", description="Adversarial fine-tuning with a feature disentangler.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="natural pre-training")
    ft = sub.add_parser("finetune", parents=[common], help="adversarial fine-tuning")
    ft.add_argument("--sweep", action="store_true", help="run the alpha/beta/gamma grid from the sweep.* settings")
    sub.add_parser("evaluate", parents=[common], help="clean/robust accuracy and feature gap")
    sub.add_parser("dump-features", parents=[common], help="write an AFDF feature dump")
    sub.add_parser("sweep", parents=[common], help="alias of 'finetune --sweep'")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "finetune" and args.sweep:
            result = cmd_finetune(cfg, args.out, sweep=True)
        else:
            result = COMMANDS[args.command](cfg, args.out)
    except (ConfigError, UsageError) as e:
        print(f"afd {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, DataError) as e:
        print(f"afd {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except AFDError as e:
        print(f"afd {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
