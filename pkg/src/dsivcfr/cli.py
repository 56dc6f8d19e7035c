"""Command-line entry point.

Subcommands bind the library into reproducible runs driven by a JSON config
with strict unknown-key rejection: ``gen`` writes synthetic panels, ``train``
fits a model and writes a checkpoint, ``eval`` scores counterfactual MSE,
``sweep`` scans the loss-weight grid, and ``decide`` picks treatment blocks
and scores regret against the enumerated oracle.  Every run writes its fully
resolved config beside its outputs, and all randomness flows from the single
seed through named substreams.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import bench
from .cfr import DsivModel, ModelConfig, TrainConfig, fit, predict_denormalized
from .errors import (ConfigurationError, ContractError, DimensionError,
                     DsivError, NumericError, ParseError, TrainingError)
from .nn import assign_checkpoint, load_checkpoint, save_checkpoint
from .simgen import (GenConfig, generate_decision_dataset, generate_splits,
                     load_oracle, load_panel, save_metadata, save_oracle,
                     save_panel, substream)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_EVAL_DEFAULTS = {"seeds": [0, 1, 2], "sweep_alphas": [0.0, 0.01, 0.1, 1.0],
                  "sweep_betas": [0.0, 0.01, 0.1, 1.0], "sweep_seeds": [0, 1],
                  "workers": 1, "tau": 5}


def _section(raw: dict, name: str, defaults: dict) -> dict:
    """Merge a config section over its defaults, rejecting unknown keys."""
    given = raw.get(name, {})
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section '{name}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown keys in section '{name}': {sorted(unknown)}")
    return {**defaults, **given}


def resolve_config(path: str | None, overrides: dict) -> dict:
    """Load + validate the run config, materializing every default."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    top_defaults = {"seed": 0, "out": "runs", "quiet": False,
                    "generator": {}, "model": {}, "training": {}, "evaluation": {}}
    unknown = set(raw) - set(top_defaults)
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = {
        "seed": raw.get("seed", 0),
        "out": raw.get("out", "runs"),
        "quiet": bool(raw.get("quiet", False)),
        "generator": _section(raw, "generator",
                              {f.name: getattr(GenConfig(), f.name) for f in fields(GenConfig)}),
        "model": _section(raw, "model", asdict(ModelConfig())),
        "training": _section(raw, "training", asdict(TrainConfig())),
        "evaluation": _section(raw, "evaluation", _EVAL_DEFAULTS),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    # the run seed threads through generation and training unless those
    # sections pin their own
    cfg["generator"]["seed"] = cfg["generator"].get("seed") if "generator" in raw and "seed" in raw.get("generator", {}) else cfg["seed"]
    cfg["training"]["seed"] = raw.get("training", {}).get("seed", cfg["seed"])
    return cfg


def _write_resolved(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)


def _say(cfg: dict, msg: str) -> None:
    if not cfg.get("quiet"):
        print(msg)


def _spec_from(cfg: dict) -> bench.ExperimentSpec:
    return bench.ExperimentSpec(gen=GenConfig(**cfg["generator"]),
                                model=ModelConfig(**cfg["model"]),
                                train=TrainConfig(**cfg["training"]))


def _load_model(ckpt_path: str) -> DsivModel:
    values, config = load_checkpoint(ckpt_path)
    mcfg = ModelConfig(**config["model"])
    model = DsivModel(mcfg, config["d_x"], config["d_a"], substream(0, "init"))
    model.y_mean = config["y_mean"]
    model.y_std = config["y_std"]
    assign_checkpoint(model.all_params(), values)
    return model


# ---- subcommands ------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    gen = GenConfig(**cfg["generator"])
    gen.validate()
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    if gen.kind == "decision":
        train, val, oset = generate_decision_dataset(gen)
        save_oracle(oset, out)
        splits = {"train": train, "val": val}
    else:
        train, val, test = generate_splits(gen)
        splits = {"train": train, "val": val, "test": test}
    for name, ds in splits.items():
        save_panel(ds, os.path.join(out, f"{name}.csv"),
                   latents=gen.latent_diagnostics)
    save_metadata(os.path.join(out, "metadata.json"), gen)
    _write_resolved(cfg, out)
    rate = float(train.a.mean())
    _say(cfg, f"generated {gen.kind}: n={train.n}/{val.n} T={gen.T} "
              f"d_x={gen.d_x} treatment rate={rate:.3f}")
    return EXIT_OK


def _load_split(data_dir: str, name: str):
    path = os.path.join(data_dir, f"{name}.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_panel(path)


def cmd_train(cfg: dict, data_dir: str) -> int:
    train = _load_split(data_dir, "train")
    val = _load_split(data_dir, "val")
    mcfg = ModelConfig(**cfg["model"])
    tcfg = TrainConfig(**cfg["training"])
    model = DsivModel(mcfg, train.d_x, train.d_a, substream(tcfg.seed, "init"))
    report = fit(model, train, val, tcfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    save_checkpoint(os.path.join(out, "checkpoint.json"),
                    model.all_params(), model.config_dict())
    with open(os.path.join(out, "train_report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, "train_report.txt"), "w") as fh:
        fh.write(report.to_text())
    _write_resolved(cfg, out)
    _say(cfg, f"trained {tcfg.K} iterations; best val mse "
              f"{report.best_val_mse:.6g} at iter {report.best_iter}")
    return EXIT_OK


def cmd_eval(cfg: dict, data_dir: str | None, ckpt: str | None) -> int:
    out = cfg["out"]
    if ckpt is not None:
        if data_dir is None:
            raise ConfigurationError("eval with --checkpoint also needs --data")
        model = _load_model(ckpt)
        test = _load_split(data_dir, "test")
        mse = bench.evaluate_one_step(model, test)
        report = bench.EvalReport(seeds=[cfg["seed"]], mses=[mse], mean=mse,
                                  std=0.0, config_fingerprint=ckpt)
    else:
        seeds = list(cfg["evaluation"]["seeds"])
        report = bench.multi_seed(_spec_from(cfg), seeds)
    bench.write_report(report, out)
    _write_resolved(cfg, out)
    _say(cfg, report.summary())
    return EXIT_NUMERIC if report.incomplete else EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    ev = cfg["evaluation"]
    grid = bench.sweep(list(ev["sweep_alphas"]), list(ev["sweep_betas"]),
                       _spec_from(cfg), list(ev["sweep_seeds"]),
                       workers=int(ev["workers"]))
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write(grid.to_csv())
    _write_resolved(cfg, out)
    best = min(grid.cells, key=grid.cells.get)
    _say(cfg, f"sweep done: best cell alpha={best[0]} beta={best[1]} "
              f"mse={grid.cells[best]:.6g}")
    return EXIT_OK


def cmd_decide(cfg: dict, data_dir: str, ckpt: str) -> int:
    model = _load_model(ckpt)
    oset = load_oracle(data_dir)
    decisions = bench.decide_sequence(model, oset)
    stats = bench.oracle_regret(decisions, oset)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "decisions.csv"), "w") as fh:
        fh.write("unit,sequence,predicted_outcome\n")
        for d in decisions:
            fh.write(f"{d.unit},{''.join(map(str, d.sequence))},"
                     f"{repr(d.predicted_outcome)}\n")
    with open(os.path.join(out, "regret.json"), "w") as fh:
        fh.write(stats.to_json())
    _write_resolved(cfg, out)
    _say(cfg, f"decided {len(decisions)} units; avg regret {stats.avg:.6g} "
              f"(random policy {bench.random_policy_regret(oset):.6g})")
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsivcfr",
        description="Sequential treatment-effect estimation with "
                    "instrument/confounder decomposition")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "sweep", "decide"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--data", default=None, help="dataset directory")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--quiet", action="store_true", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args.config, {"seed": args.seed, "out": args.out,
                                           "quiet": args.quiet})
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            if args.data is None:
                raise ConfigurationError("train requires --data")
            return cmd_train(cfg, args.data)
        if args.command == "eval":
            return cmd_eval(cfg, args.data, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "decide":
            if args.data is None or args.checkpoint is None:
                raise ConfigurationError("decide requires --data and --checkpoint")
            return cmd_decide(cfg, args.data, args.checkpoint)
        raise ConfigurationError(f"unknown command {args.command}")
    except (ConfigurationError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ContractError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DsivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
