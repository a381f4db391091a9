"""Command-line entry point: synth / train / evaluate / predict / flops."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .data import (DatasetBundle, NormalizationStats, SynthConfig, Window,
                   chronological_split, load_dataset, save_dataset,
                   synth_generate)
from .errors import ConformerError
from .model import (ABLATIONS, ConFormerConfig, count_params, estimate_flops,
                    init_params, load_checkpoint, save_checkpoint)
from .trainer import (TrainConfig, evaluate, evaluate_historical_inertia,
                      make_windows, predict_windows, train, write_history_csv)

SECTIONS = ("model", "train", "synth")


def load_run_config(path) -> dict:
    """Read a JSON run config with optional model/train/synth sections."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConformerError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConformerError(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConformerError(f"{path}: unknown config sections {sorted(unknown)}")
    return raw


def resolve_model_config(section: dict, bundle: DatasetBundle | None,
                         ablate: list[str]) -> ConFormerConfig:
    merged = dict(section)
    if bundle is not None:
        merged.setdefault("n_nodes", bundle.n_nodes)
        merged.setdefault("steps_per_day", bundle.steps_per_day)
        merged.setdefault("start_weekday", bundle.start_weekday)
        merged.setdefault("start_slot", bundle.start_slot)
        merged.setdefault("n_acc_codes", len(bundle.acc_vocab))
        merged.setdefault("n_reg_codes", len(bundle.reg_vocab))
    if ablate:
        merged["ablations"] = sorted(set(merged.get("ablations", [])) | set(ablate))
    return ConFormerConfig.from_dict(merged)


def _write_resolved(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    raw = load_run_config(args.config)
    section = dict(raw.get("synth", {}))
    unknown = set(section) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise ConformerError(f"unknown synth config keys: {sorted(unknown)}")
    if args.incident_rate is not None:
        section["incident_rate"] = args.incident_rate
    gen = SynthConfig(**section)
    bundle = synth_generate(gen, seed=args.seed)
    save_dataset(bundle, args.out)
    _write_resolved(args.out, {"synth": asdict(gen), "seed": args.seed})
    n_acc = int((bundle.acc_ids > 0).sum())
    n_reg = int((bundle.reg_ids > 0).sum())
    print(f"wrote {args.out}: N={bundle.n_nodes} steps={bundle.n_steps} "
          f"accident_cells={n_acc} regulation_cells={n_reg}")
    return 0


def cmd_train(args) -> int:
    raw = load_run_config(args.config)
    bundle = load_dataset(args.data)
    cfg = resolve_model_config(dict(raw.get("model", {})), bundle, args.ablate)
    tsection = dict(raw.get("train", {}))
    if args.seed is not None:
        tsection["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tsection)

    result = train(bundle, cfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.cfmr")
    save_checkpoint(ckpt_path, result.params, extra={
        "norm_mean": result.stats.mean, "norm_std": result.stats.std,
        "best_epoch": result.best_epoch})
    write_history_csv(result.history, os.path.join(args.out, "history.csv"))
    _write_resolved(args.out, {"model": result.params.cfg.to_dict(),
                               "train": tcfg.to_dict()})
    best = result.history[result.best_epoch - 1]
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"(val MAE {best.val_mae:.4f}); wrote {ckpt_path}")
    return 0


def _metrics_rows(table) -> list[str]:
    rows = ["horizon,mae,rmse,mape,n_valid"]
    for key, m in table.items():
        rows.append(f"{key},{m.mae!r},{m.rmse!r},{m.mape!r},{m.n_valid}")
    return rows


def cmd_evaluate(args) -> int:
    params, extra = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.data)
    stats = NormalizationStats(mean=extra["norm_mean"], std=extra["norm_std"])
    split = chronological_split(bundle.n_steps)
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else []
    table = evaluate(params, bundle, split, args.split, horizons, stats)
    rows = _metrics_rows(table)
    print("\n".join(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "metrics.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(rows) + "\n")
    return 0


def cmd_predict(args) -> int:
    params, extra = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.data)
    stats = NormalizationStats(mean=extra["norm_mean"], std=extra["norm_std"])
    cfg = params.cfg
    t0 = args.at
    if not 0 <= t0 <= bundle.n_steps - cfg.t_in:
        raise ConformerError(
            f"--at {t0} leaves no full input window in [0, {bundle.n_steps})")
    windows = make_windows(bundle, (t0, min(bundle.n_steps, t0 + cfg.t_in + cfg.t_out)),
                           cfg.t_in, cfg.t_out)
    if windows and windows[0].t0 == t0:
        window = windows[0]
    else:
        # horizon may run past the end of the data; predict without targets
        window = Window(x=bundle.values[t0:t0 + cfg.t_in],
                        y=np.zeros((cfg.t_out, bundle.n_nodes)), t0=t0)
    preds = predict_windows(params, bundle, [window], stats)[0, :, :, 0]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "forecast.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step," + ",".join(f"node{n}" for n in range(bundle.n_nodes)) + "\n")
        for h in range(cfg.t_out):
            fh.write(str(h + 1) + "," + ",".join(repr(v) for v in preds[h]) + "\n")
    print(f"wrote {path} with shape ({cfg.t_out}, {bundle.n_nodes})")
    return 0


def cmd_flops(args) -> int:
    raw = load_run_config(args.config)
    cfg = resolve_model_config(dict(raw.get("model", {})), None, args.ablate)
    n_edges = args.edges
    if n_edges is None and args.data:
        n_edges = len(load_dataset(args.data).graph.edges)
    if n_edges is None:
        raise ConformerError("flops needs --edges N or --data DIR for the edge count")
    flops = estimate_flops(cfg, n_edges)
    n_params = count_params(init_params(cfg, seed=0))
    print(f"flops={flops} params={n_params}")
    return 0


def cmd_hi(args) -> int:
    bundle = load_dataset(args.data)
    split = chronological_split(bundle.n_steps)
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else []
    table = evaluate_historical_inertia(bundle, split, args.split, args.t_in,
                                        args.t_out, horizons)
    print("\n".join(_metrics_rows(table)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conformer",
        description="Incident-aware conditional spatiotemporal traffic forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--incident-rate", type=float, default=None, dest="incident_rate")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--horizons", default="", help="comma-separated 1-based steps")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="forecast one window from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--at", type=int, required=True, help="input window start step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("flops", help="print the FLOPs estimate and param count")
    p.add_argument("--config", default=None)
    p.add_argument("--edges", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("hi", help="historical-inertia reference metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--t-in", type=int, default=12, dest="t_in")
    p.add_argument("--t-out", type=int, default=12, dest="t_out")
    p.add_argument("--horizons", default="")
    p.set_defaults(func=cmd_hi)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConformerError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
