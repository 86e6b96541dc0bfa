"""Command-line entry point: ``madnn {gen-data,train,eval,baseline,report}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Environment: ``MADNN_SEED`` and ``MADNN_OUTPUT_DIR`` override the config file;
explicit ``--seed`` / ``--output-dir`` flags override both.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .baselines import METHODS, BaselineRunner, RankDeficient
from .config import ExperimentConfig, expand_sweep, load_config
from .dataset import DatasetError, generate_dataset, load_dataset, split_train_val
from .e2e import E2EModel, InfeasibleSelection, spacing_violated
from .nn import NonFiniteGradient
from .nn.checkpoint import CheckpointError
from .training import NonFiniteLoss, TrainConfig, load_checkpoint, run_algorithm1, validate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_KEYS = ("method", "sweep_variable", "sweep_value")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env_overrides(args):
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("MADNN_SEED"):
        try:
            seed = int(os.environ["MADNN_SEED"])
        except ValueError:
            raise UsageError(f"MADNN_SEED must be an integer, got {os.environ['MADNN_SEED']!r}")
    out = getattr(args, "output_dir", None) or os.environ.get("MADNN_OUTPUT_DIR") or None
    return seed, out


def _load(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    seed, out = _env_overrides(args)
    return load_config(path, seed=seed, output_dir=out)


def _echo_config(cfg: ExperimentConfig):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load(args)
    for var, value, point in expand_sweep(cfg):
        _echo_config(point)
        hdr = generate_dataset(point.build_scenario(), point.data.num_samples, point.data_path,
                               point.data.regime, point.data.slots_per_episode, seed=point.seed)
        g, m, k = hdr.dims
        summary = {"file": str(point.data_path), "samples": hdr.num_samples, "G": g, "M": m, "K": k,
                   "regime": hdr.regime, "slots_per_episode": hdr.slots_per_episode, "seed": hdr.seed}
        if var:
            summary[var] = value
        print(json.dumps(summary))
    return EXIT_OK


def _require_data(cfg: ExperimentConfig):
    if not cfg.data_path.exists():
        raise DatasetError(f"dataset {cfg.data_path} not found; run gen-data first")
    return load_dataset(cfg.data_path)


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.epochs is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": args.epochs})})
    for var, value, point in expand_sweep(cfg):
        _echo_config(point)
        ds = _require_data(point)
        train_view, val_view = split_train_val(ds, point.data.val_fraction)
        model = E2EModel(ds.header.scenario, point.build_model_config())
        tcfg = point.build_train_config()

        def progress(epoch, m, row):
            if not args.quiet:
                print(f"epoch {epoch:4d} {row['mode']} loss {m.loss:.4f} train {m.rate:.4f} "
                      f"val {float(row['val_rate']):.4f} viol {float(row['spacing_violation_frac']):.3f}",
                      flush=True)

        res = run_algorithm1(model, train_view, val_view, tcfg, point.output_dir, resume=args.resume,
                             on_epoch=progress, meta_extra={"val_fraction": point.data.val_fraction})
        print(json.dumps({"output_dir": point.output_dir, "best_val_rate": res.best_rate,
                          "best_epoch": res.best_epoch, "epochs": len(res.log), "sweep_variable": var,
                          "sweep_value": value}))
    return EXIT_OK


def _write_csv(path, rows):
    if not rows:
        raise DatasetError("nothing to write")
    fields = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _fmt_positions(pos):
    return ";".join(f"{x:.6g}:{z:.6g}" for x, z in pos)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint {ckpt} not found")
    model, meta, _ = load_checkpoint(ckpt)
    tcfg = TrainConfig(**meta["train"])
    if args.feasibility is not None:
        tcfg = replace(tcfg, feasibility=args.feasibility)
    ablation = args.ablation or "none"
    if ablation == "random-bits":
        tcfg = replace(tcfg, random_bits=True)
    ds = load_dataset(args.dataset)
    if ds.header.scenario != model.scenario:
        raise DatasetError("dataset scenario does not match the checkpoint's scenario")
    frac = args.val_fraction if args.val_fraction is not None else meta.get("val_fraction", 0.1)
    train_view, val_view = split_train_val(ds, frac)
    view = {"val": val_view, "train": train_view, "all": ds.view()}[args.split]
    mean, viol, tr = validate(model, view, tcfg, return_trace=True)
    method = args.method or ("learned" if ablation == "none" else f"learned+{ablation}")
    rows = []
    for i, idx in enumerate(view.indices):
        row = {"method": method, "sweep_variable": args.sweep_variable, "sweep_value": args.sweep_value,
               "sample": int(idx), "sum_rate": float(tr["rates"][i])}
        for k, r in enumerate(tr["rates_u"][i]):
            row[f"rate_u{k}"] = float(r)
        row["interference"] = ""
        row["spacing_violation"] = int(spacing_violated(tr["positions"][i], model.scenario.wavelength))
        row["positions"] = _fmt_positions(tr["positions"][i])
        row["bits"] = "".join("1" if b > 0 else "0" for b in tr["bits"][i]) if model.pilot is not None else ""
        row["ablation"] = ablation
        rows.append(row)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}_{ablation}.csv"
    _write_csv(out, rows)
    print(json.dumps({"csv": str(out), "mean_sum_rate": mean, "spacing_violation_frac": viol,
                      "checkpoint_best_rate": meta.get("best_rate"), "ablation": ablation,
                      "samples": len(rows)}))
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"unknown baseline method {args.method!r}; choose one of: {', '.join(METHODS)}")
    cfg = _load(args)
    all_rows = []
    for var, value, point in expand_sweep(cfg):
        ds = _require_data(point)
        train_view, val_view = split_train_val(ds, point.data.val_fraction)
        view = val_view if len(val_view) else train_view
        bits = point.baseline.feedback_bits or point.model.feedback_bits
        runner = BaselineRunner(args.method, ds.header.scenario, bits=bits,
                                pilot_length=point.baseline.pilot_length or point.model.pilot_length,
                                prior_view=train_view, seed=point.seed, prior_samples=point.baseline.prior_samples)
        limit = args.limit or point.baseline.limit
        rows = runner.run(view, limit, var, value)
        for r in rows:
            r["ablation"] = "none"
        all_rows.extend(rows)
        print(json.dumps({"method": args.method, "sweep_variable": var, "sweep_value": value,
                          "mean_sum_rate": float(np.mean([r["sum_rate"] for r in rows])), "samples": len(rows)}))
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"baseline_{args.method}.csv"
    _write_csv(out, all_rows)
    print(json.dumps({"csv": str(out)}))
    return EXIT_OK


def merge_reports(paths) -> list[dict]:
    """Average sum rates per (method, sweep_variable, sweep_value) with a count column."""
    groups: dict = {}
    for p in paths:
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                missing = [k for k in REPORT_KEYS + ("sum_rate",) if k not in row]
                if missing:
                    raise DatasetError(f"{p}: missing columns {missing}")
                key = tuple(row[k] for k in REPORT_KEYS)
                groups.setdefault(key, []).append(float(row["sum_rate"]))
    rows = []
    for key, vals in groups.items():
        v = np.asarray(vals)
        rows.append({"method": key[0], "sweep_variable": key[1], "sweep_value": key[2],
                     "mean_sum_rate": float(v.mean()),
                     "stderr": float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0, "count": len(v)})
    return rows


def cmd_report(args) -> int:
    paths = sorted({p for pattern in args.inputs for p in glob.glob(pattern)})
    if not paths:
        raise DatasetError(f"no CSV files match {args.inputs}")
    rows = merge_reports(paths)
    _write_csv(args.out, rows)
    print(json.dumps({"csv": str(args.out), "groups": len(rows), "inputs": len(paths)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="madnn", description="Movable-antenna end-to-end learning experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="YAML experiment file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--output-dir", default=None, help="override the config output directory")

    g = sub.add_parser("gen-data", help="generate the channel dataset(s)")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the end-to-end model")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output directory")
    t.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--val-fraction", type=float, default=None,
                   help="validation share used to split the dataset (default: the training run's)")
    e.add_argument("--ablation", choices=("none", "random-bits"), default="none")
    feas = e.add_mutually_exclusive_group()
    feas.add_argument("--feasibility", dest="feasibility", action="store_true", default=None,
                      help="greedy lambda/2-feasible selection")
    feas.add_argument("--no-feasibility", dest="feasibility", action="store_false")
    e.add_argument("--method", default=None, help="method label in the CSV")
    e.add_argument("--sweep-variable", default="")
    e.add_argument("--sweep-value", default="")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="run a classical baseline")
    b.add_argument("method", help=f"one of: {', '.join(METHODS)}")
    common(b)
    b.add_argument("--limit", type=int, default=None, help="evaluate at most this many samples")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_baseline)

    r = sub.add_parser("report", help="merge CSV reports by (method, sweep variable, sweep value)")
    r.add_argument("inputs", nargs="+", help="CSV files or glob patterns")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        print(f"madnn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"madnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError, RankDeficient, InfeasibleSelection) as exc:
        print(f"madnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"madnn: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
