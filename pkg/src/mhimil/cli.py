"""Command-line entry point: ``mhimil <command> [options]``.

Every command takes an optional JSON run config (``--config``); values can be
overridden with ``--set section.key=value`` (flags win over the file).  The
seed and worker count can also come from ``MHIMIL_SEED`` / ``MHIMIL_JOBS``.

Exit codes: 1 configuration, 2 data, 3 numeric divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import SynthConfig, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .errors import ConfigError, DataError, EmptyBagError, MhimilError, NumericError, ShapeError
from .evalx import (
    CRITERIA,
    evaluate,
    recall_table,
    sensitivity_curve,
    write_curves_csv,
    write_report_csv,
    write_report_json,
)
from .mhim import AttentionRecord, MhimConfig, donor_attention, write_plans_csv
from .milmodel import ModelConfig
from .numcore import LrSchedule
from .pipeline import TrainConfig, grid_search_tb, kfold_split, select_bags, train_phase1, train_phase2

log = logging.getLogger("mhimil")

ENV_PREFIX = "MHIMIL_"

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "model": {"prefix_dim": None, "proj_dim": 64, "lstm_hidden": 32, "attn_dim": 32},
    "train": {
        "epochs": 200,
        "batch_size": 8,
        "peak_lr": 3e-5,
        "floor_lr": 1e-7,
        "warmup_fraction": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "weight_decay": 0.01,
    },
    "mhim": {"t": 1, "b": 1, "r": None},
    "synth": {
        "n_bags": 200,
        "bag_size_range": [10, 40],
        "response_dim": 16,
        "prefix_dim": 8,
        "relevance_rate": 0.1,
        "redundancy": 3,
        "signal_strength": 3.0,
        "noise_sigma": 0.1,
        "target_scale": 1.0,
        "target_rule": "count",
    },
    "cv": {"folds": 5, "fold": 0, "t_grid": [0, 1, 2, 4], "b_grid": [0, 1, 2, 4]},
    "k_list": [10, 20, 50, 80, 90],
    "criteria": list(CRITERIA),
}

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4


# -- configuration --------------------------------------------------------


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=(), env=None):
    """Defaults <- config file <- environment <- ``--set`` flags."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, doc)
    for key in ("seed", "jobs"):
        if ENV_PREFIX + key.upper() in env:
            raw = env[ENV_PREFIX + key.upper()]
            try:
                cfg[key] = int(raw)
            except ValueError:
                raise ConfigError(f"{ENV_PREFIX}{key.upper()} must be an integer, got {raw!r}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        node = {}
        leaf = node
        parts = dotted.split(".")
        for p in parts[:-1]:
            leaf[p] = {}
            leaf = leaf[p]
        leaf[parts[-1]] = _parse_value(raw)
        _merge(cfg, node)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg):
    synth_config(cfg)
    train_config(cfg)
    mhim_config(cfg)
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    cv = cfg["cv"]
    if int(cv["folds"]) < 3 or not 0 <= int(cv["fold"]) < int(cv["folds"]):
        raise ConfigError("cv.folds must be >= 3 and 0 <= cv.fold < cv.folds")
    if not cv["t_grid"] or not cv["b_grid"]:
        raise ConfigError("cv grids must be nonempty")
    if any(not 0 < float(k) < 100 for k in cfg["k_list"]):
        raise ConfigError("k_list values must lie in (0, 100)")
    for c in cfg["criteria"]:
        if c not in CRITERIA:
            raise ConfigError(f"unknown criterion {c!r}")
    m = cfg["model"]
    for key in ("proj_dim", "lstm_hidden", "attn_dim"):
        if not isinstance(m[key], int) or m[key] <= 0:
            raise ConfigError(f"model.{key} must be a positive integer")


def synth_config(cfg):
    try:
        return SynthConfig(**{**cfg["synth"], "bag_size_range": tuple(cfg["synth"]["bag_size_range"])}, seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth config: {exc}") from None


def train_config(cfg, mhim=None):
    t = cfg["train"]
    try:
        schedule = LrSchedule(t["peak_lr"], t["floor_lr"], t["warmup_fraction"])
        return TrainConfig(
            epochs=int(t["epochs"]),
            schedule=schedule,
            batch_size=int(t["batch_size"]),
            beta1=t["beta1"],
            beta2=t["beta2"],
            epsilon=t["epsilon"],
            weight_decay=t["weight_decay"],
            seed=int(cfg["seed"]),
            mhim=mhim,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def mhim_config(cfg):
    m = cfg["mhim"]
    try:
        return MhimConfig(t=int(m["t"]), b=int(m["b"]), r=None if m["r"] is None else int(m["r"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mhim config: {exc}") from None


def model_config(cfg, bags):
    if not bags:
        raise DataError("dataset is empty")
    first = bags[0]
    response_dim = first.response.shape[1]
    data_prefix = 0 if first.prefix is None else first.prefix.shape[1]
    prefix_dim = cfg["model"]["prefix_dim"]
    prefix_dim = data_prefix if prefix_dim is None else int(prefix_dim)
    return ModelConfig(
        response_dim=response_dim,
        prefix_dim=prefix_dim,
        proj_dim=cfg["model"]["proj_dim"],
        lstm_hidden=cfg["model"]["lstm_hidden"],
        attn_dim=cfg["model"]["attn_dim"],
        seed=int(cfg["seed"]),
    )


# -- output helpers -------------------------------------------------------


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace(path, result, prefix_cols=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "rmse", "mae"])
        for epoch, split, rmse, mae in result.trace_rows():
            writer.writerow([epoch, split, repr(rmse), repr(mae)])


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(cfg, bags):
    folds = kfold_split([b.id for b in bags], k=int(cfg["cv"]["folds"]), seed=int(cfg["seed"]))
    fold = folds[int(cfg["cv"]["fold"])]
    return fold, select_bags(bags, fold.train_ids), select_bags(bags, fold.val_ids)


def _train_summary(result):
    return {"best_epoch": result.best_epoch, "best_val_rmse": result.best_val_rmse}


# -- commands -------------------------------------------------------------


def cmd_print_config(args, cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True))


def cmd_gen(args, cfg):
    bags = generate_synthetic(synth_config(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(bags, out)
    summary = {"command": "gen", "bags": len(bags), "config": cfg["synth"], "seed": cfg["seed"]}
    _write_json(out.with_name(out.stem + ".summary.json"), summary)


def cmd_train(args, cfg):
    bags = load_dataset(args.data)
    out = _out_dir(args.out)
    fold, train, val = _split(cfg, bags)
    result = train_phase1(train_config(cfg), model_config(cfg, bags), train, val)
    save_checkpoint(result.params, out / "checkpoint.json")
    _write_trace(out / "loss.csv", result)
    manifest = {
        "command": "train",
        "config": cfg,
        "fold": fold.to_dict(),
        "checkpoint": "checkpoint.json",
        "loss_trace": "loss.csv",
        "losses": result.trace_rows(),
        **_train_summary(result),
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "summary.json", {"command": "train", **_train_summary(result)})


def cmd_train_mhim(args, cfg):
    bags = load_dataset(args.data)
    donor, _ = load_checkpoint(args.donor)
    out = _out_dir(args.out)
    fold, train, val = _split(cfg, bags)
    mhim = mhim_config(cfg)
    result = train_phase2(
        train_config(cfg, mhim=mhim), donor, train, val, model_cfg=model_config(cfg, bags), record_plans=True
    )
    save_checkpoint(result.params, out / "checkpoint.json")
    _write_trace(out / "loss.csv", result)
    write_plans_csv(out / "masks.csv", result.plans)
    manifest = {
        "command": "train-mhim",
        "config": cfg,
        "donor": os.path.basename(args.donor),
        "mhim": mhim.to_dict(),
        "fold": fold.to_dict(),
        "checkpoint": "checkpoint.json",
        "loss_trace": "loss.csv",
        "mask_plans": "masks.csv",
        "losses": result.trace_rows(),
        **_train_summary(result),
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "summary.json", {"command": "train-mhim", "mhim": mhim.to_dict(), **_train_summary(result)})


def cmd_eval(args, cfg):
    params, _ = load_checkpoint(args.checkpoint)
    bags = load_dataset(args.data)
    out = _out_dir(args.out)
    report, _ = evaluate(params, bags)
    write_report_json(out / "report.json", report)
    write_report_csv(out / "report.csv", report)
    _write_json(
        out / "summary.json",
        {"command": "eval", "rmse": report.rmse, "mae": report.mae, "mean_entropy": report.mean_entropy, "bags": len(bags)},
    )


def cmd_explain(args, cfg):
    params, _ = load_checkpoint(args.checkpoint)
    bags = load_dataset(args.data)
    out = _out_dir(args.out)
    k_list = args.k_list or cfg["k_list"]
    records = donor_attention(params, bags)
    labeled = [(r, b.isl) for r, b in zip(records, bags) if b.isl is not None]
    table = recall_table([r for r, _ in labeled], [i for _, i in labeled], k_list)
    table["unlabeled_bags"] = len(bags) - len(labeled)
    with open(out / "attention.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "index", "weight", "isl"])
        for rec, bag in zip(records, bags):
            for j, w in enumerate(rec.weights):
                writer.writerow([bag.id, j, repr(float(w)), "" if bag.isl is None else int(bag.isl[j])])
    with open(out / "recall.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k_percent", "recall"])
        for k, r in zip(table["k_percent"], table["recall"]):
            writer.writerow([k, "" if r is None else repr(r)])
    _write_json(out / "summary.json", {"command": "explain", **table})


def cmd_sensitivity(args, cfg):
    params, _ = load_checkpoint(args.checkpoint)
    bags = load_dataset(args.data)
    out = _out_dir(args.out)
    k_list = args.k_list or cfg["k_list"]
    criteria = args.criteria or cfg["criteria"]
    sources = {}
    if "mhim-attention" in criteria:
        src, _ = load_checkpoint(args.mhim) if args.mhim else (params, None)
        sources["mhim-attention"] = donor_attention(src, bags)
    if "baseline-attention" in criteria:
        if not args.baseline:
            raise ConfigError("criterion 'baseline-attention' needs --baseline CHECKPOINT")
        src, _ = load_checkpoint(args.baseline)
        sources["baseline-attention"] = donor_attention(src, bags)
    seed = int(cfg["seed"]) if args.seed is None else args.seed
    curves = [sensitivity_curve(params, bags, c, k_list, sources.get(c), seed=seed) for c in criteria]
    write_curves_csv(out / "sensitivity.csv", curves)
    _write_json(
        out / "summary.json",
        {"command": "sensitivity", "seed": seed, "curves": {c.criterion: c.points for c in curves}},
    )


def _mean_std(values):
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None}
    # population std (n divisor)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _fold_metrics(params, test):
    report, attention = evaluate(params, test)
    records = [AttentionRecord(b.id, a) for b, a in zip(test, attention)]
    labeled = [(r, b.isl) for r, b in zip(records, test) if b.isl is not None]
    return report, records, labeled


def _phase1_task(args):
    train_cfg, model_cfg, train, val = args
    return train_phase1(train_cfg, model_cfg, train, val)


def cmd_cv(args, cfg):
    bags = load_dataset(args.data)
    out = _out_dir(args.out)
    k = int(cfg["cv"]["folds"])
    folds = kfold_split([b.id for b in bags], k=k, seed=int(cfg["seed"]))
    model_cfg = model_config(cfg, bags)
    base = train_config(cfg)
    jobs = int(cfg["jobs"])
    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    mapper = executor.map if executor else map
    try:
        tasks = [
            (base, model_cfg, select_bags(bags, f.train_ids), select_bags(bags, f.val_ids)) for f in folds
        ]
        donors = list(mapper(_phase1_task, tasks))
        grid = grid_search_tb(
            base,
            [d.params for d in donors],
            folds,
            bags,
            cfg["cv"]["t_grid"],
            cfg["cv"]["b_grid"],
            model_cfg=model_cfg,
            map_fn=mapper,
        )
    finally:
        if executor:
            executor.shutdown()
    receivers = grid.results[grid.best]

    k_list = cfg["k_list"]
    rows = {"donor": [], "receiver": []}
    fold_docs = []
    for fold, donor, receiver in zip(folds, donors, receivers):
        fold_dir = _out_dir(out / f"fold{fold.fold_index}")
        save_checkpoint(donor.params, fold_dir / "donor.json")
        save_checkpoint(receiver.params, fold_dir / "receiver.json")
        _write_trace(fold_dir / "donor_loss.csv", donor)
        _write_trace(fold_dir / "receiver_loss.csv", receiver)
        test = select_bags(bags, fold.test_ids)
        doc = {"fold": fold.to_dict(), "donor": "donor.json", "receiver": "receiver.json"}
        for name, params in (("donor", donor.params), ("receiver", receiver.params)):
            report, _, labeled = _fold_metrics(params, test)
            recall = (
                recall_table([r for r, _ in labeled], [i for _, i in labeled], k_list) if labeled else None
            )
            metrics = {"rmse": report.rmse, "mae": report.mae, "entropy": report.mean_entropy, "recall": recall}
            rows[name].append(metrics)
            doc[name + "_metrics"] = metrics
        fold_docs.append(doc)

    def aggregate(name):
        ms = rows[name]
        agg = {key: _mean_std([m[key] for m in ms]) for key in ("rmse", "mae", "entropy")}
        if all(m["recall"] for m in ms):
            agg["recall"] = {
                str(k): _mean_std([m["recall"]["recall"][i] for m in ms]) for i, k in enumerate(k_list)
            }
        return agg

    table = {"donor": aggregate("donor"), "receiver": aggregate("receiver")}
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "entropy_mean", "entropy_std", "std_convention"])
        for name, label in (("donor", "baseline"), ("receiver", "baseline w/ MHIM")):
            a = table[name]
            writer.writerow(
                [label]
                + [repr(a[m][s]) for m in ("rmse", "mae", "entropy") for s in ("mean", "std")]
                + ["population"]
            )
    grid_rows = [
        {"t": t, "b": b, "r": 2 * t, "mean_val_rmse": v, "failed": grid.failures.get((t, b))}
        for (t, b), v in sorted(grid.table.items())
    ]
    summary = {
        "command": "cv",
        "config": cfg,
        "folds": fold_docs,
        "selected": {"t": grid.best[0], "b": grid.best[1], "r": 2 * grid.best[0]},
        "grid": grid_rows,
        "table": table,
        "std_convention": "population (divide by n)",
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", {"command": "cv", "config": cfg, "folds": [f.to_dict() for f in folds],
                                        "selected": summary["selected"],
                                        "checkpoints": [{"donor": f"fold{f.fold_index}/donor.json",
                                                         "receiver": f"fold{f.fold_index}/receiver.json"} for f in folds]})


# -- argument parsing -----------------------------------------------------


def _k_list(text):
    try:
        return [float(x) if "." in x else int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="mhimil", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults: see print-config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.epochs=50 (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides config and MHIMIL_SEED)")
    common.add_argument("--jobs", type=int, default=None, help="parallel workers for cv (overrides MHIMIL_JOBS)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("print-config", parents=[common], help="print the effective config with all defaults")
    p.set_defaults(func=cmd_print_config)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="phase-1 (donor) training")
    p.add_argument("--data", required=True, help="dataset .jsonl")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-mhim", parents=[common], help="phase-2 training with donor-guided masks")
    p.add_argument("--data", required=True, help="dataset .jsonl")
    p.add_argument("--donor", required=True, help="donor checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train_mhim)

    p = sub.add_parser("eval", parents=[common], help="RMSE / MAE / attention entropy report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="Recall@k table and attention export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k-list", type=_k_list, default=None, help="comma-separated k percentages")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sensitivity", parents=[common], help="drop-top-k RMSE curves")
    p.add_argument("--checkpoint", required=True, help="model whose predictions are scored")
    p.add_argument("--data", required=True)
    p.add_argument("--criteria", type=lambda s: s.split(","), default=None,
                   help=f"comma-separated subset of {','.join(CRITERIA)}")
    p.add_argument("--k-list", type=_k_list, default=None, help="comma-separated k percentages")
    p.add_argument("--baseline", help="checkpoint whose attention drives baseline-attention")
    p.add_argument("--mhim", help="checkpoint whose attention drives mhim-attention (default: --checkpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("cv", parents=[common], help="full k-fold pipeline with t/b grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.jobs is not None:
            overrides.append(f"jobs={args.jobs}")
        cfg = load_run_config(args.config, overrides)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, EmptyBagError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MhimilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
