"""Prediction and explainability metrics: RMSE/MAE, attention entropy, Recall@k, drop-top-k curves."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .mhim import derive_seed, rank_desc
from .milmodel import predict

CRITERIA = ("baseline-attention", "mhim-attention", "random")


def rmse_mae(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ShapeError("rmse_mae needs equal nonzero lengths", p.shape, t.shape)
    err = p - t
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err)))


def attention_entropy(record):
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    w = np.asarray(getattr(record, "weights", record), dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


def top_k_count(n, k_percent):
    if not 0 < k_percent <= 100:
        raise ConfigError(f"k_percent must lie in (0, 100], got {k_percent}")
    return max(1, int(np.floor(n * k_percent / 100.0)))


def recall_counts(record, isl, k_percent):
    """``(hits, positives)`` for one bag: ISL-positive instances inside the top-k%."""
    w = np.asarray(getattr(record, "weights", record), dtype=np.float64)
    isl = np.asarray(isl)
    if isl.shape != w.shape:
        raise ShapeError("isl length differs from attention record", isl.shape, w.shape)
    top = rank_desc(w)[: top_k_count(w.size, k_percent)]
    return int(isl[top].sum()), int(isl.sum())


def recall_at_k(record, isl, k_percent):
    """Fraction of ISL-positive instances ranked in the top k%; ``None`` if there are none."""
    hits, positives = recall_counts(record, isl, k_percent)
    if positives == 0:
        return None
    return hits / positives


def recall_at_k_aggregate(records, isl_lists, k_percent):
    """Micro-average over bags: pooled hits over pooled positives.

    Bags without positives are skipped.  Returns ``None`` if no bag has any.
    """
    if len(records) != len(isl_lists):
        raise ShapeError("records and isl lists differ in length", (len(records),), (len(isl_lists),))
    hits = positives = 0
    for rec, isl in zip(records, isl_lists):
        h, p = recall_counts(rec, isl, k_percent)
        hits += h
        positives += p
    if positives == 0:
        return None
    return hits / positives


def recall_table(records, isl_lists, k_list):
    """Recall@k for each k plus the number of bags without positives (excluded)."""
    undefined = sum(1 for isl in isl_lists if int(np.sum(isl)) == 0)
    return {
        "k_percent": list(k_list),
        "recall": [recall_at_k_aggregate(records, isl_lists, k) for k in k_list],
        "undefined_bags": undefined,
        "bags": len(records),
    }


@dataclass
class MetricReport:
    rmse: float
    mae: float
    mean_entropy: float
    per_bag: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def evaluate(params, bags):
    """Unmasked predictions, RMSE/MAE, and mean per-bag attention entropy."""
    preds, attention = predict(params, bags)
    targets = np.array([b.target for b in bags])
    rmse, mae = rmse_mae(preds, targets)
    entropies = [attention_entropy(a) for a in attention]
    per_bag = [
        {"bag_id": b.id, "prediction": float(p), "target": b.target, "entropy": h}
        for b, p, h in zip(bags, preds, entropies)
    ]
    return MetricReport(rmse, mae, float(np.mean(entropies)), per_bag), attention


@dataclass
class SensitivityCurve:
    criterion: str
    points: list  # [(k_percent, rmse), ...]

    def __post_init__(self):
        ks = [k for k, _ in self.points]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("sensitivity k values must be strictly increasing")


def drop_count(n, k_percent):
    return min(int(np.floor(n * k_percent / 100.0)), n - 1)


def sensitivity_curve(params, dataset, criterion, k_grid, attention_source=None, seed=0):
    """RMSE after physically removing the top-k% instances of every bag.

    Attention criteria rank instances by ``attention_source`` (records aligned
    with ``dataset``); ``random`` drops a uniform random subset seeded per
    ``(seed, bag id, k)``.  At least one instance always survives.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    if criterion != "random":
        if attention_source is None:
            raise ConfigError(f"criterion {criterion!r} needs an attention source")
        if len(attention_source) != len(dataset):
            raise ShapeError("attention source differs from dataset", (len(attention_source),), (len(dataset),))
    ks = [float(k) for k in k_grid]
    if any(not 0 < k < 100 for k in ks):
        raise ConfigError("sensitivity k values must lie in (0, 100)")
    targets = np.array([b.target for b in dataset])
    points = []
    for k in ks:
        reduced = []
        for i, bag in enumerate(dataset):
            n = len(bag)
            d = drop_count(n, k)
            if d == 0:
                reduced.append(bag)
                continue
            if criterion == "random":
                rng = np.random.default_rng(derive_seed(seed, bag.id, k))
                dropped = rng.choice(n, size=d, replace=False)
            else:
                w = getattr(attention_source[i], "weights", attention_source[i])
                if len(w) != n:
                    raise ShapeError(f"attention for bag {bag.id!r} differs from bag size", (len(w),), (n,))
                dropped = rank_desc(w)[:d]
            keep = np.setdiff1d(np.arange(n), dropped)
            reduced.append(bag.subset(keep))
        preds, _ = predict(params, reduced)
        points.append((k, rmse_mae(preds, targets)[0]))
    return SensitivityCurve(criterion, points)


def write_curves_csv(path, curves):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["criterion", "k_percent", "rmse"])
        for curve in curves:
            for k, rmse in curve.points:
                writer.writerow([curve.criterion, repr(float(k)), repr(float(rmse))])


def write_report_json(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "prediction", "target", "entropy"])
        for row in report.per_bag:
            writer.writerow([row["bag_id"], repr(row["prediction"]), repr(row["target"]), repr(row["entropy"])])
