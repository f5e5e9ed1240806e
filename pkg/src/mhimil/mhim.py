"""Masked Hard Instance Mining: donor attention records and per-bag mask sampling."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PlanMismatchError
from .milmodel import predict


@dataclass(frozen=True)
class AttentionRecord:
    bag_id: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("attention record needs a nonempty weight vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"attention record for {self.bag_id!r} is not a probability vector")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size


@dataclass(frozen=True)
class MhimConfig:
    """``t`` masks drawn from the top-``r`` donor weights plus ``b`` from the rest."""

    t: int = 0
    b: int = 0
    r: int | None = None

    def __post_init__(self):
        if self.r is None:
            object.__setattr__(self, "r", 2 * self.t)
        if self.t < 0 or self.b < 0:
            raise ConfigError("t and b must be >= 0")
        if self.r < self.t:
            raise ConfigError(f"r ({self.r}) must be >= t ({self.t})")

    @property
    def total(self):
        return self.t + self.b

    def to_dict(self):
        return {"t": self.t, "r": self.r, "b": self.b}


@dataclass(frozen=True)
class MaskPlan:
    bag_id: str
    masked_indices: tuple
    top_pool: tuple
    top_masked: tuple
    bottom_masked: tuple
    seed: int | None = None

    def rows(self, epoch):
        top = set(self.top_masked)
        for j in self.masked_indices:
            yield (self.bag_id, epoch, j, "top" if j in top else "bottom")


def derive_seed(run_seed, *keys):
    """Stable 64-bit seed from a run seed and any mix of ints/strings.

    Keys are hashed (BLAKE2b) so the stream does not depend on Python's
    per-process string hashing.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(run_seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


def rank_desc(weights):
    """Indices sorted by weight descending, ties by ascending index."""
    w = np.asarray(weights, dtype=np.float64)
    return np.lexsort((np.arange(w.size), -w))


def donor_attention(params, dataset, batch_size=32):
    _, attention = predict(params, dataset, batch_size=batch_size)
    return [AttentionRecord(bag.id, a) for bag, a in zip(dataset, attention)]


def max_masked(n):
    """Largest mask size that keeps at least ceil(n/2) (and >= 1) instances visible."""
    return n - max(1, math.ceil(n / 2))


def sample_mask(record, cfg, rng):
    """Draw a mask plan for one bag from its donor attention.

    ``rng`` is an integer seed (recorded on the plan) or a numpy Generator.
    """
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    n = len(record)
    order = rank_desc(record.weights)
    top_pool = order[: min(cfg.r, n)]
    rest = order[len(top_pool) :]
    t_eff = min(cfg.t, len(top_pool))
    b_eff = min(cfg.b, len(rest))
    overflow = t_eff + b_eff - max_masked(n)
    if overflow > 0:
        cut = min(overflow, b_eff)
        b_eff -= cut
        t_eff -= overflow - cut
    top_masked = np.sort(rng.choice(top_pool, size=t_eff, replace=False)) if t_eff else np.empty(0, int)
    bottom_masked = np.sort(rng.choice(rest, size=b_eff, replace=False)) if b_eff else np.empty(0, int)
    masked = np.sort(np.concatenate([top_masked, bottom_masked]))
    return MaskPlan(
        bag_id=record.bag_id,
        masked_indices=tuple(int(i) for i in masked),
        top_pool=tuple(int(i) for i in top_pool),
        top_masked=tuple(int(i) for i in top_masked),
        bottom_masked=tuple(int(i) for i in bottom_masked),
        seed=seed,
    )


def apply_plan(plan, bag_size):
    mask = np.zeros(bag_size, dtype=bool)
    for j in plan.masked_indices:
        if not 0 <= j < bag_size:
            raise PlanMismatchError(f"plan for {plan.bag_id!r} masks index {j} of a {bag_size}-instance bag")
        mask[j] = True
    return mask


def write_plans_csv(path, plans_by_epoch):
    """Audit export: ``bag_id,epoch,masked_index,pool`` for ``[(epoch, plan), ...]``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "epoch", "masked_index", "pool"])
        for epoch, plan in plans_by_epoch:
            writer.writerows(plan.rows(epoch))
