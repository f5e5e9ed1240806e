"""Two-phase training (donor, then MHIM receiver), k-fold splits, and the t/b grid search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceError, MhimilError, SearchError
from .evalx import rmse_mae
from .mhim import MhimConfig, apply_plan, derive_seed, donor_attention, sample_mask
from .milmodel import bag_features, forward_batch, init_params, mse_loss, predict
from .numcore import LrSchedule, OptimizerState, Tape, adamw_step, backward, lr_at, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    mhim: MhimConfig | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    rmse: float
    mae: float


@dataclass
class TrainResult:
    params: object  # ModelParams of the best-validation epoch
    trace: list  # EpochRecord rows, epoch 0 = before any update
    best_epoch: int
    best_val_rmse: float | None
    plans: list = field(default_factory=list)  # (epoch, MaskPlan) when recorded

    def trace_rows(self):
        return [(r.epoch, r.split, r.rmse, r.mae) for r in self.trace]


def _check_dims(model_cfg, bags):
    for bag in bags:
        bag_features(bag, model_cfg)


def _fit(cfg, model_cfg, train, val, records=None, record_plans=False):
    if not train:
        raise ConfigError("training set is empty")
    try:
        _check_dims(model_cfg, train)
        _check_dims(model_cfg, val)
    except ValueError as exc:
        raise ConfigError(f"dataset incompatible with model config: {exc}") from None

    params = init_params(model_cfg)
    n_batches = steps_per_epoch(len(train), cfg.batch_size)
    schedule = replace(cfg.schedule, total_steps=cfg.epochs * n_batches)
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    features = [bag_features(b, model_cfg) for b in train]
    targets = np.array([b.target for b in train])
    record_by_id = {r.bag_id: r for r in records} if records is not None else None

    trace = []
    plans = []

    def evaluate(epoch):
        val_rmse = None
        for split, bags in (("train", train), ("val", val)):
            if not bags:
                continue
            preds, _ = predict(params, bags)
            if not np.all(np.isfinite(preds)):
                raise DivergenceError(f"non-finite {split} predictions at epoch {epoch}", epoch)
            rmse, mae = rmse_mae(preds, [b.target for b in bags])
            trace.append(EpochRecord(epoch, split, rmse, mae))
            if split == "val":
                val_rmse = rmse
        return val_rmse

    best_val = evaluate(0)
    best_params, best_epoch = params.copy(), 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            masks = None
            if cfg.mhim is not None and cfg.mhim.total > 0:
                masks = []
                for i in idx:
                    bag = train[i]
                    plan = sample_mask(record_by_id[bag.id], cfg.mhim, derive_seed(cfg.seed, "mask", bag.id, epoch))
                    if record_plans:
                        plans.append((epoch, plan))
                    masks.append(apply_plan(plan, len(bag)))
            leaves = params.leaves()
            with Tape():
                out = forward_batch(leaves, model_cfg, [features[i] for i in idx], masks)
                loss = mse_loss(out.predictions, targets[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
            backward(loss)
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            try:
                adamw_step(params.buffers, grads, state, lr_at(schedule, step))
            except MhimilError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", epoch) from None
            step += 1
        val_rmse = evaluate(epoch)
        if val_rmse is None or best_val is None or val_rmse < best_val:
            best_val, best_params, best_epoch = val_rmse, params.copy(), epoch
        log.debug("epoch %d val_rmse=%s", epoch, val_rmse)
    return TrainResult(best_params, trace, best_epoch, best_val, plans)


def train_phase1(cfg, model_cfg, train, val):
    """Train the donor: plain MSE regression, best-validation checkpoint kept."""
    if cfg.mhim is not None:
        raise ConfigError("train_phase1 takes a config without MHIM settings")
    return _fit(cfg, model_cfg, train, val)


def train_phase2(cfg, donor, train, val, model_cfg=None, record_plans=False):
    """Train a fresh receiver whose attention is masked by plans drawn from the frozen donor.

    Validation runs unmasked.
    """
    if cfg.mhim is None:
        raise ConfigError("train_phase2 requires an MHIM config")
    model_cfg = model_cfg or replace(donor.config)
    try:
        _check_dims(donor.config, train)
    except ValueError as exc:
        raise ConfigError(f"donor incompatible with training data: {exc}") from None
    records = donor_attention(donor, train)
    return _fit(cfg, model_cfg, train, val, records=records, record_plans=record_plans)


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple

    def to_dict(self):
        return {
            "fold_index": self.fold_index,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }


def kfold_split(bag_ids, k=5, seed=0):
    """Rotating k-fold split: block i is test, block i+1 (mod k) validation, the rest train."""
    ids = list(bag_ids)
    if k < 3:
        raise ConfigError("k must be >= 3")
    if len(ids) < k:
        raise ConfigError(f"need at least k={k} bags, got {len(ids)}")
    rng = np.random.default_rng(derive_seed(seed, "kfold"))
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    # boundaries at floor(i*n/k): any two adjacent blocks together hold 2n/k +- 1 bags
    cuts = [i * len(ids) // k for i in range(k + 1)]
    blocks = [shuffled[cuts[i] : cuts[i + 1]] for i in range(k)]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = [x for j, blk in enumerate(blocks) if j not in (i, v) for x in blk]
        folds.append(FoldSpec(i, tuple(train), tuple(blocks[v]), tuple(blocks[i])))
    return folds


def select_bags(bags, ids):
    by_id = {b.id: b for b in bags}
    return [by_id[i] for i in ids]


@dataclass
class GridResult:
    best: tuple
    table: dict  # (t, b) -> mean validation RMSE, None when the cell failed
    per_fold: dict  # (t, b) -> [val RMSE per fold]
    results: dict  # (t, b) -> [TrainResult per fold]
    failures: dict  # (t, b) -> error message


def _grid_task(task):
    cfg, donor, train, val, model_cfg = task
    try:
        return train_phase2(cfg, donor, train, val, model_cfg=model_cfg), None
    except MhimilError as exc:
        return None, str(exc)


def grid_search_tb(cfg, donors, folds, bags, t_grid, b_grid, model_cfg=None, map_fn=map):
    """Phase-2 training for every (t, b) cell on every fold; pick the lowest mean validation RMSE.

    ``r`` is always ``2t``.  A cell whose training fails on any fold is marked
    failed and skipped.  Ties go to smaller t, then smaller b.  ``map_fn`` runs
    the (cell, fold) jobs and must return results in input order, e.g.
    ``ProcessPoolExecutor.map``.
    """
    t_grid, b_grid = sorted(set(t_grid)), sorted(set(b_grid))
    if not t_grid or not b_grid:
        raise ConfigError("t and b grids must be nonempty")
    if len(donors) != len(folds):
        raise ConfigError(f"{len(donors)} donors for {len(folds)} folds")
    cells = [(t, b) for t in t_grid for b in b_grid]
    splits = [(select_bags(bags, f.train_ids), select_bags(bags, f.val_ids)) for f in folds]
    tasks = [
        (replace(cfg, mhim=MhimConfig(t=t, b=b)), donor, train, val, model_cfg)
        for t, b in cells
        for donor, (train, val) in zip(donors, splits)
    ]
    outcomes = list(map_fn(_grid_task, tasks))
    table, per_fold, results, failures = {}, {}, {}, {}
    for c, cell in enumerate(cells):
        chunk = outcomes[c * len(folds) : (c + 1) * len(folds)]
        errors = [err for _, err in chunk if err is not None]
        if errors:
            log.warning("grid cell t=%d b=%d failed: %s", *cell, errors[0])
            table[cell] = None
            failures[cell] = errors[0]
            continue
        runs = [res for res, _ in chunk]
        per_fold[cell] = [r.best_val_rmse for r in runs]
        table[cell] = float(np.mean(per_fold[cell]))
        results[cell] = runs
    ok = [cell for cell, v in table.items() if v is not None]
    if not ok:
        raise SearchError("every grid cell failed")
    best = min(ok, key=lambda cell: (table[cell], cell[0], cell[1]))
    return GridResult(best, table, per_fold, results, failures)
