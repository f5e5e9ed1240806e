"""Bag datasets (JSON Lines), synthetic weakly-labeled bags, and checkpoint files.

Dataset line format::

    {"id": "bag-0001", "target": 3.0,
     "instances": [{"r": [...], "q": [...], "isl": 1}, ...]}

``q`` (prefix embedding) and ``isl`` (instance relevance label) are optional,
but must be present for all instances of a bag or for none.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataParseError, EmptyBagError, SchemaError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Instance:
    response: np.ndarray
    prefix: np.ndarray | None = None
    isl: int | None = None


class Bag:
    """One weakly-labeled bag: ordered instance embeddings and a scalar target."""

    __slots__ = ("id", "target", "response", "prefix", "isl", "_features")

    def __init__(self, id, response, target, prefix=None, isl=None):
        self.id = str(id)
        self.target = float(target)
        self.response = _frozen(np.array(response, dtype=np.float64, ndmin=2))
        if self.response.shape[0] == 0:
            raise EmptyBagError(f"bag {self.id!r} has no instances")
        n = self.response.shape[0]
        self.prefix = None if prefix is None else _frozen(np.array(prefix, dtype=np.float64, ndmin=2))
        if self.prefix is not None and self.prefix.shape[0] != n:
            raise SchemaError(f"bag {self.id!r}: prefix rows {self.prefix.shape[0]} != instances {n}")
        if isl is not None:
            isl = np.asarray(isl)
            if isl.shape != (n,) or not np.isin(isl, (0, 1)).all():
                raise SchemaError(f"bag {self.id!r}: isl must be n values in {{0, 1}}")
            isl = _frozen(isl.astype(np.int64))
        self.isl = isl
        self._features = None

    def __len__(self):
        return self.response.shape[0]

    def __repr__(self):
        return f"Bag(id={self.id!r}, n={len(self)}, target={self.target!r})"

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.target == other.target
            and np.array_equal(self.response, other.response)
            and _opt_equal(self.prefix, other.prefix)
            and _opt_equal(self.isl, other.isl)
        )

    __hash__ = None

    @property
    def features(self):
        """Response and prefix embeddings concatenated per instance."""
        if self._features is None:
            if self.prefix is None:
                self._features = self.response
            else:
                self._features = _frozen(np.concatenate([self.response, self.prefix], axis=1))
        return self._features

    @property
    def instances(self):
        return [
            Instance(
                self.response[j],
                None if self.prefix is None else self.prefix[j],
                None if self.isl is None else int(self.isl[j]),
            )
            for j in range(len(self))
        ]

    @classmethod
    def from_instances(cls, id, instances, target):
        if not instances:
            raise EmptyBagError(f"bag {id!r} has no instances")
        prefixes = [inst.prefix for inst in instances]
        isls = [inst.isl for inst in instances]
        if any(p is None for p in prefixes) and not all(p is None for p in prefixes):
            raise SchemaError(f"bag {id!r}: prefix embedding present on some instances only")
        if any(v is None for v in isls) and not all(v is None for v in isls):
            raise SchemaError(f"bag {id!r}: isl present on some instances only")
        return cls(
            id,
            np.stack([np.asarray(inst.response, dtype=np.float64) for inst in instances]),
            target,
            prefix=None if prefixes[0] is None else np.stack(prefixes),
            isl=None if isls[0] is None else np.array(isls),
        )

    def subset(self, keep):
        """A new bag holding only the instances selected by ``keep``.

        ``keep`` is a boolean mask of length ``len(self)`` or a sequence of
        indices (taken in the given order).
        """
        keep = np.asarray(keep)
        if keep.dtype == bool:
            if keep.shape != (len(self),):
                raise SchemaError(f"bag {self.id!r}: keep mask has {keep.size} entries, bag has {len(self)}")
            keep = np.flatnonzero(keep)
        keep = keep.astype(np.intp)
        return Bag(
            self.id,
            self.response[keep],
            self.target,
            prefix=None if self.prefix is None else self.prefix[keep],
            isl=None if self.isl is None else self.isl[keep],
        )

    def to_json(self):
        instances = []
        for j in range(len(self)):
            inst = {"r": self.response[j].tolist()}
            if self.prefix is not None:
                inst["q"] = self.prefix[j].tolist()
            if self.isl is not None:
                inst["isl"] = int(self.isl[j])
            instances.append(inst)
        return {"id": self.id, "target": self.target, "instances": instances}


def _frozen(arr):
    arr.setflags(write=False)
    return arr


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def _vector(value, what, bag_id):
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise SchemaError(f"bag {bag_id!r}: {what} must be a list of numbers")
    return value


def _parse_bag(obj, line):
    if not isinstance(obj, dict):
        raise DataParseError("expected a JSON object", line)
    unknown = set(obj) - {"id", "target", "instances"}
    if unknown:
        raise SchemaError(f"line {line}: unknown bag keys {sorted(unknown)}")
    bag_id = obj.get("id")
    if not isinstance(bag_id, str) or not bag_id:
        raise SchemaError(f"line {line}: bag id must be a nonempty string")
    target = obj.get("target")
    if isinstance(target, bool) or not isinstance(target, (int, float)) or not math.isfinite(target):
        raise SchemaError(f"bag {bag_id!r}: target must be a finite number")
    raw = obj.get("instances")
    if not isinstance(raw, list) or not raw:
        raise SchemaError(f"bag {bag_id!r}: instances must be a nonempty list")
    instances = []
    for inst in raw:
        if not isinstance(inst, dict) or "r" not in inst or set(inst) - {"r", "q", "isl"}:
            raise SchemaError(f"bag {bag_id!r}: instance must be an object with keys r, q?, isl?")
        r = _vector(inst["r"], "r", bag_id)
        q = _vector(inst["q"], "q", bag_id) if "q" in inst else None
        isl = inst.get("isl")
        if isl is not None and (isinstance(isl, bool) or isl not in (0, 1)):
            raise SchemaError(f"bag {bag_id!r}: isl must be 0 or 1")
        instances.append((r, q, isl))
    widths = {len(r) for r, _, _ in instances}
    qwidths = {None if q is None else len(q) for _, q, _ in instances}
    if len(widths) != 1 or len(qwidths) != 1:
        raise SchemaError(f"bag {bag_id!r}: embedding widths differ between instances")
    try:
        return Bag.from_instances(
            bag_id,
            [Instance(np.array(r, dtype=np.float64), None if q is None else np.array(q, dtype=np.float64), isl)
             for r, q, isl in instances],
            target,
        )
    except SchemaError:
        raise
    except ValueError as exc:
        raise SchemaError(f"bag {bag_id!r}: {exc}") from None


def iter_dataset(path):
    """Stream bags from a JSON Lines file, validating each line as it is read.

    Cross-bag invariants (unique ids, constant widths) are checked against all
    bags seen so far.
    """
    seen = set()
    dims = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataParseError(f"invalid JSON ({exc.msg})", line_no) from None
            bag = _parse_bag(obj, line_no)
            if bag.id in seen:
                raise SchemaError(f"duplicate bag id {bag.id!r} (line {line_no})")
            seen.add(bag.id)
            bag_dims = (
                bag.response.shape[1],
                None if bag.prefix is None else bag.prefix.shape[1],
                bag.isl is not None,
            )
            if dims is None:
                dims = bag_dims
            elif bag_dims[:2] != dims[:2]:
                raise SchemaError(
                    f"bag {bag.id!r}: embedding widths {bag_dims[:2]} differ from dataset {dims[:2]}"
                )
            yield bag


def load_dataset(path):
    return list(iter_dataset(path))


def save_dataset(bags, path):
    validate_dataset(bags)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for bag in bags:
            fh.write(json.dumps(bag.to_json()))
            fh.write("\n")


def validate_dataset(bags):
    ids = [b.id for b in bags]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate bag ids in dataset")
    widths = {(b.response.shape[1], None if b.prefix is None else b.prefix.shape[1]) for b in bags}
    if len(widths) > 1:
        raise SchemaError(f"embedding widths differ across bags: {sorted(widths, key=str)}")


def bag_label_oracle(instance_labels):
    """Bag label under the standard MIL assumption: positive iff any instance is."""
    labels = list(instance_labels)
    if not labels:
        raise EmptyBagError("bag_label_oracle needs at least one instance label")
    return int(any(int(v) == 1 for v in labels))


@dataclass(frozen=True)
class SynthConfig:
    n_bags: int = 200
    bag_size_range: tuple = (10, 40)
    response_dim: int = 16
    prefix_dim: int = 8
    relevance_rate: float = 0.1
    redundancy: int = 3
    signal_strength: float = 3.0
    noise_sigma: float = 0.1
    target_scale: float = 1.0
    target_rule: str = "count"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bag_size_range
        if not 1 <= lo <= hi:
            raise ConfigError("bag_size_range must satisfy 1 <= min <= max")
        if not 0.0 <= self.relevance_rate <= 1.0:
            raise ConfigError("relevance_rate must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.redundancy < 0 or self.n_bags < 0 or self.response_dim <= 0 or self.prefix_dim < 0:
            raise ConfigError("counts and widths must be nonnegative (response_dim > 0)")
        if self.target_rule not in ("count", "binary"):
            raise ConfigError("target_rule must be 'count' or 'binary'")
        object.__setattr__(self, "bag_size_range", (int(lo), int(hi)))

    def to_dict(self):
        d = asdict(self)
        d["bag_size_range"] = list(self.bag_size_range)
        return d


def generate_synthetic(cfg):
    """Bags of N(0, I) embeddings with planted relevant instances.

    Each instance is relevant with probability ``relevance_rate``.  A bag with
    at least one relevant instance is topped up to ``redundancy`` relevant
    instances (or all of them, if the bag is smaller).  Relevant instances get
    ``signal_strength`` times a fixed unit direction added to their response
    embedding.  Prefix embeddings are pure noise.

    Targets are ``target_scale * count + noise_sigma * N(0, 1)`` for the
    ``count`` rule, or the MIL bag label for the ``binary`` rule.
    """
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal(cfg.response_dim)
    direction /= np.linalg.norm(direction)
    lo, hi = cfg.bag_size_range
    width = len(str(max(cfg.n_bags - 1, 0)))
    bags = []
    for b in range(cfg.n_bags):
        n = int(rng.integers(lo, hi + 1))
        isl = rng.random(n) < cfg.relevance_rate
        count = int(isl.sum())
        if 0 < count < cfg.redundancy:
            extra = rng.choice(np.flatnonzero(~isl), size=min(cfg.redundancy, n) - count, replace=False)
            isl[extra] = True
        count = int(isl.sum())
        if cfg.redundancy >= 2 and count > 0:
            assert count >= min(cfg.redundancy, n)
        response = rng.standard_normal((n, cfg.response_dim))
        response += cfg.signal_strength * isl[:, None] * direction
        prefix = rng.standard_normal((n, cfg.prefix_dim)) if cfg.prefix_dim > 0 else None
        noise = rng.standard_normal()
        if cfg.target_rule == "count":
            target = cfg.target_scale * count + cfg.noise_sigma * noise
        else:
            target = float(bag_label_oracle(isl.astype(int)))
        bags.append(Bag(f"bag-{b:0{width}d}", response, target, prefix=prefix, isl=isl.astype(int)))
    return bags


# -- checkpoints ---------------------------------------------------------


def checkpoint_document(params):
    from .milmodel import buffer_shapes

    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": params.config.to_dict(),
        "buffers": {
            name: {"shape": list(shape), "data": params[name].reshape(-1).tolist()}
            for name, shape in buffer_shapes(params.config).items()
        },
    }


def params_from_document(doc):
    from .milmodel import ModelConfig, ModelParams, buffer_shapes

    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise SchemaError("checkpoint document lacks schema_version")
    if doc["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaError(f"unsupported checkpoint schema_version {doc['schema_version']!r}")
    try:
        config = ModelConfig.from_dict(doc["model_config"])
        shapes = buffer_shapes(config)
        buffers = {}
        for name, entry in doc["buffers"].items():
            shape = tuple(entry["shape"])
            if name in shapes and shape != shapes[name]:
                raise SchemaError(f"buffer {name!r} shape {shape} does not match config {shapes[name]}")
            buffers[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
        return ModelParams(config, buffers)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint: {exc}") from None


def save_checkpoint(params, path):
    Path(path).write_text(json.dumps(checkpoint_document(params)) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(params, config)``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataParseError(f"checkpoint is not valid JSON ({exc.msg})", exc.lineno) from None
    params = params_from_document(doc)
    return params, params.config
