"""Bag-level regressor: projection, BiLSTM context encoder, masked attention pooling, linear head.

Masking acts only at the attention layer.  A masked instance still passes
through the BiLSTM, so it can influence its neighbours' context vectors, but
it receives exactly zero attention weight and so contributes nothing to the
pooled representation directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, EmptyBagError, ShapeError
from .numcore import (
    Tensor,
    concat,
    lstm_scan,
    masked_softmax,
    matmul,
    mean,
    reshape,
    square,
    stack,
    swap_last,
    take,
    tanh,
)


@dataclass(frozen=True)
class ModelConfig:
    response_dim: int
    prefix_dim: int = 0
    proj_dim: int = 64
    lstm_hidden: int = 32
    attn_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("response_dim", "proj_dim", "lstm_hidden", "attn_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.prefix_dim < 0:
            raise ConfigError("prefix_dim must be >= 0")

    @property
    def input_dim(self):
        return self.response_dim + self.prefix_dim

    @property
    def dual(self):
        return self.prefix_dim > 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def buffer_shapes(config):
    """Ordered ``name -> shape`` map of every trainable buffer."""
    P, H, A = config.proj_dim, config.lstm_hidden, config.attn_dim
    shapes = {
        "proj.weight": (P, config.input_dim),
        "proj.bias": (P,),
    }
    for d in ("lstm_fwd", "lstm_bwd"):
        shapes[f"{d}.weight_ih"] = (4 * H, P)
        shapes[f"{d}.weight_hh"] = (4 * H, H)
        shapes[f"{d}.bias"] = (4 * H,)
    shapes["attn.V"] = (A, 2 * H)
    shapes["attn.w"] = (A,)
    shapes["head.weight"] = (2 * H,)
    shapes["head.bias"] = ()
    return shapes


class ModelParams:
    """Named float64 buffers for one model, with shapes fixed by its config."""

    def __init__(self, config, buffers):
        self.config = config
        expected = buffer_shapes(config)
        if set(buffers) != set(expected):
            missing = sorted(set(expected) - set(buffers))
            extra = sorted(set(buffers) - set(expected))
            raise ShapeError(f"buffer names differ from config (missing {missing}, extra {extra})")
        self.buffers = {}
        for name, shape in expected.items():
            arr = np.array(buffers[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"buffer {name!r}", arr.shape, shape)
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"buffer {name!r} contains non-finite values")
            self.buffers[name] = arr

    def __getitem__(self, name):
        return self.buffers[name]

    def __iter__(self):
        return iter(self.buffers)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.buffers.items()})

    def leaves(self):
        """Fresh gradient-tracking leaf tensors sharing this model's storage."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.buffers.items()}

    def constants(self):
        return {k: Tensor(v) for k, v in self.buffers.items()}

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def init_params(config):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, seeded."""
    rng = np.random.default_rng(config.seed)
    buffers = {}
    for name, shape in buffer_shapes(config).items():
        if name.endswith("bias"):
            buffers[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            buffers[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, buffers)


@dataclass
class BagForward:
    prediction: float
    attention: np.ndarray
    hidden: np.ndarray
    output: Tensor  # scalar prediction node, on the tape when one is active


@dataclass
class BatchForward:
    predictions: Tensor  # (B,)
    attention: Tensor  # (B, T), zero on masked and padding positions
    hidden: Tensor  # (B, T, 2H)
    lengths: np.ndarray

    def bag_attention(self, i):
        return self.attention.data[i, : self.lengths[i]]


def _weights(params):
    if isinstance(params, ModelParams):
        return params.constants()
    return params


def bag_features(bag, config):
    """Per-instance input rows for this config: response, plus prefix in dual mode."""
    response = bag.response
    if response.shape[1] != config.response_dim:
        raise ShapeError(
            f"bag {bag.id!r} response width differs from model", response.shape, (None, config.response_dim)
        )
    if not config.dual:
        return response
    if bag.prefix is None or bag.prefix.shape[1] != config.prefix_dim:
        got = None if bag.prefix is None else bag.prefix.shape
        raise ShapeError(f"bag {bag.id!r} prefix width differs from model", got, (None, config.prefix_dim))
    return bag.features


def _pad(rows_list, width):
    lengths = np.array([len(r) for r in rows_list], dtype=np.intp)
    if len(lengths) == 0 or lengths.min() == 0:
        raise EmptyBagError("cannot encode an empty bag")
    T = int(lengths.max())
    x = np.zeros((len(rows_list), T, width))
    for i, rows in enumerate(rows_list):
        x[i, : len(rows)] = rows
    return x, lengths


def _reverse_index(lengths, T):
    idx = np.tile(np.arange(T), (len(lengths), 1))
    for i, n in enumerate(lengths):
        idx[i, :n] = np.arange(n - 1, -1, -1)
    return idx


def _bilstm(w, projected, lengths):
    """projected: Tensor (B, T, P), right-padded. Returns Tensor (B, T, 2H)."""
    B, T = projected.shape[:2]
    rev = _reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    x = stack([projected, take(projected, (rows, rev))])
    w_ih = stack([swap_last(w["lstm_fwd.weight_ih"]), swap_last(w["lstm_bwd.weight_ih"])])
    w_hh = stack([swap_last(w["lstm_fwd.weight_hh"]), swap_last(w["lstm_bwd.weight_hh"])])
    bias = stack([w["lstm_fwd.bias"], w["lstm_bwd.bias"]])
    h = lstm_scan(x, w_ih, w_hh, bias)
    h_fwd = h[0]
    h_bwd = take(h[1], (rows, rev))
    return concat([h_fwd, h_bwd], axis=-1)


def bilstm_forward(params, projected):
    """Run the BiLSTM over one sequence of projected vectors, shape (n, P) -> (n, 2H)."""
    w = _weights(params)
    projected = projected if isinstance(projected, Tensor) else Tensor(projected)
    if projected.ndim != 2 or projected.shape[0] == 0:
        raise EmptyBagError("bilstm_forward needs a nonempty (n, P) sequence")
    n = projected.shape[0]
    out = _bilstm(w, reshape(projected, (1,) + projected.shape), np.array([n]))
    return reshape(out, out.shape[1:])


def forward_batch(params, config, feature_rows, masks=None):
    """Encode a batch of bags given their per-instance feature rows.

    ``masks`` is an optional list (one entry per bag, ``None`` allowed) of
    boolean vectors, True at instances hidden from attention.
    """
    w = _weights(params)
    x, lengths = _pad(feature_rows, config.input_dim)
    B, T = x.shape[:2]
    exclude = np.arange(T)[None, :] >= lengths[:, None]
    if masks is not None:
        for i, m in enumerate(masks):
            if m is None:
                continue
            m = np.asarray(m, dtype=bool)
            if m.shape != (lengths[i],):
                raise ShapeError("mask length differs from bag size", m.shape, (lengths[i],))
            exclude[i, : lengths[i]] |= m
    projected = tanh(matmul(Tensor(x), swap_last(w["proj.weight"])) + w["proj.bias"])
    hidden = _bilstm(w, projected, lengths)
    logits = matmul(tanh(matmul(hidden, swap_last(w["attn.V"]))), w["attn.w"])
    attention = masked_softmax(logits, exclude)
    context = reshape(matmul(reshape(attention, (B, 1, T)), hidden), (B, hidden.shape[-1]))
    predictions = matmul(context, w["head.weight"]) + w["head.bias"]
    return BatchForward(predictions, attention, hidden, lengths)


def encode_bag(params, bag, mask=None, config=None):
    """Forward one bag. ``params`` is a ModelParams or a dict of Tensors (then pass ``config``)."""
    config = config or params.config
    out = forward_batch(params, config, [bag_features(bag, config)], None if mask is None else [mask])
    n = int(out.lengths[0])
    return BagForward(
        prediction=float(out.predictions.data[0]),
        attention=out.attention.data[0, :n].copy(),
        hidden=out.hidden.data[0, :n].copy(),
        output=out.predictions[0],
    )


def predict(params, bags, batch_size=32):
    """Unmasked predictions and per-bag attention for a list of bags (no tape).

    Bags are batched in length order to keep padding short; results come back
    in input order.
    """
    order = sorted(range(len(bags)), key=lambda i: len(bags[i]))
    preds = np.empty(len(bags))
    attention = [None] * len(bags)
    for start in range(0, len(bags), batch_size):
        idx = order[start : start + batch_size]
        out = forward_batch(params, params.config, [bag_features(bags[i], params.config) for i in idx])
        preds[idx] = out.predictions.data
        for j, i in enumerate(idx):
            attention[i] = out.bag_attention(j).copy()
    return preds, attention


def mse_loss(predictions, targets):
    """Mean squared error; ``predictions`` may be a Tensor or a list of scalar Tensors."""
    if isinstance(predictions, (list, tuple)):
        predictions = stack([p if isinstance(p, Tensor) else Tensor(p) for p in predictions]) if predictions else None
    elif not isinstance(predictions, Tensor):
        predictions = Tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions is None or predictions.size == 0 or predictions.shape != targets.shape:
        raise ShapeError("mse_loss needs equal nonzero lengths", () if predictions is None else predictions.shape, targets.shape)
    return mean(square(predictions - Tensor(targets)))
