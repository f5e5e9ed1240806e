"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

A :class:`Tape` records every operation whose inputs require gradients while
it is the active tape.  Nodes are appended in creation order, so the tape is
already topologically sorted and :func:`backward` only has to walk it in
reverse.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape():
    ...     loss = x * x
    >>> backward(loss)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateMaskError, MhimilError, RankError, ShapeError

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Records operations for one forward pass; consumed by :func:`backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """A float64 array, optionally a leaf or node of the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self._tape = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data, parents, backward_fn):
    """Wrap ``data`` as the output of an op and record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out.tape_id = len(tape.nodes)
    out._tape = tape
    out._parents = tuple(parents)
    out._backward = backward_fn
    tape.nodes.append(out)
    return out


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise RankError("backward requires a scalar loss", loss.shape)
    tape = loss._tape
    if tape is None:
        raise MhimilError("loss is not recorded on a tape")
    if tape.consumed:
        raise MhimilError("tape has already been consumed by backward()")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._tape is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
    for node in tape.nodes:
        node._parents = ()
        node._backward = None
    tape.nodes = []
    tape.consumed = True


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes do not broadcast", a.shape, b.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    return make_node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a):
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), _back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape", a.shape, shape) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a):
    """Transpose the two trailing axes."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def take(a, index):
    """Basic or fancy indexing; gradients scatter-add back into place."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(out, (a,), _back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None
    n = len(tensors)
    return make_node(
        out, tensors, lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis))
    )


def matmul(a, b):
    """Matrix product with numpy ``@`` semantics for operands of rank >= 1."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must have rank >= 1", a.shape, b.shape)
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul batch dimensions do not broadcast", a.shape, b.shape) from None

    def _back(g):
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if a.ndim == 1:
            ga = _unbroadcast(ga, (1,) * (ga.ndim - 2) + a2.shape).reshape(a.shape)
        else:
            ga = _unbroadcast(ga, a.shape)
        if b.ndim == 1:
            gb = _unbroadcast(gb, (1,) * (gb.ndim - 2) + b2.shape).reshape(b.shape)
        else:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_node(out, (a, b), _back)


def masked_softmax(logits, mask=None, axis=-1):
    """Softmax over the unmasked positions of ``axis``.

    ``mask`` is boolean, True where a position is excluded.  Excluded positions
    are left out of the normalisation (as if their logit were -inf) and come
    out as exact zeros.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("mask shape differs from logits", mask.shape, x.shape)
        keep = ~mask
    if x.size == 0 or not np.all(keep.any(axis=axis)):
        raise DegenerateMaskError("every position along the softmax axis is masked")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (logits,), _back)
