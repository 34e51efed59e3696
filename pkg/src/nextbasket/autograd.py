"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A `Tape` records every differentiable op executed inside its `with`
block (a Wengert list). `backward` replays the list in reverse and
accumulates gradients into the participating tensors, summing when a
tensor feeds several ops (tied embeddings rely on this). Outside a tape
the same ops run as plain numpy with zero recording overhead.

Elementwise/reduction-heavy forwards and backwards (GELU, softmax,
log-softmax, layer norm) dispatch to the active kernel backend; matmul
stays on numpy/BLAS. Shapes broadcast by numpy's rules; backward sums
gradients down to each operand's shape.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import BoundsError, ContractError, ShapeError


class Tensor:
    """A dense float64 array plus a gradient buffer.

    `requires_grad` marks leaves (parameters); op outputs get it set
    automatically while a tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not a recorded op; use mul + power manually")

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    """A tensor that never receives gradients (masks, labels, weights)."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of ops; one exclusive training context."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def backward(tape, loss, store=None):
    """Accumulate d(loss)/d(leaf) into every leaf tensor reached by `tape`.

    `loss` must be a scalar produced by an op recorded on `tape`. When a
    ParameterStore is given, every registered parameter ends up with a
    gradient buffer: reachable ones get the accumulated sum, unreachable
    ones get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    out_ids = {id(node.out) for node in tape.nodes}
    if id(loss) not in out_ids:
        raise ContractError("backward before forward: loss was not recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        tensors.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                tensors[key] = parent

    # whatever is left was never an op output on this tape: the leaves
    for key, g in grads.items():
        leaf = tensors[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    if store is not None:
        for _, param in store.items():
            if param.grad is None:
                param.grad = np.zeros_like(param.data)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and broadcast ops
# ---------------------------------------------------------------------------

def add(a, b):
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b_data, a_data.shape),
                                           _unbroadcast(g * a_data, b_data.shape)))


def neg(a):
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def scale(a, s):
    s = float(s)
    return _record(Tensor(a.data * s), (a,), lambda g: (g * s,))


def shift(a, c):
    c = float(c)
    return _record(Tensor(a.data + c), (a,), lambda g: (g,))


def log(a):
    a_data = a.data
    return _record(Tensor(np.log(a_data)), (a,), lambda g: (g / a_data,))


def sigmoid(a):
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(Tensor(np.clip(a.data, lo, hi)), (a,), lambda g: (g * inside,))


def gelu(a):
    x = a.data
    out = Tensor(_kernels.active.gelu_fwd(x))
    return _record(out, (a,), lambda g: (_kernels.active.gelu_bwd(x, g),))


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _record(Tensor(a.data * keep), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = Tensor(a.data @ b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)
        gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(Tensor(np.transpose(a.data, axes)), (a,),
                   lambda g: (np.transpose(g, inverse),))


def swap_axes(a, i, j):
    return _record(Tensor(np.swapaxes(a.data, i, j)), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape):
    old = a.data.shape
    return _record(Tensor(a.data.reshape(shape)), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(Tensor(a.data[index]), (a,), bwd)


def gather(table, ids, name="table"):
    """Row lookup: out[...] = table[ids[...]]; scatter-add on backward."""
    ids = np.asarray(ids)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise BoundsError(name, bad, n)
    shape = table.data.shape

    def bwd(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(Tensor(table.data[ids]), (table,), bwd)


def rows_at(x, positions):
    """out[b] = x[b, positions[b]] for a (B, T, ...) tensor."""
    positions = np.asarray(positions)
    batch = np.arange(x.data.shape[0])
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, (batch, positions), g)
        return (gx,)

    return _record(Tensor(x.data[batch, positions]), (x,), bwd)


def pick_per_row(x, cols):
    """out[r] = x[r, cols[r]] for a 2-D tensor."""
    cols = np.asarray(cols)
    rows = np.arange(x.data.shape[0])
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(Tensor(x.data[rows, cols]), (x,), bwd)


def masked_fill(a, mask, value):
    """Replace entries where `mask` is True with `value` (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    return _record(Tensor(np.where(mask, value, a.data)), (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g_k = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_k, shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _move_last(data, axis):
    return data if axis in (-1, data.ndim - 1) else np.moveaxis(data, axis, -1)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`; rows sum to 1."""
    moved = axis not in (-1, a.ndim - 1)
    x = _move_last(a.data, axis)
    y = _kernels.active.softmax_fwd(np.ascontiguousarray(x))

    def bwd(g):
        gm = _move_last(g, axis) if moved else g
        gx = _kernels.active.softmax_bwd(y, np.ascontiguousarray(gm))
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    out_data = np.moveaxis(y, -1, axis) if moved else y
    return _record(Tensor(out_data), (a,), bwd)


def log_softmax(a, axis=-1):
    moved = axis not in (-1, a.ndim - 1)
    x = _move_last(a.data, axis)
    y = _kernels.active.log_softmax_fwd(np.ascontiguousarray(x))

    def bwd(g):
        gm = _move_last(g, axis) if moved else g
        gx = _kernels.active.log_softmax_bwd(y, np.ascontiguousarray(gm))
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    out_data = np.moveaxis(y, -1, axis) if moved else y
    return _record(Tensor(out_data), (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gain.data.shape != a.data.shape[-1:] or bias.data.shape != a.data.shape[-1:]:
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    y, xhat, inv_std = _kernels.active.layer_norm_fwd(
        np.ascontiguousarray(a.data), gain.data, bias.data, eps)

    def bwd(g):
        gx, ggain, gbias = _kernels.active.layer_norm_bwd(xhat, inv_std, gain.data,
                                                          np.ascontiguousarray(g))
        return gx, ggain, gbias

    return _record(Tensor(y), (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named learnable tensors plus their gradient buffers and an init rng.

    Names are unique; gradient buffers always match parameter shapes.
    One store backs one training context.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self._params: dict[str, Tensor] = {}

    def create(self, name, shape, init="normal", std=0.02):
        """Register a new parameter; init is 'normal' (truncated at 2 std), 'zeros' or 'ones'."""
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = _truncated_normal(self.rng, shape, std)
        else:
            raise ContractError(f"unknown init {init!r}")
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def add(self, name, data):
        """Register an externally produced array (checkpoint load)."""
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def ensure_grads(self):
        for p in self._params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _truncated_normal(rng, shape, std):
    """Normal(0, std) with draws beyond 2 std redrawn."""
    data = rng.normal(0.0, std, size=shape)
    bad = np.abs(data) > 2.0 * std
    while bad.any():
        data[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(data) > 2.0 * std
    return data
