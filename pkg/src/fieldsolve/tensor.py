"""Dense tensors with a reverse-mode gradient tape.

Values are plain numpy arrays; gradients are tracked on an explicit,
per-forward-pass :class:`Tape`. Each recorded node stores the operation
name, the node ids of its inputs, and a backward closure over whatever
values the op saved. Nodes are appended in execution order, so inputs
always precede consumers and a single reverse sweep propagates
gradients, accumulating (never overwriting) into shared inputs.

``custom_grad`` lets implicit solvers (conjugate gradient, causal scans)
register a hand-derived backward rule instead of differentiating through
their iterations.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_dtype(name: str) -> None:
    """Select the global value dtype ("float64" default, "float32" for training)."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class Tensor:
    """A dense array plus an optional handle onto the active tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self._tape: Optional["Tape"] = None
        self._node: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all real work happens in the op functions below
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE: Optional["Tape"] = None


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager; ops executed inside record themselves.
    ``backward(root)`` runs the reverse sweep, after which ``grad(t)``
    returns the accumulated gradient of any participating tensor.
    """

    def __init__(self):
        # node id -> (op name, parent ids, backward closure or None for leaves)
        self._nodes: list[tuple[str, tuple, Optional[Callable]]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, name: str, parents: tuple, backward: Optional[Callable]) -> int:
        self._nodes.append((name, parents, backward))
        return len(self._nodes) - 1

    def _node_of(self, t: Tensor) -> Optional[int]:
        """Node id of ``t`` on this tape, registering gradient leaves lazily."""
        if t._tape is self and t._node is not None:
            return t._node
        if t.requires_grad:
            t._tape = self
            t._node = self._append("leaf", (), None)
            return t._node
        return None

    def backward(self, root: Tensor, seed=None) -> None:
        if root._tape is not self or root._node is None:
            raise ValueError("backward root was not recorded on this tape")
        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ShapeError("backward seed shape must match the root tensor")
        self._grads = {root._node: seed}
        for node_id in range(len(self._nodes) - 1, -1, -1):
            g = self._grads.get(node_id)
            if g is None:
                continue
            name, parents, backward = self._nodes[node_id]
            if backward is None:
                continue
            parent_grads = backward(g)
            if len(parent_grads) != len(parents):
                raise ContractError(
                    f"backward rule of {name!r} returned {len(parent_grads)} "
                    f"gradients for {len(parents)} inputs"
                )
            for pid, pg in zip(parents, parent_grads):
                if pid is None or pg is None:
                    continue
                slot = self._grads.get(pid)
                self._grads[pid] = pg if slot is None else slot + pg

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        if t._tape is not self or t._node is None:
            return None
        return self._grads.get(t._node)


def active_tape() -> Optional[Tape]:
    return _ACTIVE


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable) -> Tensor:
    """Wrap ``out_data``, recording ``backward`` if any input is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out._tape = None
    out._node = None
    tape = _ACTIVE
    if tape is None:
        out.requires_grad = False
        return out
    parents = tuple(tape._node_of(x) for x in inputs)
    if all(p is None for p in parents):
        out.requires_grad = False
        return out
    out.requires_grad = True
    out._tape = tape
    out._node = tape._append(name, parents, backward)
    return out


def custom_grad(inputs: Sequence[Tensor], value: np.ndarray,
                backward_rule: Callable, name: str = "custom") -> Tensor:
    """Record ``value`` as the output of an opaque op over ``inputs``.

    ``backward_rule(upstream)`` must return one gradient (or None) per
    declared input; a wrong arity raises :class:`ContractError` during
    the reverse sweep.
    """
    inputs = [astensor(x) for x in inputs]
    value = np.asarray(value, dtype=_default_dtype)

    def backward(g):
        grads = backward_rule(g)
        if not isinstance(grads, (tuple, list)):
            raise ContractError(f"custom rule {name!r} must return a sequence of gradients")
        return list(grads)

    return _record(name, inputs, value, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _record("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record("mul", (a, b), out, backward)


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _record("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = astensor(a)

    def backward(g):
        return (-g,)

    return _record("neg", (a,), -a.data, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", (a,), np.where(mask, a.data, 0.0), backward)


def _softplus(x: np.ndarray) -> np.ndarray:
    # x + log1p(exp(-x)) for x > 20, log1p(exp(x)) otherwise; the unused
    # where-lane is clamped so neither exp can overflow
    big = x > 20.0
    small_val = np.log1p(np.exp(np.where(big, 0.0, x)))
    big_val = x + np.log1p(np.exp(np.where(big, -x, 0.0)))
    return np.where(big, big_val, small_val)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = astensor(a)
    xd = a.data

    def backward(g):
        return (g * _sigmoid(xd),)

    return _record("softplus", (a,), _softplus(xd), backward)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", (a,), s, backward)


def silu(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    xd = a.data

    def backward(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return _record("silu", (a,), xd * s, backward)


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record("exp", (a,), out, backward)


def log(a) -> Tensor:
    a = astensor(a)
    xd = a.data

    def backward(g):
        return (g / xd,)

    return _record("log", (a,), np.log(xd), backward)


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _record("sqrt", (a,), out, backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    a = astensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return _record("clamp", (a,), np.clip(a.data, lo, hi), backward)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", (a,), out, backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([shape[ax] for ax in axis]))
    else:
        count = shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _record("mean", (a,), out, backward)


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T, ad.T @ g)

    return _record("matmul", (a, b), ad @ bd, backward)


def transpose(a) -> Tensor:
    a = astensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def backward(g):
        return (g.T.copy(),)

    return _record("transpose", (a,), a.data.T.copy(), backward)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _record("reshape", (a,), a.data.reshape(shape), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return list(np.split(g, splits, axis=axis))

    return _record("concat", tuple(parts), out, backward)


def gather(a, index) -> Tensor:
    """Select rows ``a[index]`` along axis 0; backward scatter-adds."""
    a = astensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise ShapeError("gather index out of range")
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record("gather", (a,), a.data[index], backward)


def gather_cols(a, index) -> Tensor:
    """Select columns ``a[:, index]`` of a 2-D tensor."""
    a = astensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_cols expects a 2-D tensor")
    index = np.asarray(index, dtype=np.int64)
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out.T, index, g.T)
        return (out,)

    return _record("gather_cols", (a,), a.data[:, index], backward)


def scatter_add(values, index, size: int) -> Tensor:
    """out[i] = sum of values[k] over k with index[k] == i (axis 0)."""
    values = astensor(values)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != values.data.shape[0]:
        raise ShapeError("scatter_add index length must match values")
    out = np.zeros((size,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out, index, values.data)

    def backward(g):
        return (g[index],)

    return _record("scatter_add", (values,), out, backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record("softmax", (a,), s, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, backward)


def cumsum(a, axis: int = 0) -> Tensor:
    a = astensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record("cumsum", (a,), np.cumsum(a.data, axis=axis), backward)


# ---------------------------------------------------------------------------
# grid-specific linear ops

#: direction vectors (drow, dcol) for the 8 sweep directions
GRID_DIRECTIONS = {
    "e": (0, 1), "w": (0, -1), "s": (1, 0), "n": (-1, 0),
    "se": (1, 1), "sw": (1, -1), "ne": (-1, 1), "nw": (-1, -1),
}

_OPPOSITE = {"e": "w", "w": "e", "s": "n", "n": "s",
             "se": "nw", "nw": "se", "sw": "ne", "ne": "sw"}


def _grid_scan_forward(x: np.ndarray, direction: str) -> np.ndarray:
    """Exclusive sum of the cells strictly behind each cell along a sweep.

    out[p] = sum_{k>=1} x[p - k*d] for direction vector d, zero where the
    trail leaves the grid. Cardinal sweeps are shifted cumsums; diagonal
    sweeps use the one-row recurrence out[i] = out[i-1]+x[i-1] shifted by
    the column component.
    """
    h, w = x.shape
    dr, dc = GRID_DIRECTIONS[direction]
    out = np.zeros_like(x)
    if dr == 0:  # row-wise
        if dc == 1:
            out[:, 1:] = np.cumsum(x[:, :-1], axis=1)
        else:
            out[:, :-1] = np.cumsum(x[:, :0:-1], axis=1)[:, ::-1]
        return out
    if dc == 0:  # column-wise
        if dr == 1:
            out[1:, :] = np.cumsum(x[:-1, :], axis=0)
        else:
            out[:-1, :] = np.cumsum(x[:0:-1, :], axis=0)[::-1, :]
        return out
    # diagonal: flip into the (dr=1, dc=1) orientation, recurse rows
    xx = x[::dr, ::dc]
    acc = np.zeros_like(xx)
    for i in range(1, h):
        acc[i, 1:] = acc[i - 1, :-1] + xx[i - 1, :-1]
    return acc[::dr, ::dc]


def grid_scan(a, direction: str) -> Tensor:
    """Tape op for directional exclusive sums on an H x W grid.

    Linear, so the backward pass is the same sweep run the opposite way.
    """
    a = astensor(a)
    if a.ndim != 2:
        raise ShapeError("grid_scan expects a 2-D (H, W) tensor")
    if direction not in GRID_DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    opposite = _OPPOSITE[direction]

    def backward(g):
        return (_grid_scan_forward(g, opposite),)

    return _record("grid_scan", (a,), _grid_scan_forward(a.data, direction), backward)


def conv3x3_depthwise(x, kernels) -> Tensor:
    """Per-channel 3x3 correlation with replicate padding.

    x: (K, H, W); kernels: (K, 3, 3). Used for learned Laplacian stencils
    and gradient filters.
    """
    x, kernels = astensor(x), astensor(kernels)
    if x.ndim != 3 or kernels.data.shape != (x.data.shape[0], 3, 3):
        raise ShapeError(
            f"conv3x3_depthwise expects x(K,H,W) and kernels(K,3,3); "
            f"got {x.shape} and {kernels.shape}")
    k, h, w = x.data.shape
    xd, kd = x.data, kernels.data
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(xd)
    for dr in range(3):
        for dc in range(3):
            out += kd[:, dr, dc][:, None, None] * xp[:, dr:dr + h, dc:dc + w]

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for dr in range(3):
            for dc in range(3):
                gp[:, dr:dr + h, dc:dc + w] += kd[:, dr, dc][:, None, None] * g
                gk[:, dr, dc] = (g * xp[:, dr:dr + h, dc:dc + w]).sum(axis=(1, 2))
        # fold the replicate padding back onto the border cells
        gp[:, 1, :] += gp[:, 0, :]
        gp[:, h, :] += gp[:, h + 1, :]
        gp[:, :, 1] += gp[:, :, 0]
        gp[:, :, w] += gp[:, :, w + 1]
        return (gp[:, 1:h + 1, 1:w + 1], gk)

    return _record("conv3x3", (x, kernels), out, backward)
