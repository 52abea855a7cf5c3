"""Dense float64 tensors with a reverse-mode differentiation tape.

Every op that touches a tensor with ``requires_grad`` records a node holding
its inputs and a vector-Jacobian closure. Nodes carry a monotone recording
id; :class:`Tape` orders the reachable subgraph of a loss by that id, and
:func:`backward` walks it in exact reverse recording order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.id = next(_node_counter)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r})"


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = _node

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- operator sugar ---------------------------------------------------
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

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(out, requires_grad=True, _node=Node(op, inputs, vjp))
    return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(map(str, shapes))}") from None


# ---- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# ---- elementwise unary ----------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                       1.0 / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "log_sigmoid", (a,), lambda g: (g * sig_neg,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    if lo_ > hi_:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _make(np.clip(a.data, lo_, hi_), "clamp", (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a.shape, b.shape)
    pick_a = a.data >= b.data

    def vjp(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.maximum(a.data, b.data), "maximum", (a, b), vjp)


def stop_gradient(a) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(as_tensor(a).data)


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    _broadcast_shape("where", cond.shape, a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(np.where(cond, a.data, b.data), "where", (a, b), vjp)


# ---- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = g[..., None, :] @ np.swapaxes(bd, -1, -2)
            ga = ga[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = (np.swapaxes(ad, -1, -2) @ g[..., :, None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), vjp)


# ---- reductions -----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_back(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, "sum", (a,), lambda g: (_expand_back(g, a.shape, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, "mean", (a,), lambda g: (_expand_back(g, a.shape, axes, keepdims) / n,))


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the count, not count - 1)."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered ** 2).mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        return (_expand_back(g, a.shape, axes, keepdims) * (2.0 / n) * centered,)

    return _make(out, "var", (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = m + np.log(tot)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = s / tot

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _make(out, "logsumexp", (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, "layer_norm", (x, gain, bias), vjp)


# ---- indexing and shape ---------------------------------------------------
def embedding(table, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], "embedding", (table,), vjp)


def take(a, index) -> Tensor:
    """Numpy-style indexing (basic or advanced) with a scatter-add backward."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"take: {exc} for shape {a.shape}") from None

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out, copy=True), "take", (a,), vjp)


def gather_last(a, ids) -> Tensor:
    """``out[...] = a[..., ids[...]]``; picks one entry along the last axis."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: ids shape {ids.shape} vs input {a.shape}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make(out, "gather_last", (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


# ---- tape and backward ----------------------------------------------------
class Tape:
    """Recorded primitive ops reachable from an output, in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack_ = [out]
        while stack_:
            t = stack_.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack_.extend(node.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    if loss.node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.asarray(grad, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        out_grad = grads.pop(node.id, None)
        if out_grad is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(out_grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                key = inp.node.id
                grads[key] = g if key not in grads else grads[key] + g
            else:
                inp.grad = np.array(g, dtype=DTYPE) if inp.grad is None else inp.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


Tensor.backward = lambda self, grad=None: backward(self, grad)
