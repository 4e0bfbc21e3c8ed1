"""Dense tensors with a reverse-mode gradient tape, backed by numpy.

Every op takes :class:`Tensor` operands and returns a new tensor. When any
operand requires grad (and grad mode is on) the result carries a
:class:`Node` describing how to push cotangents back to its parents.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one shape must be a trailing suffix of the other (a missing leading
batch dimension, e.g. a bias of shape ``(d,)`` against ``(B, T, d)``).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

float32 = np.float32
float64 = np.float64
_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One tape entry: the op that produced a tensor and its backward rule."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        # backward(grad) -> tuple of cotangents, one per parent (None = skip)
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, n_parents={len(self.parents)})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "version", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.version = 0
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, values) -> None:
        """In-place overwrite used by optimizers and loaders; bumps ``version``."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {values.shape} into tensor of shape {self.data.shape}")
        self.data[...] = values
        self.version += 1

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=-1) -> "Tensor":
        return mean(self, axis)

    # -- reverse mode -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor requiring grad.

        ``self`` must hold exactly one element. Calling twice without
        zeroing accumulates.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        cot = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype)}
        for t in reversed(order):
            g = cot.pop(id(t), None)
            if g is None:
                continue
            if t.node is None or t._retain:
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t.node is None:
                continue
            for parent, pg in zip(t.node.parents, t.node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = cot.get(key)
                cot[key] = pg if prev is None else prev + pg


def _raise_item(t):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


# -- construction helpers ----------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward)
    return out


def _check_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape) if lead else g


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{op}: non-finite input")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_dtype(a, b, "add")
    _check_suffix(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_dtype(a, b, "sub")
    _check_suffix(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = _lift(a, np.float32)
        return _result(a.data * a.dtype.type(s), "scale", (a,), lambda g: (g * a.dtype.type(s),))
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_dtype(a, b, "mul")
    _check_suffix(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    _check_finite(x.data, "log")
    if np.any(x.data <= 0):
        raise NumericDomainError("log: non-positive input")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    inner = c * xd * (1 + k * x2)
    th = np.tanh(inner)
    half = xd.dtype.type(0.5)
    y = half * xd * (1 + th)

    def backward(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (half * (1 + th) + half * xd * (1 - th * th) * dinner),)

    return _result(y, "gelu", (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` either 2-D or sharing ``a``'s leading dims."""
    _check_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} need rank >= 2")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, "matmul", (a, b), backward)


# -- reductions / normalisation -----------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    y = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(y, dtype=x.dtype), "sum", (x,), backward)


def mean(x: Tensor, axis: int = -1) -> Tensor:
    n = x.shape[axis]
    y = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.dtype.type(n),)

    return _result(y, "mean", (x,), backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes excluded entries."""
    _check_finite(x.data, "softmax")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, "log_softmax", (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[target]``.

    Returns a tensor of shape ``logits.shape[:-1]``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} and {targets.shape} do not conform")
    _check_finite(logits.data, "cross_entropy")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"cross_entropy: target id outside [0, {V})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1,
        )
        return (grad * g[..., None],)

    return _result(nll, "cross_entropy", (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_dtype(x, gamma, "layer_norm")
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: shapes {x.shape} and {gamma.shape} do not conform")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(y, "layer_norm", (x, gamma, beta), backward)


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {x.shape} and {shape} do not conform") from None
    return _result(y, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty input")
    first = tensors[0]
    ax = axis % first.ndim
    for t in tensors[1:]:
        _check_dtype(first, t, "concat")
        if t.ndim != first.ndim or t.shape[:ax] + t.shape[ax + 1:] != first.shape[:ax] + first.shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {first.shape} and {t.shape} do not conform")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0 else
                   reshape(t, t.shape + (1,)) for t in tensors], axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    y = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(y, copy=True), "take", (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table shape {table.shape} is not 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: id outside [0, {table.shape[0]})")
    y = table.data[ids]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(y, "embedding", (table,), backward)


def where_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask (shape suffix rule applies)."""
    m = np.asarray(keep, dtype=x.dtype)
    return mul(x, Tensor(m))
