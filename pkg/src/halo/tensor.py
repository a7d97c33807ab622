"""Dense float64 tensors with a tape-recorded reverse-mode autodiff.

Every primitive accepts either plain ``np.ndarray`` values or :class:`Var`
handles bound to a :class:`Tape`. With no ``Var`` among the inputs the
primitive is a pure numpy evaluation and nothing is recorded, which is how
reference-model and sampling passes run.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

HALT_MAGIC = b"HALT0001"
HALT_FLOAT64 = 1


class NumericalError(FloatingPointError):
    """A primitive produced NaN or Inf."""


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    fwd: Callable | None
    vjp: Callable | None
    value: np.ndarray
    requires_grad: bool


class Var:
    __slots__ = ("tape", "idx")
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.idx}, op={self.tape.nodes[self.idx].op}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive evaluations; rebuilt for every step."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def variable(self, value, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        _check_finite("leaf", arr)
        self.nodes.append(_Node("leaf", (), None, None, arr, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def _record(self, op, parents, fwd, vjp, value) -> Var:
        req = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(_Node(op, tuple(parents), fwd, vjp, value, req))
        return Var(self, len(self.nodes) - 1)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every node that requires them."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
        for i in range(loss.idx, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            pvals = [self.nodes[p].value for p in node.parents]
            pgrads = node.vjp(g, node.value, *pvals)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[p].requires_grad:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        return grads

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from its leaves (optionally substituted)."""
        leaves = leaves or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.fwd is None:
                values.append(np.array(leaves.get(i, node.value), dtype=np.float64))
            else:
                values.append(node.fwd(*[values[p] for p in node.parents]))
        return values


def grad(loss: Var, wrt: Var) -> np.ndarray:
    """Gradient of a scalar tape output with respect to one leaf."""
    g = loss.tape.backward(loss).get(wrt.idx)
    if g is None:
        return np.zeros_like(wrt.value)
    return g


def value_and_grad(fn: Callable[[Var], Var], params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``fn`` on a fresh tape and differentiate it w.r.t. ``params``."""
    tape = Tape()
    theta = tape.variable(params)
    loss = fn(theta)
    if not isinstance(loss, Var):
        # fn never touched theta
        return float(np.asarray(loss)), np.zeros_like(theta.value)
    return float(loss.value), grad(loss, theta)


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value produced by {op}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _apply(op: str, fwd: Callable, vjp: Callable, *inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            tape = x.tape
            break
    if tape is None:
        out = fwd(*[np.asarray(x, dtype=np.float64) for x in inputs])
        _check_finite(op, out)
        return out
    parents = []
    for x in inputs:
        if isinstance(x, Var):
            if x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            parents.append(x.idx)
        else:
            parents.append(tape.variable(x, requires_grad=False).idx)
    out = fwd(*[tape.nodes[p].value for p in parents])
    _check_finite(op, out)
    return tape._record(op, parents, fwd, vjp, out)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# elementwise arithmetic


def add(a, b):
    return _apply(
        "add",
        lambda x, y: x + y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def sub(a, b):
    return _apply(
        "sub",
        lambda x, y: x - y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a,
        b,
    )


def mul(a, b):
    if np.isscalar(b):
        return scale(a, float(b))
    if np.isscalar(a):
        return scale(b, float(a))
    return _apply(
        "mul",
        lambda x, y: x * y,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def scale(a, c: float):
    c = float(c)
    return _apply("scale", lambda x: x * c, lambda g, out, x: (g * c,), a)


# shape manipulation


def reshape(a, shape):
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda x: x.reshape(shape),
        lambda g, out, x: (g.reshape(x.shape),),
        a,
    )


def getitem(a, index):
    """Basic or integer-array indexing; gradients scatter-add back."""

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _apply("getitem", lambda x: np.array(x[index], dtype=np.float64), vjp, a)


def concat(parts: Sequence, axis: int = -1):
    parts = list(parts)
    vals = [_value(p) for p in parts]
    ax = axis % vals[0].ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g, out, *xs):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(xs))
        )

    return _apply("concat", lambda *xs: np.concatenate(xs, axis=ax), vjp, *parts)


def stack(parts: Sequence, axis: int = 0):
    parts = list(parts)

    def vjp(g, out, *xs):
        return tuple(np.take(g, k, axis=axis) for k in range(len(xs)))

    return _apply("stack", lambda *xs: np.stack(xs, axis=axis), vjp, *parts)


# network primitives


def affine(x, weights, bias):
    """``y = W x + b``; ``x`` may be a vector or a batch of row vectors."""
    xv, wv, bv = _value(x), _value(weights), _value(bias)
    if wv.ndim != 2 or bv.shape != (wv.shape[0],) or xv.shape[-1] != wv.shape[1]:
        raise ValueError(
            f"affine shape mismatch: x {xv.shape}, W {wv.shape}, b {bv.shape}"
        )

    def fwd(x, w, b):
        return x @ w.T + b

    def vjp(g, out, x, w, b):
        gx = g @ w
        if x.ndim == 1:
            gw = np.outer(g, x)
            gb = g
        else:
            gw = g.T @ x
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _apply("affine", fwd, vjp, x, weights, bias)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # x - log(1+e^x) for x<0, -log(1+e^-x) for x>=0
    return np.where(x < 0, x - np.log1p(np.exp(np.minimum(x, 0.0))), -np.log1p(np.exp(-np.maximum(x, 0.0))))


def sigmoid(a):
    return _apply("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),), a)


def nonlinearity(a):
    """SiLU, ``x * sigmoid(x)``."""

    def vjp(g, out, x):
        s = _sigmoid(x)
        return (g * (s + x * s * (1.0 - s)),)

    return _apply("silu", lambda x: x * _sigmoid(x), vjp, a)


def log_sigmoid(a):
    """Numerically stable ``log(sigmoid(x))``; scalars in, scalars out."""
    if not isinstance(a, Var):
        arr = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("log_sigmoid of non-finite input")
        out = _log_sigmoid(arr)
        return float(out) if arr.ndim == 0 else out
    return _apply("log_sigmoid", _log_sigmoid, lambda g, out, x: (g * _sigmoid(-x),), a)


def sq_norm(a):
    """Sum of squared elements."""
    return _apply(
        "sq_norm",
        lambda x: np.array(np.sum(x * x)),
        lambda g, out, x: (2.0 * g * x,),
        a,
    )


def total(a):
    return _apply(
        "sum",
        lambda x: np.array(np.sum(x)),
        lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),),
        a,
    )


def sum_sq_rows(a):
    """Per-row sum of squares of a batch (first axis kept)."""

    def fwd(x):
        return np.sum(x.reshape(x.shape[0], -1) ** 2, axis=1)

    def vjp(g, out, x):
        return (2.0 * x * g.reshape((-1,) + (1,) * (x.ndim - 1)),)

    return _apply("sum_sq_rows", fwd, vjp, a)


# parameter vectors


@dataclass
class ParamVector:
    """Flat parameter storage with named, disjoint, covering blocks."""

    data: np.ndarray
    layout: dict[str, tuple[int, int, tuple[int, ...]]] = field(default_factory=dict)

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "ParamVector":
        layout = {}
        offset = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            layout[name] = (offset, offset + n, tuple(shape))
            offset += n
        return cls(np.zeros(offset), layout)

    def __len__(self):
        return self.data.size

    def block(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout[name]
        return self.data[start:stop].reshape(shape)

    def set_block(self, name: str, value) -> None:
        start, stop, shape = self.layout[name]
        self.data[start:stop] = np.asarray(value, dtype=np.float64).reshape(-1)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), dict(self.layout))


def param_block(theta, layout, name: str):
    """Slice a named block out of a flat vector or a tape variable."""
    start, stop, shape = layout[name]
    if isinstance(theta, Var):
        return reshape(getitem(theta, slice(start, stop)), shape)
    return np.asarray(theta)[start:stop].reshape(shape)


# optimizer


class Adam:
    """Adaptive-moment first-order optimizer with bias correction."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        if params.shape != grad.shape or params.shape != self.m.shape:
            raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {self.m.shape}")
        _check_finite("gradient", grad)
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# HALT tensor file format


def encode_halt(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    buf = io.BytesIO()
    buf.write(HALT_MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<B", HALT_FLOAT64))
    buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_halt(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one HALT block starting at ``offset``; returns (array, end)."""
    if data[offset : offset + 8] != HALT_MAGIC:
        raise ValueError("bad HALT magic")
    pos = offset + 8
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    (dtype,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if dtype != HALT_FLOAT64:
        raise ValueError(f"unsupported HALT dtype {dtype}")
    n = math.prod(dims)
    end = pos + 8 * n
    if end > len(data):
        raise ValueError("truncated HALT payload")
    arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
    return arr, end


def save_halt(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_halt(array))


def load_halt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, end = decode_halt(data)
    if end != len(data):
        raise ValueError("trailing bytes after HALT block")
    return arr
