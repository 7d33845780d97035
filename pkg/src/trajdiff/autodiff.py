"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation applied to tensors that live on it;
``backward`` replays the records in reverse to produce gradients for all
watched leaves. This is enough to express small MLPs, the losses, and a
multi-step sampling trajectory as one differentiable graph.

Broadcasting is deliberately restricted to scalar and trailing-dimension
broadcast so every vector-Jacobian rule stays auditable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rules."""


class DomainError(ValueError):
    """Raised for inputs outside an op's mathematical domain (sqrt/log)."""


class TapeError(ValueError):
    """Raised for structural misuse of a tape (mixed tapes, non-scalar root)."""


def _to_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Immutable dense f64 value, optionally recorded on a tape.

    ``data`` is the row-major array; ``nid`` is the tape node id when the
    tensor was produced by (or registered with) a tape, else None.
    """

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: "Tape | None" = None, nid: int | None = None):
        self.data = _to_array(data)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.nid}" if self.nid is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars multiply via the dedicated scalar-mul op
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return smul(float(other), self)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return smul(float(other), self)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return smul(1.0 / float(other), self)
        raise ShapeError("tensor/tensor division is not part of the op set")

    def __neg__(self):
        return smul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant (off-tape) tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("kind", "parents", "value", "ctx")

    def __init__(self, kind, parents, value, ctx):
        self.kind = kind
        self.parents = parents  # tuple of node ids, None for constant slots
        self.value = value  # forward ndarray
        self.ctx = ctx  # saved values needed by the vjp


class Tape:
    """Append-only record of ops; node ids are topological by construction."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_ids: list[int] = []

    def __len__(self):
        return len(self._nodes)

    @property
    def leaf_ids(self) -> tuple:
        return tuple(self._leaf_ids)

    def node(self, nid: int) -> _Node:
        return self._nodes[nid]

    def _record(self, kind, parents, value, ctx=None) -> int:
        self._nodes.append(_Node(kind, parents, value, ctx))
        return len(self._nodes) - 1

    def leaf(self, x) -> Tensor:
        """Register ``x`` as a watched input; its gradient is reported by backward."""
        arr = _to_array(x)
        nid = self._record("leaf", (), arr, None)
        self._leaf_ids.append(nid)
        return Tensor(arr, self, nid)

    def constant(self, x) -> Tensor:
        """Record ``x`` as a constant node (participates, gets no gradient report)."""
        arr = _to_array(x)
        nid = self._record("const", (), arr, None)
        return Tensor(arr, self, nid)


# ---------------------------------------------------------------------------
# shape rules

def _broadcast_out_shape(sa: tuple, sb: tuple, kind: str) -> tuple:
    """Allowed: equal shapes, scalar against anything, or trailing-dim broadcast."""
    if sa == sb:
        return sa
    if sa == () or sa == (1,):
        return sb
    if sb == () or sb == (1,):
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform "
                     "(only equal, scalar, or trailing-dimension broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if shape == (1,):
        return g.sum().reshape(1)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# op machinery

_VJPS: dict[str, Callable] = {}


def _resolve_tape(tensors: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _apply(kind: str, inputs: Sequence, value: np.ndarray, ctx=None) -> Tensor:
    """Wrap a computed forward value, recording a node when any input is taped."""
    tins = [as_tensor(x) for x in inputs]
    tape = _resolve_tape(tins)
    if tape is None:
        return Tensor(value)
    parents = []
    for t in tins:
        if t.tape is None:
            t = tape.constant(t.data)
        parents.append(t.nid)
    nid = tape._record(kind, tuple(parents), value, ctx)
    return Tensor(value, tape, nid)


def _defvjp(kind):
    def deco(fn):
        _VJPS[kind] = fn
        return fn
    return deco


# --- elementwise binary ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_out_shape(a.shape, b.shape, "add")
    return _apply("add", (a, b), a.data + b.data, (a.shape, b.shape))


@_defvjp("add")
def _(node, g):
    sa, sb = node.ctx
    return (_unbroadcast(g, sa), _unbroadcast(g, sb))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_out_shape(a.shape, b.shape, "sub")
    return _apply("sub", (a, b), a.data - b.data, (a.shape, b.shape))


@_defvjp("sub")
def _(node, g):
    sa, sb = node.ctx
    return (_unbroadcast(g, sa), _unbroadcast(-g, sb))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_out_shape(a.shape, b.shape, "mul")
    return _apply("mul", (a, b), a.data * b.data, (a.data, b.data))


@_defvjp("mul")
def _(node, g):
    da, db = node.ctx
    return (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape))


def smul(c: float, a) -> Tensor:
    """Multiply by a Python scalar constant (not a graph node)."""
    a = as_tensor(a)
    return _apply("smul", (a,), float(c) * a.data, float(c))


@_defvjp("smul")
def _(node, g):
    return (node.ctx * g,)


# --- matmul ---

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ok = (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0]) \
        or (len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]) \
        or (len(sa) == 1 and len(sb) == 2 and sa[0] == sb[0])
    if not ok:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    return _apply("matmul", (a, b), a.data @ b.data, (a.data, b.data))


@_defvjp("matmul")
def _(node, g):
    A, B = node.ctx
    if A.ndim == 2 and B.ndim == 2:
        return (g @ B.T, A.T @ g)
    if A.ndim == 2 and B.ndim == 1:  # (n,k)@(k,) -> (n,)
        return (np.outer(g, B), A.T @ g)
    # (k,)@(k,m) -> (m,)
    return (B @ g, np.outer(A, g))


# --- concat / slice / broadcast ---

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    nd = ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != nd:
            raise ShapeError(f"concat: mixed ranks {ts[0].shape} vs {t.shape}")
    value = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    return _apply("concat", ts, value, (axis, sizes))


@_defvjp("concat")
def _(node, g):
    axis, sizes = node.ctx
    splits = np.cumsum(sizes[:-1])
    return tuple(np.split(g, splits, axis=axis))


def tslice(a, key) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero tensor."""
    a = as_tensor(a)
    value = a.data[key]
    return _apply("slice", (a,), np.asarray(value, dtype=np.float64),
                  (a.shape, key))


@_defvjp("slice")
def _(node, g):
    shape, key = node.ctx
    out = np.zeros(shape)
    np.add.at(out, key, g)
    return (out,)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    _broadcast_out_shape(a.shape, tuple(shape), "broadcast")
    return _apply("broadcast", (a,), np.broadcast_to(a.data, shape).copy(), a.shape)


@_defvjp("broadcast")
def _(node, g):
    return (_unbroadcast(g, node.ctx),)


# --- reductions ---

def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    return _apply("sum", (a,), np.asarray(a.data.sum(axis=axis)), (a.shape, axis))


@_defvjp("sum")
def _(node, g):
    shape, axis = node.ctx
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return _apply("mean", (a,), np.asarray(a.data.mean(axis=axis)),
                  (a.shape, axis, n))


@_defvjp("mean")
def _(node, g):
    shape, axis, n = node.ctx
    if axis is None:
        return (np.broadcast_to(g / n, shape).copy(),)
    g = np.expand_dims(g / n, axis)
    return (np.broadcast_to(g, shape).copy(),)


# --- elementwise unary ---

def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _apply("abs", (a,), np.abs(a.data), np.sign(a.data))


@_defvjp("abs")
def _(node, g):
    return (g * node.ctx,)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _apply("square", (a,), a.data * a.data, a.data)


@_defvjp("square")
def _(node, g):
    return (2.0 * node.ctx * g,)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    y = np.sqrt(a.data)
    return _apply("sqrt", (a,), y, y)


@_defvjp("sqrt")
def _(node, g):
    return (g / (2.0 * node.ctx),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _apply("exp", (a,), y, y)


@_defvjp("exp")
def _(node, g):
    return (g * node.ctx,)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input")
    return _apply("log", (a,), np.log(a.data), a.data)


@_defvjp("log")
def _(node, g):
    return (g / node.ctx,)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _apply("tanh", (a,), y, y)


@_defvjp("tanh")
def _(node, g):
    return (g * (1.0 - node.ctx * node.ctx),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _apply("sigmoid", (a,), y, y)


@_defvjp("sigmoid")
def _(node, g):
    return (g * node.ctx * (1.0 - node.ctx),)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _apply("leaky_relu", (a,), a.data * slope, slope)


@_defvjp("leaky_relu")
def _(node, g):
    return (g * node.ctx,)


def softplus(a) -> Tensor:
    """Smooth relu-family activation, ln(1+exp(x)), computed stably."""
    a = as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _apply("softplus", (a,), y, s)


@_defvjp("softplus")
def _(node, g):
    return (g * node.ctx,)


OP_KINDS = tuple(sorted(_VJPS))


# ---------------------------------------------------------------------------
# backward pass

def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) for every watched leaf on the tape.

    ``output`` must be a scalar node. Leaves not reachable from it map to
    zero tensors of their own shape. Each node is visited exactly once, in
    reverse id order.
    """
    if output.tape is not tape or output.nid is None:
        raise TapeError("output is not a node on this tape")
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")

    grads: dict[int, np.ndarray] = {
        output.nid: np.ones_like(tape.node(output.nid).value)
    }
    for nid in range(output.nid, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.node(nid)
        if node.kind in ("leaf", "const"):
            if node.kind == "leaf":
                grads[nid] = g  # keep: reported below
            continue
        parent_grads = _VJPS[node.kind](node, g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out: dict[int, np.ndarray] = {}
    for lid in tape.leaf_ids:
        if lid in grads and lid <= output.nid:
            out[lid] = np.asarray(grads[lid], dtype=np.float64)
        else:
            out[lid] = np.zeros_like(tape.node(lid).value)
    return out


def op_forward(kind: str, inputs: Sequence, tape: "Tape | None" = None, **kw) -> Tensor:
    """Dispatch an op by kind name. Inputs off-tape are lifted as constants
    onto ``tape`` when one is given."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown op kind {kind!r}; known: {OP_KINDS}")
    ins = [as_tensor(x) for x in inputs]
    if tape is not None:
        ins = [t if t.tape is tape else
               (_raise_mixed(t) if t.tape is not None else tape.constant(t.data))
               for t in ins]
    return _DISPATCH[kind](ins, kw)


def _raise_mixed(t):
    raise TapeError("operand recorded on a different tape")


_DISPATCH = {
    "add": lambda ins, kw: add(*ins),
    "sub": lambda ins, kw: sub(*ins),
    "mul": lambda ins, kw: mul(*ins),
    "smul": lambda ins, kw: smul(kw["c"], ins[0]),
    "matmul": lambda ins, kw: matmul(*ins),
    "concat": lambda ins, kw: concat(ins, axis=kw.get("axis", 0)),
    "slice": lambda ins, kw: tslice(ins[0], kw["key"]),
    "broadcast": lambda ins, kw: broadcast_to(ins[0], kw["shape"]),
    "sum": lambda ins, kw: tsum(ins[0], axis=kw.get("axis")),
    "mean": lambda ins, kw: tmean(ins[0], axis=kw.get("axis")),
    "abs": lambda ins, kw: tabs(ins[0]),
    "square": lambda ins, kw: square(ins[0]),
    "sqrt": lambda ins, kw: sqrt(ins[0]),
    "exp": lambda ins, kw: exp(ins[0]),
    "log": lambda ins, kw: log(ins[0]),
    "tanh": lambda ins, kw: tanh(ins[0]),
    "sigmoid": lambda ins, kw: sigmoid(ins[0]),
    "leaky_relu": lambda ins, kw: leaky_relu(ins[0], kw.get("alpha", 0.01)),
    "softplus": lambda ins, kw: softplus(ins[0]),
}


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, coordinate
    by coordinate: (f(x+h e_i) - f(x-h e_i)) / 2h. The test oracle for
    ``backward``; keep it independent of the tape machinery."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    flat = x0.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0.copy()))
        flat[i] = orig - h
        fm = float(f(x0.copy()))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x0.shape)
