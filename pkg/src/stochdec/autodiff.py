"""Minimal reverse-mode automatic differentiation over numpy arrays.

Expressions are built eagerly: every node caches its forward value as soon as
all of its inputs have values.  Leaves are *named* variables and can be
re-bound later with :func:`evaluate`, which replays the graph in construction
order.  That replay is what :func:`check_gradients` uses for finite
differences.

Broadcasting is restricted to leading dimensions (``b.shape`` must equal a
suffix of ``a.shape``); every other shape mismatch raises :class:`ShapeError`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class PrecisionError(TypeError):
    pass


class UnboundLeafError(KeyError):
    pass


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


class Op:
    """A primitive: forward rule plus reverse rule.

    ``backward(attrs, g, out, *xs)`` returns one gradient (or None) per input.
    """

    def __init__(self, name: str, forward: Callable, backward: Callable):
        self.name = name
        self.forward = forward
        self.backward = backward

    def __repr__(self):
        return f"Op({self.name})"


class Expr:
    __slots__ = ("id", "op", "inputs", "attrs", "value", "name", "shape", "dtype")

    def __init__(self, op, inputs=(), attrs=None, value=None, name=None, shape=None, dtype=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.value = value
        self.name = name
        self.shape = tuple(value.shape) if value is not None else shape
        self.dtype = value.dtype if value is not None else dtype

    def __repr__(self):
        label = self.name or self.op.name
        return f"Expr<{label} shape={self.shape} dtype={self.dtype}>"

    @property
    def is_leaf(self) -> bool:
        return self.op is LEAF

    # operator sugar; constants adopt this node's dtype
    def _wrap(self, other):
        if isinstance(other, Expr):
            return other
        return const(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# graph construction


def _apply(op: Op, inputs: Sequence[Expr], **attrs) -> Expr:
    dtypes = {x.dtype for x in inputs if x.dtype is not None and x.dtype.kind == "f"}
    if len(dtypes) > 1:
        raise PrecisionError(
            f"{op.name}: mixed precisions {sorted(str(d) for d in dtypes)}"
        )
    node = Expr(op, inputs, attrs, dtype=dtypes.pop() if dtypes else None)
    if all(x.value is not None for x in inputs):
        node.value = _run_forward(node, [x.value for x in inputs])
        node.shape = node.value.shape
    return node


def _run_forward(node: Expr, values) -> np.ndarray:
    out = node.op.forward(node.attrs, *values)
    return np.asarray(out)


def leaf(name: str, value=None, shape=None, precision="f64") -> Expr:
    """A named variable.  Gradients are reported per leaf name."""
    dtype = as_dtype(precision)
    if value is not None:
        value = np.asarray(value, dtype=dtype)
        return Expr(LEAF, value=value, name=name)
    return Expr(LEAF, name=name, shape=tuple(shape) if shape is not None else None, dtype=dtype)


def const(value, precision=None) -> Expr:
    value = np.asarray(value)
    if precision is not None:
        value = value.astype(as_dtype(precision), copy=False)
    elif value.dtype.kind != "f":
        value = value.astype(np.float64)
    return Expr(CONST, value=value)


# ---------------------------------------------------------------------------
# shape helpers


def _suffix_broadcast(name: str, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape:
        return
    lo, hi = (a, b) if a.ndim < b.ndim else (b, a)
    if lo.ndim < hi.ndim and hi.shape[hi.ndim - lo.ndim:] == lo.shape:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# primitives

LEAF = Op("leaf", lambda attrs: None, lambda attrs, g, out: ())
CONST = Op("const", lambda attrs: None, lambda attrs, g, out: ())


def _add_fwd(attrs, a, b):
    _suffix_broadcast("add", a, b)
    return a + b


def _sub_fwd(attrs, a, b):
    _suffix_broadcast("sub", a, b)
    return a - b


def _mul_fwd(attrs, a, b):
    _suffix_broadcast("mul", a, b)
    return a * b


def _div_fwd(attrs, a, b):
    _suffix_broadcast("div", a, b)
    return a / b


ADD = Op("add", _add_fwd,
         lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
SUB = Op("sub", _sub_fwd,
         lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))
MUL = Op("mul", _mul_fwd,
         lambda attrs, g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
DIV = Op("div", _div_fwd,
         lambda attrs, g, out, a, b: (_unbroadcast(g / b, a.shape),
                                      _unbroadcast(-g * out / b, b.shape)))
NEG = Op("neg", lambda attrs, a: -a, lambda attrs, g, out, a: (-g,))


def _matmul_fwd(attrs, a, b):
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand {a.shape} @ {b.shape}")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    elif b.ndim == 1:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    else:
        if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def _matmul_bwd(attrs, g, out, a, b):
    if b.ndim == 1:
        ga = g[..., None] * b
        gb = np.tensordot(g, a, axes=(tuple(range(g.ndim)), tuple(range(a.ndim - 1))))
        return ga, gb
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2:
        k = a.shape[-1]
        gb = a.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


MATMUL = Op("matmul", _matmul_fwd, _matmul_bwd)


def _concat_fwd(attrs, *xs):
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def _concat_bwd(attrs, g, out, *xs):
    bounds = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


CONCAT = Op("concat", _concat_fwd, _concat_bwd)


def _slice_fwd(attrs, x):
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")
    return x[..., start:stop]


def _slice_bwd(attrs, g, out, x):
    gx = np.zeros_like(x)
    gx[..., attrs["start"]:attrs["stop"]] = g
    return (gx,)


SLICE = Op("slice", _slice_fwd, _slice_bwd)


def _index_fwd(attrs, x):
    axis, i = attrs["axis"], attrs["index"]
    if not -x.shape[axis] <= i < x.shape[axis]:
        raise ShapeError(f"index: {i} out of range on axis {axis} of {x.shape}")
    return np.take(x, i, axis=axis)


def _index_bwd(attrs, g, out, x):
    gx = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[attrs["axis"]] = attrs["index"]
    gx[tuple(idx)] = g
    return (gx,)


INDEX = Op("index", _index_fwd, _index_bwd)


def _reshape_fwd(attrs, x):
    shape = attrs["shape"]
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


RESHAPE = Op("reshape", _reshape_fwd, lambda attrs, g, out, x: (g.reshape(x.shape),))


def _stack_fwd(attrs, *xs):
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"stack: unequal shapes {[x.shape for x in xs]}")
    return np.stack(xs, axis=attrs["axis"])


def _stack_bwd(attrs, g, out, *xs):
    return tuple(np.take(g, i, axis=attrs["axis"]) for i in range(len(xs)))


STACK = Op("stack", _stack_fwd, _stack_bwd)


def _expand_fwd(attrs, x):
    axis, size = attrs["axis"], attrs["size"]
    return np.repeat(np.expand_dims(x, axis), size, axis=axis)


EXPAND = Op("expand", _expand_fwd, lambda attrs, g, out, x: (g.sum(axis=attrs["axis"]),))


TANH = Op("tanh", lambda attrs, x: np.tanh(x), lambda attrs, g, out, x: (g * (1.0 - out * out),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


SIGMOID = Op("sigmoid", lambda attrs, x: _sigmoid(x),
             lambda attrs, g, out, x: (g * out * (1.0 - out),))
EXP = Op("exp", lambda attrs, x: np.exp(x), lambda attrs, g, out, x: (g * out,))
LOG = Op("log", lambda attrs, x: np.log(x), lambda attrs, g, out, x: (g / x,))


def _softplus(x):
    big = x > 20.0
    out = np.where(big, x, np.log1p(np.exp(np.minimum(x, 20.0))))
    return out.astype(x.dtype, copy=False)


SOFTPLUS = Op("softplus", lambda attrs, x: _softplus(x),
              lambda attrs, g, out, x: (g * _sigmoid(x),))


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(attrs, g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _log_softmax_bwd(attrs, g, out, x):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


SOFTMAX = Op("softmax", lambda attrs, x: _softmax(x), _softmax_bwd)
LOG_SOFTMAX = Op("log_softmax", lambda attrs, x: _log_softmax(x), _log_softmax_bwd)


def _sum_fwd(attrs, x):
    return np.sum(x, axis=attrs["axis"])


def _sum_bwd(attrs, g, out, x):
    axis = attrs["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _mean_bwd(attrs, g, out, x):
    axis = attrs["axis"]
    n = x.size if axis is None else x.shape[axis]
    (gx,) = _sum_bwd(attrs, g, out, x)
    return (gx / n,)


SUM = Op("sum", _sum_fwd, _sum_bwd)
MEAN = Op("mean", lambda attrs, x: np.mean(x, axis=attrs["axis"]), _mean_bwd)


def _gather_fwd(attrs, table):
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return table[ids]


def _gather_bwd(attrs, g, out, table):
    gt = np.zeros_like(table)
    np.add.at(gt, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


GATHER = Op("embedding", _gather_fwd, _gather_bwd)
STOP_GRADIENT = Op("stop_gradient", lambda attrs, x: x, lambda attrs, g, out, x: (None,))


# public builders ------------------------------------------------------------


def add(a: Expr, b: Expr) -> Expr:
    return _apply(ADD, (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    return _apply(SUB, (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    return _apply(MUL, (a, b))


def div(a: Expr, b: Expr) -> Expr:
    return _apply(DIV, (a, b))


def neg(a: Expr) -> Expr:
    return _apply(NEG, (a,))


def matmul(a: Expr, b: Expr) -> Expr:
    """``a @ b`` for a weight matrix/vector ``b`` or equal-rank batched operands."""
    return _apply(MATMUL, (a, b))


def concat(xs: Sequence[Expr]) -> Expr:
    """Concatenate along the last axis."""
    return _apply(CONCAT, tuple(xs))


def slice_last(x: Expr, start: int, stop: int) -> Expr:
    return _apply(SLICE, (x,), start=int(start), stop=int(stop))


def index(x: Expr, i: int, axis: int = 0) -> Expr:
    return _apply(INDEX, (x,), axis=int(axis), index=int(i))


def reshape(x: Expr, shape) -> Expr:
    return _apply(RESHAPE, (x,), shape=tuple(int(s) for s in shape))


def stack(xs: Sequence[Expr], axis: int = 0) -> Expr:
    return _apply(STACK, tuple(xs), axis=int(axis))


def expand(x: Expr, axis: int, size: int) -> Expr:
    """Insert a new axis of length ``size`` by repetition."""
    return _apply(EXPAND, (x,), axis=int(axis), size=int(size))


def tanh(x: Expr) -> Expr:
    return _apply(TANH, (x,))


def sigmoid(x: Expr) -> Expr:
    return _apply(SIGMOID, (x,))


def exp(x: Expr) -> Expr:
    return _apply(EXP, (x,))


def log(x: Expr) -> Expr:
    return _apply(LOG, (x,))


def softplus(x: Expr) -> Expr:
    return _apply(SOFTPLUS, (x,))


def softmax(x: Expr) -> Expr:
    return _apply(SOFTMAX, (x,))


def log_softmax(x: Expr) -> Expr:
    return _apply(LOG_SOFTMAX, (x,))


def sum(x: Expr, axis: Optional[int] = None) -> Expr:  # noqa: A001
    return _apply(SUM, (x,), axis=axis)


def mean(x: Expr, axis: Optional[int] = None) -> Expr:
    return _apply(MEAN, (x,), axis=axis)


def embedding(table: Expr, ids) -> Expr:
    return _apply(GATHER, (table,), ids=np.asarray(ids, dtype=np.int64))


def stop_gradient(x: Expr) -> Expr:
    """Identity forward; the reverse sweep sends nothing into ``x``."""
    return _apply(STOP_GRADIENT, (x,))


# ---------------------------------------------------------------------------
# evaluation and differentiation


def topological_order(root: Expr) -> List[Expr]:
    """Reachable nodes sorted by construction order (inputs before outputs)."""
    seen = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack_.extend(node.inputs)
    return [seen[k] for k in sorted(seen)]


def leaves(root: Expr) -> Dict[str, Expr]:
    out = {}
    for node in topological_order(root):
        if node.is_leaf:
            if node.name in out and out[node.name] is not node:
                raise ValueError(f"two distinct leaves named {node.name!r}")
            out[node.name] = node
    return out


def evaluate(expr: Expr, bindings: Mapping[str, np.ndarray],
             frozen: Optional[Mapping[int, np.ndarray]] = None) -> np.ndarray:
    """Recompute ``expr`` with every leaf bound from ``bindings``.

    ``frozen`` maps stop_gradient node ids to values they output verbatim,
    which turns blocked sub-graphs into true constants.
    """
    order = topological_order(expr)
    for node in order:
        if node.op is LEAF:
            if node.name not in bindings:
                raise UnboundLeafError(f"unbound leaf {node.name!r}")
            value = np.asarray(bindings[node.name], dtype=node.dtype)
            if node.shape is not None and tuple(value.shape) != tuple(node.shape):
                raise ShapeError(
                    f"leaf {node.name!r}: bound shape {value.shape} != declared {node.shape}"
                )
            node.value = value
            node.shape = value.shape
        elif node.op is CONST:
            continue
        elif frozen is not None and node.id in frozen:
            node.value = frozen[node.id]
        else:
            node.value = _run_forward(node, [x.value for x in node.inputs])
            node.shape = node.value.shape
    return expr.value


def backward(root: Expr) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar root using cached forward values.

    Returns a gradient for every leaf in the graph; leaves cut off by
    ``stop_gradient`` (or otherwise off-path) get zeros.
    """
    if root.value is None:
        raise ValueError("backward: graph has unevaluated nodes; call evaluate first")
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = topological_order(root)
    grads: Dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    out: Dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if node.op is LEAF:
            out[node.name] = g if g is not None else np.zeros_like(node.value)
            continue
        if g is None or not node.inputs:
            continue
        in_grads = node.op.backward(node.attrs, g, node.value, *[x.value for x in node.inputs])
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or x.op is CONST:
                continue
            if x.id in grads:
                grads[x.id] = grads[x.id] + gx
            else:
                grads[x.id] = gx
    return out


def gradient(expr: Expr, bindings: Mapping[str, np.ndarray],
             wrt: Iterable[str]) -> Dict[str, np.ndarray]:
    """d expr / d leaf for each requested leaf name.

    A bound name that does not occur in the graph gets a zero gradient.
    """
    evaluate(expr, bindings)
    grads = backward(expr)
    out = {}
    for w in wrt:
        if w in grads:
            out[w] = grads[w]
        elif w in bindings:
            out[w] = np.zeros(np.shape(bindings[w]), dtype=expr.value.dtype)
        else:
            raise UnboundLeafError(f"no leaf named {w!r} in graph or bindings")
    return out


def blocked_leaves(root: Expr) -> List[str]:
    """Leaf names whose every path to ``root`` crosses a stop_gradient."""
    reach = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.id in reach:
            continue
        reach[node.id] = node
        if node.op is not STOP_GRADIENT:
            stack_.extend(node.inputs)
    live = {n.name for n in reach.values() if n.is_leaf}
    return sorted(set(leaves(root)) - live)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_leaf: Optional[str]
    per_leaf: Dict[str, float] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)
    n_coords: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(expr: Expr, bindings: Mapping[str, np.ndarray], eps: float = 1e-5,
                    wrt: Optional[Iterable[str]] = None, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None,
                    stencil: int = 3) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``stencil`` picks the classic 3-point difference (error O(eps^2)) or the
    5-point one (error O(eps^4)), which tolerates stiffer graphs at the same eps.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Leaves blocked by stop_gradient are excluded from the report, and every
    stop_gradient output is held at its unperturbed value while probing, so
    the numeric side differentiates the same surrogate that backward() does.
    ``max_coords`` caps the number of coordinates probed per leaf (sampled
    with ``rng``); the default probes all of them.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    bindings = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    for node in leaves(expr).values():
        if node.dtype != np.float64:
            raise PrecisionError("check_gradients requires an f64 graph")
    analytic = gradient(expr, bindings, bindings.keys())
    frozen = {n.id: n.value for n in topological_order(expr) if n.op is STOP_GRADIENT}
    excluded = blocked_leaves(expr)
    names = [n for n in (wrt if wrt is not None else sorted(bindings)) if n not in excluded]
    rng = rng if rng is not None else np.random.default_rng(0)

    per_leaf: Dict[str, float] = {}
    n_coords = 0
    for name in names:
        base = bindings[name]
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        worst = 0.0
        for k in coords:
            flat = base.reshape(-1)
            orig = flat[k]

            def probe(step):
                flat[k] = orig + step
                return float(evaluate(expr, bindings, frozen))

            near = probe(eps) - probe(-eps)
            if stencil == 3:
                numeric = near / (2.0 * eps)
            else:
                far = probe(2 * eps) - probe(-2 * eps)
                numeric = (8.0 * near - far) / (12.0 * eps)
            flat[k] = orig
            a = float(analytic[name].reshape(-1)[k])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
            n_coords += 1
        per_leaf[name] = worst
    evaluate(expr, bindings)
    worst_leaf = max(per_leaf, key=per_leaf.get) if per_leaf else None
    return GradCheckReport(
        max_rel_error=per_leaf[worst_leaf] if worst_leaf else 0.0,
        worst_leaf=worst_leaf,
        per_leaf=per_leaf,
        excluded=excluded,
        n_coords=n_coords,
    )
