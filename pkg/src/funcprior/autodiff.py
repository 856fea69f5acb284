"""A small reverse-mode automatic differentiation engine over numpy arrays.

Expressions form an acyclic graph whose nodes cache their last value.  The
backward rules are themselves written as expressions, so an input gradient
obtained with :func:`input_gradient` can be differentiated again; this is
what the gradient-penalty term needs (double backpropagation).

>>> w = parameter("w", [1.2, 1.6])
>>> T = placeholder("T", (2,))
>>> D = inner(w, T)
>>> evaluate(input_gradient(D, "T"), {"T": [0.0, 0.0]})
array([1.2, 1.6])
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Expression",
    "placeholder",
    "parameter",
    "constant",
    "evaluate",
    "gradient",
    "input_gradient",
    "spatial_second_derivative",
    "affine",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "exp",
    "log",
    "sqrt",
    "square",
    "leaky_relu",
    "identity",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "inner",
    "transpose",
    "reshape",
    "UnboundInput",
]


class UnboundInput(KeyError):
    pass


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as err:
        raise ValueError(f"shape mismatch: {a} vs {b}") from err


class Expression:
    """A node in the computation graph."""

    __slots__ = ("op", "operands", "attrs", "shape", "value", "name")
    __array_priority__ = 100  # so numpy defers to our reflected operators

    def __init__(self, op, operands=(), shape=(), attrs=None, value=None, name=None):
        self.op = op
        self.operands = tuple(operands)
        self.attrs = attrs or {}
        self.shape = tuple(shape)
        self.value = value
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Expression({self.op}{label}, shape={self.shape})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _lift(x) -> Expression:
    return x if isinstance(x, Expression) else constant(x)


# --- leaves -----------------------------------------------------------------


def placeholder(name: str, shape) -> Expression:
    """A free input; its value is supplied through ``evaluate`` bindings."""
    return Expression("input", shape=tuple(np.atleast_1d(shape)) if shape != () else (), name=name)


def parameter(name: str, value) -> Expression:
    v = np.asarray(value, dtype=np.float64)
    return Expression("param", shape=v.shape, value=v, name=name)


def constant(value) -> Expression:
    v = np.asarray(value, dtype=np.float64)
    return Expression("const", shape=v.shape, value=v)


# --- forward rules ----------------------------------------------------------

_UNARY = {
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "square": np.square,
    "neg": np.negative,
    "identity": lambda v: v,
}


def _unary(op):
    def build(x):
        x = _lift(x)
        return Expression(op, (x,), x.shape)

    build.__name__ = op
    return build


tanh = _unary("tanh")
sin = _unary("sin")
cos = _unary("cos")
exp = _unary("exp")
log = _unary("log")
sqrt = _unary("sqrt")
square = _unary("square")
neg = _unary("neg")
identity = _unary("identity")


def leaky_relu(x, slope: float = 0.2) -> Expression:
    x = _lift(x)
    return Expression("leaky_relu", (x,), x.shape, {"slope": slope})


def _leaky_mask(x, slope) -> Expression:
    # derivative of leaky-relu; piecewise constant so it has no gradient of its own
    return Expression("leaky_mask", (x,), x.shape, {"slope": slope})


def _binary(op):
    def build(a, b):
        a, b = _lift(a), _lift(b)
        return Expression(op, (a, b), _broadcast_shape(a.shape, b.shape))

    build.__name__ = op
    return build


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
div = _binary("div")


def power(x, p: float) -> Expression:
    x = _lift(x)
    return Expression("pow", (x,), x.shape, {"p": float(p)})


def matmul(a, b) -> Expression:
    a, b = _lift(a), _lift(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Expression("matmul", (a, b), (a.shape[0], b.shape[1]))


def affine(x, W, b) -> Expression:
    """``x @ W + b`` for ``x`` of shape (batch, n_in)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if len(x.shape) != 2 or len(W.shape) != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.shape} @ {W.shape}")
    out = (x.shape[0], W.shape[1])
    _broadcast_shape(out, b.shape)
    return Expression("affine", (x, W, b), out)


def transpose(x) -> Expression:
    x = _lift(x)
    return Expression("transpose", (x,), x.shape[::-1])


def reshape(x, shape) -> Expression:
    x = _lift(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != int(np.prod(x.shape)):
        raise ValueError(f"cannot reshape {x.shape} to {shape}")
    return Expression("reshape", (x,), shape, {"shape": shape})


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def reduce_sum(x, axis=None) -> Expression:
    x = _lift(x)
    axes = _norm_axis(axis, len(x.shape))
    shape = tuple(s for i, s in enumerate(x.shape) if i not in axes)
    return Expression("sum", (x,), shape, {"axes": axes})


def reduce_mean(x, axis=None) -> Expression:
    x = _lift(x)
    axes = _norm_axis(axis, len(x.shape))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axis) * (1.0 / count)


def inner(a, b) -> Expression:
    """Inner product over the last axis."""
    a, b = _lift(a), _lift(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"inner product shape mismatch: {a.shape} vs {b.shape}")
    return reduce_sum(mul(a, b), axis=-1)


def concat(parts: Iterable, axis: int = -1) -> Expression:
    parts = [_lift(p) for p in parts]
    ndim = len(parts[0].shape)
    ax = axis % ndim
    for p in parts[1:]:
        if len(p.shape) != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError("concat shape mismatch")
    shape = list(parts[0].shape)
    shape[ax] = sum(p.shape[ax] for p in parts)
    return Expression("concat", parts, tuple(shape), {"axis": ax})


def _slice(x, axis, start, stop) -> Expression:
    shape = list(x.shape)
    shape[axis] = stop - start
    return Expression("slice", (x,), tuple(shape), {"axis": axis, "start": start, "stop": stop})


def _embed(g, axis, start, total) -> Expression:
    shape = list(g.shape)
    shape[axis] = total
    return Expression("embed", (g,), tuple(shape), {"axis": axis, "start": start})


def _sum_to(x, shape) -> Expression:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return Expression("sum_to", (x,), shape, {"shape": shape})


def _broadcast_to(x, shape) -> Expression:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return Expression("broadcast_to", (x,), shape, {"shape": shape})


def _expand(g, axes, shape) -> Expression:
    # undo a reduction: reinsert unit axes, then broadcast
    kept = list(g.shape)
    for a in axes:
        kept.insert(a, 1)
    return _broadcast_to(reshape(g, kept), shape)


def _sum_to_value(v, shape):
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    v = v.sum(axis=tuple(range(lead))) if lead > 0 else v
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and v.shape[i] != 1)
    return v.sum(axis=axes, keepdims=True) if axes else v


def _forward(node: Expression, vals) -> np.ndarray:
    op, a = node.op, node.attrs
    if op in _UNARY:
        return _UNARY[op](vals[0])
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        return vals[0] / vals[1]
    if op == "pow":
        return vals[0] ** a["p"]
    if op == "leaky_relu":
        return np.where(vals[0] > 0, vals[0], a["slope"] * vals[0])
    if op == "leaky_mask":
        return np.where(vals[0] > 0, 1.0, a["slope"])
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "affine":
        return vals[0] @ vals[1] + vals[2]
    if op == "transpose":
        return vals[0].T
    if op == "reshape":
        return vals[0].reshape(a["shape"])
    if op == "sum":
        return np.sum(vals[0], axis=a["axes"]) if a["axes"] else vals[0]
    if op == "concat":
        return np.concatenate(vals, axis=a["axis"])
    if op == "slice":
        idx = [slice(None)] * vals[0].ndim
        idx[a["axis"]] = slice(a["start"], a["stop"])
        return vals[0][tuple(idx)]
    if op == "embed":
        out = np.zeros(node.shape)
        idx = [slice(None)] * out.ndim
        idx[a["axis"]] = slice(a["start"], a["start"] + vals[0].shape[a["axis"]])
        out[tuple(idx)] = vals[0]
        return out
    if op == "sum_to":
        return _sum_to_value(vals[0], a["shape"])
    if op == "broadcast_to":
        return np.broadcast_to(vals[0], a["shape"]).copy()
    raise NotImplementedError(op)


def _toposort(root: Expression) -> list[Expression]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.operands:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def evaluate(expr: Expression, bindings: dict | None = None) -> np.ndarray:
    """Compute ``expr`` given values for its free inputs; caches node values."""
    bindings = bindings or {}
    for node in _toposort(expr):
        if node.op == "input":
            if node.name not in bindings:
                raise UnboundInput(f"input {node.name!r} is not bound")
            v = np.asarray(bindings[node.name], dtype=np.float64)
            if v.shape != node.shape:
                raise ValueError(f"input {node.name!r}: expected shape {node.shape}, got {v.shape}")
            node.value = v
        elif node.op in ("param", "const"):
            if node.op == "param" and node.name in bindings:
                node.value = np.asarray(bindings[node.name], dtype=np.float64)
        else:
            node.value = _forward(node, [c.value for c in node.operands])
    return expr.value


# --- backward rules (emit expressions) --------------------------------------


def _vjp(node: Expression, g: Expression) -> list[Expression | None]:
    op, a = node.op, node.attrs
    ops = node.operands
    if op == "add":
        return [_sum_to(g, ops[0].shape), _sum_to(g, ops[1].shape)]
    if op == "sub":
        return [_sum_to(g, ops[0].shape), _sum_to(neg(g), ops[1].shape)]
    if op == "mul":
        return [_sum_to(g * ops[1], ops[0].shape), _sum_to(g * ops[0], ops[1].shape)]
    if op == "div":
        x, y = ops
        return [_sum_to(g / y, x.shape), _sum_to(neg(g * x / (y * y)), y.shape)]
    if op == "neg":
        return [neg(g)]
    if op == "identity":
        return [g]
    if op == "tanh":
        return [g * (1.0 - node * node)]
    if op == "sin":
        return [g * cos(ops[0])]
    if op == "cos":
        return [neg(g * sin(ops[0]))]
    if op == "exp":
        return [g * node]
    if op == "log":
        return [g / ops[0]]
    if op == "sqrt":
        return [g / (2.0 * node)]
    if op == "square":
        return [2.0 * g * ops[0]]
    if op == "pow":
        p = a["p"]
        return [g * p * power(ops[0], p - 1.0)]
    if op == "leaky_relu":
        return [g * _leaky_mask(ops[0], a["slope"])]
    if op == "leaky_mask":
        return [None]
    if op == "matmul":
        A, B = ops
        return [matmul(g, transpose(B)), matmul(transpose(A), g)]
    if op == "affine":
        x, W, b = ops
        return [matmul(g, transpose(W)), matmul(transpose(x), g), _sum_to(g, b.shape)]
    if op == "transpose":
        return [transpose(g)]
    if op == "reshape":
        return [reshape(g, ops[0].shape)]
    if op == "sum":
        return [_expand(g, a["axes"], ops[0].shape)]
    if op == "concat":
        out, start = [], 0
        for part in ops:
            size = part.shape[a["axis"]]
            out.append(_slice(g, a["axis"], start, start + size))
            start += size
        return out
    if op == "slice":
        return [_embed(g, a["axis"], a["start"], ops[0].shape[a["axis"]])]
    if op == "embed":
        return [_slice(g, a["axis"], a["start"], a["start"] + ops[0].shape[a["axis"]])]
    if op == "sum_to":
        return [_broadcast_to(g, ops[0].shape)]
    if op == "broadcast_to":
        return [_sum_to(g, ops[0].shape)]
    raise NotImplementedError(f"no backward rule for {op}")


def _adjoints(root: Expression) -> dict[int, Expression]:
    """Symbolic reverse sweep; returns node id -> adjoint expression."""
    order = _toposort(root)
    adj: dict[int, Expression] = {id(root): constant(np.ones(root.shape))}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or not node.operands:
            continue
        for child, contrib in zip(node.operands, _vjp(node, g)):
            if contrib is None or child.op == "const":
                continue
            prev = adj.get(id(child))
            adj[id(child)] = contrib if prev is None else add(prev, contrib)
    return adj


def _check_scalar(root: Expression):
    if int(np.prod(root.shape)) != 1:
        raise ValueError(f"root must be scalar, has shape {root.shape}")


def gradient(root: Expression, wrt=None, bindings: dict | None = None) -> dict[str, np.ndarray]:
    """``d root / d p`` for parameters ``p`` (all parameters when ``wrt`` is None)."""
    _check_scalar(root)
    nodes = _toposort(root)
    params = [n for n in nodes if n.op == "param"]
    if wrt is not None:
        names = {w.name if isinstance(w, Expression) else w for w in wrt}
        params = [p for p in params if p.name in names]
    adj = _adjoints(root)
    out = {}
    for p in params:
        g = adj.get(id(p))
        out[p.name] = np.zeros(p.shape) if g is None else np.array(evaluate(g, bindings), dtype=np.float64)
    return out


def input_gradient(root: Expression, wrt_input: str) -> Expression:
    """The gradient of ``root`` w.r.t. the named input, as a differentiable expression."""
    _check_scalar(root)
    matches = [n for n in _toposort(root) if n.op == "input" and n.name == wrt_input]
    if not matches:
        raise KeyError(f"input {wrt_input!r} does not appear in the graph")
    g = _adjoints(root).get(id(matches[0]))
    return constant(np.zeros(matches[0].shape)) if g is None else g


def spatial_second_derivative(gen: Callable, x, xi, h: float = 1e-3, bounds=None) -> Expression:
    """Three-point estimate of ``d^2/dx^2 gen(x, xi)``.

    ``gen(x, xi)`` must build an Expression.  Within ``h`` of ``bounds`` a
    one-sided four-point stencil is used.  Exact for quadratics.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    side = np.zeros_like(x)
    if bounds is not None:
        lo, hi = bounds
        side = np.where(x - h < lo, 1.0, np.where(x + h > hi, -1.0, 0.0))
    if not side.any():
        return (gen(constant(x + h), xi) - 2.0 * gen(constant(x), xi) + gen(constant(x - h), xi)) * (1.0 / h**2)
    # central stencil inside, one-sided four-point stencil at the boundary, blended by masks
    step = np.where(side == 0, 1.0, side) * h
    g = [gen(constant(x + k * step), xi) for k in (0, 1, 2, 3)]
    gm = gen(constant(np.where(side == 0, x - h, x)), xi)  # edge entries are masked out
    inner_mask = constant((side == 0).astype(np.float64))
    edge_mask = constant((side != 0).astype(np.float64))
    central = g[1] - 2.0 * g[0] + gm
    onesided = 2.0 * g[0] - 5.0 * g[1] + 4.0 * g[2] - g[3]
    return (inner_mask * central + edge_mask * onesided) * (1.0 / h**2)
