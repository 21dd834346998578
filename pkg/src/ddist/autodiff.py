"""Reverse-mode automatic differentiation on a dynamically built graph.

Values are float64 numpy arrays wrapped in GraphValue nodes.  Every backward
rule is itself composed of the operations in this module, so the result of
`gradient(..., create_graph=True)` is an ordinary graph node that can be
differentiated again.  That property is what lets the estimators push
gradients through optimizer updates without ever materializing a Hessian.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
operand is a scalar (size 1), or the smaller operand's shape is a trailing
suffix of the larger's (the bias-add case).  Anything else goes through an
explicit broadcast_to, which keeps the backward rules auditable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

Tensor = np.ndarray  # float64, row-major

_grad_enabled = True
_debug_validation = False


def set_debug_validation(flag: bool) -> None:
    """Toggle per-op finite/domain checks. Off by default (hot path)."""
    global _debug_validation
    _debug_validation = bool(flag)


class no_grad:
    """Context manager: ops built inside record no graph structure."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _grad_mode:
    # internal: force tracking on/off during backward-rule execution
    def __init__(self, enabled):
        self._enabled = enabled

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = self._enabled

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class GraphValue:
    """One node: a value plus (when tracked) the op that produced it."""

    __slots__ = ("data", "op", "parents", "requires_grad", "_rule", "_freed")

    def __init__(self, data, op="leaf", parents=(), requires_grad=False, rule=None):
        self.data = data
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._rule = rule
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"GraphValue(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; mirrors the module-level ops
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

    def __pow__(self, p):
        return power(self, p)


def as_value(x) -> GraphValue:
    """Coerce arrays and python numbers to constant leaf nodes."""
    if type(x) is GraphValue:
        return x
    return GraphValue(np.asarray(x, dtype=np.float64))


def constant(x) -> GraphValue:
    return GraphValue(np.asarray(x, dtype=np.float64))


def leaf(x, requires_grad=False) -> GraphValue:
    """A differentiation target: fresh leaf wrapping `x` (no copy)."""
    return GraphValue(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)


def detach(x: GraphValue) -> GraphValue:
    """History-free leaf sharing x's value bit-for-bit. Idempotent."""
    return GraphValue(x.data)


def _validate(data, op):
    if _debug_validation and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite result in op {op!r}")
    return data


def _node(data, op, parents, rule):
    _validate(data, op)
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                return GraphValue(data, op, parents, True, rule)
    return GraphValue(data, op)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_binary_shapes(op, sa, sb):
    if sa == sb:
        return
    na, nb = int(np.prod(sa)), int(np.prod(sb))
    if na == 1 or nb == 1:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
                     "(equal, scalar, or trailing-suffix only)")


def _unbroadcast(g: GraphValue, shape) -> GraphValue:
    # reduce a broadcast result's gradient back to the operand's shape
    if g.data.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return reshape(sum_reduce(g), shape)
    extra = g.data.ndim - len(shape)
    return sum_reduce(g, axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a, b) -> GraphValue:
    a, b = as_value(a), as_value(b)
    _check_binary_shapes("add", a.data.shape, b.data.shape)
    out = _node(a.data + b.data, "add", (a, b), None)
    if out.requires_grad:
        sa, sb = a.data.shape, b.data.shape

        def rule(up):
            return (_unbroadcast(up, sa) if a.requires_grad else None,
                    _unbroadcast(up, sb) if b.requires_grad else None)

        out._rule = rule
    return out


def sub(a, b) -> GraphValue:
    a, b = as_value(a), as_value(b)
    _check_binary_shapes("sub", a.data.shape, b.data.shape)
    out = _node(a.data - b.data, "sub", (a, b), None)
    if out.requires_grad:
        sa, sb = a.data.shape, b.data.shape

        def rule(up):
            return (_unbroadcast(up, sa) if a.requires_grad else None,
                    _unbroadcast(neg(up), sb) if b.requires_grad else None)

        out._rule = rule
    return out


def mul(a, b) -> GraphValue:
    a, b = as_value(a), as_value(b)
    _check_binary_shapes("mul", a.data.shape, b.data.shape)
    out = _node(a.data * b.data, "mul", (a, b), None)
    if out.requires_grad:
        sa, sb = a.data.shape, b.data.shape

        def rule(up):
            return (_unbroadcast(mul(up, b), sa) if a.requires_grad else None,
                    _unbroadcast(mul(up, a), sb) if b.requires_grad else None)

        out._rule = rule
    return out


def div(a, b) -> GraphValue:
    a, b = as_value(a), as_value(b)
    _check_binary_shapes("div", a.data.shape, b.data.shape)
    if _debug_validation and np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _node(a.data / b.data, "div", (a, b), None)
    if out.requires_grad:
        sa, sb = a.data.shape, b.data.shape

        def rule(up):
            ga = _unbroadcast(div(up, b), sa) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = _unbroadcast(neg(div(mul(up, a), mul(b, b))), sb)
            return ga, gb

        out._rule = rule
    return out


def neg(a) -> GraphValue:
    a = as_value(a)
    out = _node(-a.data, "neg", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (neg(up),)
    return out


def scale(a, s: float) -> GraphValue:
    """Multiply by a python scalar constant (not a differentiable operand)."""
    a = as_value(a)
    s = float(s)
    out = _node(a.data * s, "scale", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (scale(up, s),)
    return out


def power(a, p: float) -> GraphValue:
    """Elementwise a**p for a constant exponent p."""
    a = as_value(a)
    p = float(p)
    if _debug_validation and p != int(p) and np.any(a.data < 0):
        raise DomainError("power: negative base with fractional exponent")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _node(a.data ** p, "power", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (scale(mul(up, power(a, p - 1.0)), p),)
    return out


def exp(a) -> GraphValue:
    a = as_value(a)
    with np.errstate(over="ignore"):
        out = _node(np.exp(a.data), "exp", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (mul(up, out),)
    return out


def log(a) -> GraphValue:
    a = as_value(a)
    if _debug_validation and np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _node(np.log(a.data), "log", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (div(up, a),)
    return out


def tanh(a) -> GraphValue:
    a = as_value(a)
    out = _node(np.tanh(a.data), "tanh", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (mul(up, sub(1.0, mul(out, out))),)
    return out


def relu(a) -> GraphValue:
    a = as_value(a)
    out = _node(np.maximum(a.data, 0.0), "relu", (a,), None)
    if out.requires_grad:
        def rule(up):
            mask = constant((a.data > 0.0).astype(np.float64))
            return (mul(up, mask),)

        out._rule = rule
    return out


def sqrt(a) -> GraphValue:
    a = as_value(a)
    if _debug_validation and np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _node(np.sqrt(a.data), "sqrt", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (div(up, scale(out, 2.0)),)
    return out


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b) -> GraphValue:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, "matmul", (a, b), None)
    if out.requires_grad:
        def rule(up):
            ga = matmul(up, transpose(b)) if a.requires_grad else None
            gb = matmul(transpose(a), up) if b.requires_grad else None
            return ga, gb

        out._rule = rule
    return out


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def sum_reduce(a, axis=None, keepdims=False) -> GraphValue:
    a = as_value(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = _node(a.data.sum(axis=axes or None, keepdims=keepdims), "sum", (a,), None)
    if out.requires_grad:
        src_shape = a.data.shape
        kd = _keepdims_shape(src_shape, axes)

        def rule(up):
            g = up if keepdims else reshape(up, kd)
            return (broadcast_to(g, src_shape),)

        out._rule = rule
    return out


def mean_reduce(a, axis=None, keepdims=False) -> GraphValue:
    a = as_value(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = _node(a.data.mean(axis=axes or None, keepdims=keepdims), "mean", (a,), None)
    if out.requires_grad:
        src_shape = a.data.shape
        kd = _keepdims_shape(src_shape, axes)
        count = 1
        for ax in axes:
            count *= src_shape[ax]

        def rule(up):
            g = up if keepdims else reshape(up, kd)
            return (scale(broadcast_to(g, src_shape), 1.0 / count),)

        out._rule = rule
    return out


def max_reduce(a, axis=None, keepdims=False) -> GraphValue:
    a = as_value(a)
    axes = _norm_axes(axis, a.data.ndim)
    data = a.data.max(axis=axes or None, keepdims=keepdims)
    out = _node(data, "max", (a,), None)
    if out.requires_grad:
        src_shape = a.data.shape
        kd = _keepdims_shape(src_shape, axes)
        expanded = a.data.max(axis=axes or None, keepdims=True)
        mask = (a.data == expanded).astype(np.float64)
        mask /= mask.sum(axis=axes or None, keepdims=True)  # ties split evenly

        def rule(up):
            g = up if keepdims else reshape(up, kd)
            return (mul(broadcast_to(g, src_shape), constant(mask)),)

        out._rule = rule
    return out


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> GraphValue:
    a = as_value(a)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    out = _node(a.data.reshape(shape), "reshape", (a,), None)
    if out.requires_grad:
        src = a.data.shape
        out._rule = lambda up: (reshape(up, src),)
    return out


def transpose(a, axes=None) -> GraphValue:
    a = as_value(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    out = _node(np.transpose(a.data, axes), "transpose", (a,), None)
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        out._rule = lambda up: (transpose(up, inverse),)
    return out


def broadcast_to(a, shape) -> GraphValue:
    """Explicit broadcast: prepend axes and stretch size-1 dims."""
    a = as_value(a)
    shape = tuple(int(d) for d in shape)
    src = a.data.shape
    if len(src) > len(shape):
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}")
    aligned = (1,) * (len(shape) - len(src)) + src
    for d_src, d_dst in zip(aligned, shape):
        if d_src != d_dst and d_src != 1:
            raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}")
    if src == shape:
        return a
    out = _node(np.broadcast_to(a.data, shape), "broadcast", (a,), None)
    if out.requires_grad:
        reduce_axes = tuple(i for i, (d_src, d_dst) in enumerate(zip(aligned, shape))
                            if d_src == 1 and d_dst != 1)

        def rule(up):
            g = sum_reduce(up, axis=reduce_axes, keepdims=True) if reduce_axes else up
            return (reshape(g, src),)

        out._rule = rule
    return out


def concat(values, axis=0) -> GraphValue:
    values = [as_value(v) for v in values]
    if not values:
        raise ShapeError("concat: empty input list")
    axis = axis % values[0].data.ndim
    out_data = np.concatenate([v.data for v in values], axis=axis)
    out = _node(out_data, "concat", tuple(values), None)
    if out.requires_grad:
        sizes = [v.data.shape[axis] for v in values]
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def rule(up):
            return tuple(
                narrow(up, axis, int(offsets[i]), sizes[i]) if v.requires_grad else None
                for i, v in enumerate(values))

        out._rule = rule
    return out


def narrow(a, axis, start, length) -> GraphValue:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_value(a)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range "
                         f"for axis {axis} of {a.data.shape}")
    sl = (slice(None),) * axis + (slice(start, start + length),)
    out = _node(a.data[sl], "narrow", (a,), None)
    if out.requires_grad:
        size = a.data.shape[axis]
        out._rule = lambda up: (embed_slice(up, size, axis, start),)
    return out


def embed_slice(a, size, axis, start) -> GraphValue:
    """Adjoint of narrow: embed `a` into zeros of axis length `size`."""
    a = as_value(a)
    axis = axis % a.data.ndim
    length = a.data.shape[axis]
    full = list(a.data.shape)
    full[axis] = size
    data = np.zeros(full, dtype=np.float64)
    sl = (slice(None),) * axis + (slice(start, start + length),)
    data[sl] = a.data
    out = _node(data, "embed_slice", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (narrow(up, axis, start, length),)
    return out


def take_rows(a, indices) -> GraphValue:
    """Select rows along axis 0; duplicates allowed."""
    a = as_value(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _node(a.data[idx], "take_rows", (a,), None)
    if out.requires_grad:
        n = a.data.shape[0]
        out._rule = lambda up: (scatter_rows(up, idx, n),)
    return out


def scatter_rows(a, indices, n_rows) -> GraphValue:
    """Adjoint of take_rows: add rows of `a` into zeros at `indices`."""
    a = as_value(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(data, idx, a.data)
    out = _node(data, "scatter_rows", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (take_rows(up, idx),)
    return out


def gather_flat(a, indices) -> GraphValue:
    """Per-row flat gather: (B, S) -> (B, len(indices)). Used by conv im2col."""
    a = as_value(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _node(a.data[:, idx], "gather_flat", (a,), None)
    if out.requires_grad:
        size = a.data.shape[1]
        out._rule = lambda up: (scatter_flat(up, idx, size),)
    return out


def scatter_flat(a, indices, size) -> GraphValue:
    """Adjoint of gather_flat: per-row scatter-add into width `size`."""
    a = as_value(a)
    idx = np.asarray(indices, dtype=np.intp)
    batch = a.data.shape[0]
    data = np.zeros((batch, size), dtype=np.float64)
    np.add.at(data, (np.arange(batch)[:, None], idx[None, :]), a.data)
    out = _node(data, "scatter_flat", (a,), None)
    if out.requires_grad:
        out._rule = lambda up: (gather_flat(up, idx),)
    return out


# ---------------------------------------------------------------------------
# softmax family (composites of the primitives above)

def logsumexp(a) -> GraphValue:
    """log(sum(exp(a))) over the last axis, keepdims, max-shifted."""
    a = as_value(a)
    m = max_reduce(a, axis=-1, keepdims=True)
    shifted = sub(a, broadcast_to(m, a.data.shape))
    return add(log(sum_reduce(exp(shifted), axis=-1, keepdims=True)), m)


def log_softmax(a) -> GraphValue:
    a = as_value(a)
    return sub(a, broadcast_to(logsumexp(a), a.data.shape))


def softmax(a) -> GraphValue:
    """Softmax over the last axis."""
    return exp(log_softmax(a))


# ---------------------------------------------------------------------------
# differentiation

def gradient(output: GraphValue, wrt: Sequence[GraphValue], create_graph=False,
             stop_at_wrt=False):
    """Reverse-mode gradient of a scalar `output` w.r.t. each node in `wrt`.

    Returns one entry per wrt node: float64 arrays normally, GraphValues when
    `create_graph` is set (those can be differentiated again).  Entries not
    reachable from `output` get zeros.  Without `create_graph` the traversed
    graph is freed afterwards; differentiating through it again raises
    ContractError.

    `stop_at_wrt` stops the traversal at wrt nodes instead of continuing into
    their ancestors.  That is an exact shortcut only when no wrt node is an
    ancestor of another wrt node (true for per-step inner gradients, where the
    wrt set is one step's parameter tensors); leave it off otherwise.
    """
    if not isinstance(output, GraphValue):
        raise ContractError("gradient: output must be a GraphValue")
    if output.data.size != 1:
        raise ContractError(f"gradient: output must be scalar, got shape {output.data.shape}")
    wrt = list(wrt)
    boundary = set(id(w) for w in wrt) if stop_at_wrt else None

    topo = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        if node._freed:
            raise ContractError(
                f"gradient: graph through op {node.op!r} was freed by an earlier "
                "backward pass (use create_graph to keep it)")
        stack.append((node, True))
        if boundary is not None and nid in boundary:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(output): constant(np.ones_like(output.data))}
    with _grad_mode(create_graph):
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._rule is None:
                continue
            if boundary is not None and id(node) in boundary and node is not output:
                continue
            parent_grads = node._rule(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                pid = id(p)
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else add(acc, pg)

    if not create_graph:
        for node in topo:
            if node._rule is not None:
                node._rule = None
                node.parents = ()
                node._freed = True

    results = []
    for w in wrt:
        g = grads.get(id(w))
        if create_graph:
            results.append(g if g is not None else constant(np.zeros_like(w.data)))
        else:
            results.append(np.array(g.data, dtype=np.float64) if g is not None
                           else np.zeros_like(w.data))
    return results


def finite_diff_gradient(f: Callable[[np.ndarray], float], point: np.ndarray,
                         eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Independent of the graph machinery; used as the reference oracle in tests.
    """
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = grad.reshape(-1)
    probe = point.copy()
    probe_flat = probe.reshape(-1)
    base = point.reshape(-1)
    for i in range(probe_flat.size):
        probe_flat[i] = base[i] + eps
        hi = float(f(probe))
        probe_flat[i] = base[i] - eps
        lo = float(f(probe))
        probe_flat[i] = base[i]
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def count_nodes(roots) -> int:
    """Number of distinct graph nodes reachable from `roots` via parents."""
    if isinstance(roots, GraphValue):
        roots = [roots]
    seen = set()
    stack = list(roots)
    while stack:
        node = stack.pop()
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(node.parents)
    return len(seen)
