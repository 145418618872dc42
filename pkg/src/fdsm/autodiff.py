"""Dense tensors with a nesting-capable reverse-mode differentiation engine.

A ``Tensor`` wraps a numpy array together with the operation that produced
it, its parent tensors and a vector-Jacobian closure, forming an
append-only record (a Wengert list) ordered by a global sequence number.
``gradient`` walks that record in reverse recording order. The VJP
closures are written in terms of the public ops, which dispatch on their
argument types: given raw numpy arrays they compute raw numpy results
(the fast final backward), given tensors they build new recorded nodes,
which is what makes backward passes themselves differentiable and lets
derivatives nest to any depth.

``Tape`` contexts instrument evaluation: they track nesting depth and the
bytes of tensor storage recorded while they are active. They are not
required for correctness of ``gradient`` but every module here opens them
so that cost counters are meaningful and comparable.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .counters import (
    count_bytes,
    count_derivative_pass,
    count_forward,
    note_tape_depth,
    release_bytes,
)

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "leaf",
    "constant",
    "as_tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "tsum",
    "tmean",
    "square",
    "power",
    "dot",
    "rowdot",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "reshape",
    "broadcast_to",
    "concat",
    "narrow",
    "gradient",
    "exact_directional_derivative",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; carries op and shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' and '.join(map(str, self.shapes))}")


_seq = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _in_backward() -> bool:
    return getattr(_local, "backward_depth", 0) > 0


class Tensor:
    """A dense array value plus its differentiation record.

    Leaves have no parents; ``requires_grad`` marks differentiation roots
    and propagates through ops. ``derived`` marks values produced by (or
    downstream of) a recorded backward pass, which is what distinguishes
    nested derivative passes from first-order ones in the counters.
    """

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "derived", "seq")

    def __init__(self, value, op="leaf", parents=(), vjp=None,
                 requires_grad=False, derived=False):
        self.value = np.asarray(value)
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.derived = derived
        self.seq = next(_seq)
        stack = _tape_stack()
        if stack:
            stack[-1]._record(self.value.nbytes)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, value={self.value!r})"

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

    def __pow__(self, n):
        return power(self, n)


class Tape:
    """Instrumentation scope for one level of differentiation.

    Tapes are confined to the thread that opened them. Entering pushes the
    tape onto the thread's stack (depth = stack height); tensors created
    while active charge their bytes to the innermost tape, released when
    it exits. Nested tapes model nested differentiation: an evaluation
    needing a T-th order input derivative runs its forward pass under T
    tapes (plus one more when a parameter gradient will follow).
    """

    __slots__ = ("depth", "recorded_bytes", "recorded_nodes")

    def __init__(self):
        self.depth = 0
        self.recorded_bytes = 0
        self.recorded_nodes = 0

    def _record(self, nbytes: int) -> None:
        self.recorded_bytes += nbytes
        self.recorded_nodes += 1
        count_bytes(nbytes)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        self.depth = len(stack)
        note_tape_depth(self.depth)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        release_bytes(self.recorded_bytes)
        return False


def leaf(value, requires_grad=False, dtype=None) -> Tensor:
    """Create a leaf tensor (a differentiation root when requires_grad).

    Floating dtypes are preserved; non-float input defaults to float64."""
    if dtype is not None:
        arr = np.array(value, dtype=dtype)
    else:
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
    return Tensor(arr, op="leaf", requires_grad=requires_grad)


def constant(value, dtype=None) -> Tensor:
    return leaf(value, requires_grad=False, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, dtype=dtype)


def _value(x):
    return x.value if isinstance(x, Tensor) else x


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _coerce_raw(x, like):
    """Coerce a python scalar / list to an ndarray matching `like`'s dtype."""
    if isinstance(x, (Tensor, np.ndarray)):
        return x
    ref = _value(like)
    dtype = ref.dtype if isinstance(ref, np.ndarray) else np.float64
    return np.asarray(x, dtype=dtype)


def _node(value, op, parents, vjp):
    """Wrap an op result. Parents that are raw arrays become constants;
    graph metadata is dropped when no parent needs a derivative."""
    requires = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    derived = _in_backward() or any(isinstance(p, Tensor) and p.derived for p in parents)
    if not requires:
        return Tensor(value, op=op, requires_grad=False, derived=derived)
    parents = tuple(p if isinstance(p, Tensor) else constant(p) for p in parents)
    return Tensor(value, op=op, parents=parents, vjp=vjp,
                  requires_grad=True, derived=derived)


def _suffix_compatible(sa, sb) -> bool:
    """Shapes conform when equal, scalar, or one is a trailing suffix of
    the other (broadcast over leading batch dimensions only)."""
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return True
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _check_elementwise(op, a, b):
    sa, sb = np.shape(_value(a)), np.shape(_value(b))
    if not _suffix_compatible(sa, sb):
        raise ShapeError(op, sa, sb)


def _unbroadcast(g, target_shape):
    """Reduce a gradient back to the (suffix-)shape of the operand."""
    gs = np.shape(_value(g))
    if gs == tuple(target_shape):
        return g
    extra = len(gs) - len(target_shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra))) if isinstance(g, Tensor) else g.sum(axis=tuple(range(extra)))
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _coerce_raw(a, b), _coerce_raw(b, a)
    _check_elementwise("add", a, b)
    if not _is_tensor(a, b):
        return np.add(a, b)
    out = np.add(_value(a), _value(b))
    sa, sb = np.shape(_value(a)), np.shape(_value(b))

    def vjp(g, a, b):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(out, "add", (a, b), vjp)


def sub(a, b):
    a, b = _coerce_raw(a, b), _coerce_raw(b, a)
    _check_elementwise("sub", a, b)
    if not _is_tensor(a, b):
        return np.subtract(a, b)
    out = np.subtract(_value(a), _value(b))
    sa, sb = np.shape(_value(a)), np.shape(_value(b))

    def vjp(g, a, b):
        return _unbroadcast(g, sa), _unbroadcast(neg(g), sb)

    return _node(out, "sub", (a, b), vjp)


def neg(a):
    if not _is_tensor(a):
        return np.negative(a)

    def vjp(g, a):
        return (neg(g),)

    return _node(np.negative(_value(a)), "neg", (a,), vjp)


def mul(a, b):
    a, b = _coerce_raw(a, b), _coerce_raw(b, a)
    _check_elementwise("mul", a, b)
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    out = np.multiply(_value(a), _value(b))
    sa, sb = np.shape(_value(a)), np.shape(_value(b))

    def vjp(g, a, b):
        return _unbroadcast(mul(g, b), sa), _unbroadcast(mul(g, a), sb)

    return _node(out, "mul", (a, b), vjp)


def div(a, b):
    a, b = _coerce_raw(a, b), _coerce_raw(b, a)
    _check_elementwise("div", a, b)
    if not _is_tensor(a, b):
        return np.divide(a, b)
    out = np.divide(_value(a), _value(b))
    sa, sb = np.shape(_value(a)), np.shape(_value(b))

    def vjp(g, a, b):
        ga = _unbroadcast(div(g, b), sa)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), sb)
        return ga, gb

    return _node(out, "div", (a, b), vjp)


def scale(a, c: float):
    """Multiply by a python scalar constant."""
    c = float(c)
    if not _is_tensor(a):
        v = np.asarray(a)
        return v * v.dtype.type(c) if v.dtype.kind == "f" else v * c

    def vjp(g, a):
        return (scale(g, c),)

    av = _value(a)
    return _node(av * av.dtype.type(c), "scale", (a,), vjp)


def square(a):
    if not _is_tensor(a):
        return np.square(a)

    def vjp(g, a):
        return (mul(g, scale(a, 2.0)),)

    return _node(np.square(_value(a)), "square", (a,), vjp)


def power(a, n: int):
    n = int(n)
    if n < 0:
        raise ValueError("power: only nonnegative integer exponents")
    if not _is_tensor(a):
        return np.power(a, n)

    def vjp(g, a):
        if n == 0:
            return (scale(g, 0.0),)
        if n == 1:
            return (g,)
        return (mul(g, scale(power(a, n - 1), float(n))),)

    return _node(np.power(_value(a), n), "power", (a,), vjp)


# ----------------------------------------------------------------------
# transcendental


def exp(a):
    if not _is_tensor(a):
        return np.exp(a)
    out = np.exp(_value(a))

    def vjp(g, a):
        return (mul(g, exp(a)),)

    return _node(out, "exp", (a,), vjp)


def log(a):
    # NaN propagates for nonpositive inputs, matching numpy semantics.
    if not _is_tensor(a):
        return np.log(a)

    def vjp(g, a):
        return (div(g, a),)

    return _node(np.log(_value(a)), "log", (a,), vjp)


def _softplus_raw(x):
    return np.logaddexp(x.dtype.type(0), x)


def _sigmoid_raw(x):
    # exp(-softplus(-x)): stable on both tails
    return np.exp(-np.logaddexp(x.dtype.type(0), -x))


def softplus(a):
    if not _is_tensor(a):
        return _softplus_raw(np.asarray(a))
    out = _softplus_raw(_value(a))

    def vjp(g, a):
        return (mul(g, sigmoid(a)),)

    return _node(out, "softplus", (a,), vjp)


def sigmoid(a):
    if not _is_tensor(a):
        return _sigmoid_raw(np.asarray(a))
    out = _sigmoid_raw(_value(a))

    def vjp(g, a):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _node(out, "sigmoid", (a,), vjp)


# ----------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    av, bv = _value(a), _value(b)
    if np.ndim(av) != 2 or np.ndim(bv) != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", np.shape(av), np.shape(bv))
    if not _is_tensor(a, b):
        return av @ bv

    def vjp(g, a, b):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node(av @ bv, "matmul", (a, b), vjp)


def transpose(a):
    av = _value(a)
    if np.ndim(av) != 2:
        raise ShapeError("transpose", np.shape(av))
    if not _is_tensor(a):
        return av.T

    def vjp(g, a):
        return (transpose(g),)

    return _node(av.T, "transpose", (a,), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None):
    av = _value(a)
    axis = _norm_axis(axis, np.ndim(av))
    if not _is_tensor(a):
        return np.sum(av, axis=axis)
    out = np.sum(av, axis=axis)
    in_shape = av.shape

    def vjp(g, a):
        if axis is None:
            return (broadcast_to(g, in_shape),)
        kept = list(in_shape)
        for ax in axis:
            kept[ax] = 1
        return (broadcast_to(reshape(g, tuple(kept)), in_shape),)

    return _node(out, "sum", (a,), vjp)


def tmean(a, axis=None):
    av = _value(a)
    naxis = _norm_axis(axis, np.ndim(av))
    count = av.size if naxis is None else int(np.prod([av.shape[ax] for ax in naxis]))
    if count == 0:
        raise ShapeError("mean", av.shape)
    return scale(tsum(a, axis=axis), 1.0 / count)


def dot(a, b):
    """Inner product of two 1-D tensors."""
    av, bv = _value(a), _value(b)
    if np.ndim(av) != 1 or np.shape(av) != np.shape(bv):
        raise ShapeError("dot", np.shape(av), np.shape(bv))
    return tsum(mul(a, b))


def rowdot(a, b):
    """Per-row inner product of two [B, d] tensors -> [B]."""
    av, bv = _value(a), _value(b)
    if np.shape(av) != np.shape(bv) or np.ndim(av) != 2:
        raise ShapeError("rowdot", np.shape(av), np.shape(bv))
    return tsum(mul(a, b), axis=-1)


def reshape(a, shape):
    shape = tuple(shape)
    av = _value(a)
    if not _is_tensor(a):
        return np.reshape(av, shape)
    in_shape = av.shape

    def vjp(g, a):
        return (reshape(g, in_shape),)

    return _node(np.reshape(av, shape), "reshape", (a,), vjp)


def broadcast_to(a, shape):
    """General numpy-style broadcast (internal: used by reduction VJPs)."""
    shape = tuple(shape)
    av = _value(a)
    if not _is_tensor(a):
        return np.broadcast_to(av, shape).copy()
    in_shape = av.shape

    def vjp(g, a):
        extra = len(shape) - len(in_shape)
        reduce_axes = tuple(range(extra)) + tuple(
            extra + i for i, n in enumerate(in_shape) if n == 1 and shape[extra + i] != 1
        )
        out = tsum(g, axis=reduce_axes) if reduce_axes else g
        return (reshape(out, in_shape),)

    return _node(np.broadcast_to(av, shape).copy(), "broadcast_to", (a,), vjp)


def concat(parts: Sequence, axis: int = 0):
    """Concatenate along the leading (row) axis."""
    if axis != 0:
        raise ValueError("concat: only axis 0 is supported")
    vals = [_value(p) for p in parts]
    if len({np.shape(v)[1:] for v in vals}) > 1:
        raise ShapeError("concat", *[np.shape(v) for v in vals])
    if not _is_tensor(*parts):
        return np.concatenate(vals, axis=0)
    out = np.concatenate(vals, axis=0)
    sizes = [np.shape(v)[0] for v in vals]

    def vjp(g, *parts):
        grads, start = [], 0
        for n in sizes:
            grads.append(narrow(g, start, start + n))
            start += n
        return tuple(grads)

    return _node(out, "concat", tuple(parts), vjp)


def narrow(a, start: int, stop: int):
    """Rows [start, stop) along the leading axis."""
    av = _value(a)
    n = np.shape(av)[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError("narrow", np.shape(av), (start, stop))
    if not _is_tensor(a):
        return av[start:stop].copy()
    tail = av.shape[1:]

    def vjp(g, a):
        gv = _value(g)
        zeros_before = np.zeros((start,) + tail, dtype=gv.dtype)
        zeros_after = np.zeros((n - stop,) + tail, dtype=gv.dtype)
        return (concat([zeros_before, g, zeros_after]),)

    return _node(av[start:stop].copy(), "narrow", (a,), vjp)


# ----------------------------------------------------------------------
# differentiation


def gradient(output, wrt, create_graph: bool | None = None):
    """d(output)/d(w) for every w in `wrt`, by one reverse pass.

    `output` must be scalar. With create_graph the backward computations
    are themselves recorded, so the returned tensors can be differentiated
    again; the default records exactly when a tape is active. Without it
    the pass runs on raw arrays and returns ndarrays. Requested tensors
    that the output does not depend on yield zeros of matching shape.
    """
    if not isinstance(output, Tensor):
        raise TypeError("gradient: output must be a Tensor")
    if output.value.size != 1:
        raise ValueError(f"gradient: output must be scalar, got shape {output.value.shape}")
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    for w in wrt_list:
        if not isinstance(w, Tensor):
            raise TypeError("gradient: wrt entries must be Tensors")
    if create_graph is None:
        create_graph = bool(_tape_stack())

    count_derivative_pass(nested=output.derived)

    seed_val = np.ones_like(output.value)
    adjoints: dict[int, object] = {}
    keep: dict[int, Tensor] = {id(output): output}
    wrt_ids = {id(w) for w in wrt_list if w.requires_grad}
    captured: dict[int, object] = {}
    if create_graph:
        _local.backward_depth = getattr(_local, "backward_depth", 0) + 1
        adjoints[id(output)] = Tensor(seed_val, op="seed", derived=True)
    else:
        adjoints[id(output)] = seed_val

    try:
        if output.requires_grad:
            pending = [(-output.seq, id(output))]
            queued = {id(output)}
            while pending:
                _, nid = heapq.heappop(pending)
                node = keep[nid]
                adj = adjoints.pop(nid)
                if nid in wrt_ids:
                    # all consumers have higher seq, so adj is complete here
                    captured[nid] = adj
                if not node.parents:
                    continue
                args = node.parents if create_graph else tuple(p.value for p in node.parents)
                parent_grads = node.vjp(adj, *args)
                for p, g in zip(node.parents, parent_grads):
                    if not p.requires_grad or g is None:
                        continue
                    pid = id(p)
                    keep[pid] = p
                    if pid in adjoints:
                        adjoints[pid] = add(adjoints[pid], g)
                    else:
                        adjoints[pid] = g
                    if pid not in queued:
                        queued.add(pid)
                        heapq.heappush(pending, (-p.seq, pid))
    finally:
        if create_graph:
            _local.backward_depth -= 1

    results = []
    for w in wrt_list:
        g = captured.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.value), derived=True) if create_graph else np.zeros_like(w.value)
        results.append(g)
    return results[0] if single else results


def exact_directional_derivative(f: Callable[[Tensor], Tensor], x, v, order: int) -> float:
    """T-fold nested directional derivative: applies (v . grad_x) `order`
    times to the scalar map f and returns the exact value.

    The forward pass runs under `order` tapes; each differentiation level
    consumes one, so counters report tape depth = order and one derivative
    pass per level (all but the first nested).
    """
    order = int(order)
    if order < 1:
        raise ValueError(f"exact_directional_derivative: order must be >= 1, got {order}")
    xv = np.asarray(_value(x))
    vv = np.asarray(_value(v))
    if xv.shape != vv.shape:
        raise ShapeError("exact_directional_derivative", xv.shape, vv.shape)

    x_leaf = leaf(xv, requires_grad=True, dtype=xv.dtype)
    v_const = constant(vv, dtype=vv.dtype)

    tapes = [Tape() for _ in range(order)]
    for t in tapes:
        t.__enter__()
    try:
        count_forward(1)
        cur = f(x_leaf)
        if not isinstance(cur, Tensor) or cur.value.size != 1:
            raise ValueError("exact_directional_derivative: f must return a scalar Tensor")
        for level in range(order):
            tapes[order - 1 - level].__exit__(None, None, None)
            last = level == order - 1
            g = gradient(cur, x_leaf, create_graph=not last)
            if last:
                return float(np.sum(np.asarray(_value(g)) * vv))
            cur = tsum(mul(g, v_const))
    except BaseException:
        while _tape_stack() and _tape_stack()[-1] in tapes:
            _tape_stack()[-1].__exit__(None, None, None)
        raise
    raise AssertionError("unreachable")
