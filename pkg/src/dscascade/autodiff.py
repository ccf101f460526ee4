"""Reverse-mode automatic differentiation over small dense float64 tensors.

Ops record onto a Tape. The backward pass builds adjoints out of the same
primitive ops, so a gradient is itself a differentiable tape value; one nested
level (gradient-of-gradient) is supported for the ops used by the Lyapunov
machinery (tanh, softplus, sigmoid, smooth_relu, matmul, elementwise
arithmetic, reductions). relu deliberately has no second derivative.

A finished tape can be re-executed with ``Tape.replay`` after overwriting leaf
values, which is how the training loop avoids rebuilding the graph every
epoch.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import SecondDerivativeError, ShapeError

_DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf tripwire applied to every newly recorded value."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


class Tensor:
    """Handle to one node on a tape: a shape plus a float64 value buffer."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple:
        return self.tape._values[self.idx].shape

    def assign(self, value) -> None:
        """Overwrite a leaf's buffer (used between replays)."""
        if self.tape._compute[self.idx] is not None:
            raise ValueError("only leaf tensors can be assigned")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"assign shape {arr.shape} != leaf shape {self.shape}")
        self.tape._values[self.idx] = arr

    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(op={self.tape._ops[self.idx]}, shape={self.shape})"


class Tape:
    """Ordered record of operations; inputs of every node precede it."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []          # callable(adj Tensor) -> tuple of contribs, or None
        self._rg: list[bool] = []      # requires_grad
        self._compute: list = []       # callable(*parent values) -> value, None for leaves
        self._program: list | None = None
        self._transpose_cache: dict[int, int] = {}
        self.adjoints: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self._values)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        return self._record("leaf", arr, (), None, None, requires_grad)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def _record(self, op, value, parents, vjp, compute, requires_grad) -> Tensor:
        if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by op '{op}'")
        idx = len(self._values)
        for p in parents:
            if p >= idx:
                raise AssertionError("tape order violated")
        self._values.append(value)
        self._ops.append(op)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._rg.append(requires_grad)
        self._compute.append(compute)
        self._program = None
        return Tensor(self, idx)

    def freeze(self, outputs: Sequence["Tensor"]) -> None:
        """Compile a replay program restricted to the ancestors of ``outputs``.

        Dead nodes (recorded but not feeding any requested output) are skipped
        on every subsequent replay.
        """
        live = [False] * len(self._values)
        stack = [t.idx for t in outputs]
        while stack:
            nid = stack.pop()
            if live[nid]:
                continue
            live[nid] = True
            stack.extend(self._parents[nid])
        self._program = self._compile(live)

    def _compile(self, live=None) -> list:
        values = self._values
        program = []
        for idx, fn in enumerate(self._compute):
            if fn is None or (live is not None and not live[idx]):
                continue
            ps = self._parents[idx]
            if len(ps) == 1:
                def step(values=values, fn=fn, i=idx, p0=ps[0]):
                    values[i] = fn(values[p0])
            elif len(ps) == 2:
                def step(values=values, fn=fn, i=idx, p0=ps[0], p1=ps[1]):
                    values[i] = fn(values[p0], values[p1])
            elif len(ps) == 3:
                def step(values=values, fn=fn, i=idx, p0=ps[0], p1=ps[1], p2=ps[2]):
                    values[i] = fn(values[p0], values[p1], values[p2])
            else:
                def step(values=values, fn=fn, i=idx, ps=ps):
                    values[i] = fn(*[values[p] for p in ps])
            program.append(step)
        return program

    def replay(self) -> None:
        """Recompute every non-leaf value in recording order."""
        if self._program is None:
            self._program = self._compile()
        for step in self._program:
            step()

    def reset(self) -> None:
        """Drop all recorded nodes; the tape can record a fresh graph."""
        self.__init__()


def _wrap(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _op(op_name, inputs: Sequence[Tensor], fn: Callable, vjp_builder) -> Tensor:
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ShapeError("tensors live on different tapes")
    try:
        value = fn(*[t.value for t in inputs])
    except ValueError as exc:
        shapes = [t.shape for t in inputs]
        raise ShapeError(f"op '{op_name}' got incompatible shapes {shapes}") from exc
    rg = any(tape._rg[t.idx] for t in inputs)
    out = tape._record(op_name, value, tuple(t.idx for t in inputs),
                       None, fn, rg)
    if rg:
        tape._vjps[out.idx] = vjp_builder(inputs, out)
    return out


def _unbroadcast(g: Tensor, target_shape: tuple) -> Tensor:
    """Reduce an adjoint back to the shape of a broadcast input."""
    if g.shape == target_shape:
        return g
    extra = len(g.shape) - len(target_shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(target_shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != target_shape:
        g = reshape(g, target_shape)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    return _op("add", (a, b), np.add, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(neg(g), y.shape))
    return _op("sub", (a, b), np.subtract, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (_unbroadcast(mul(g, y), x.shape),
                          _unbroadcast(mul(g, x), y.shape))
    return _op("mul", (a, b), np.multiply, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (_unbroadcast(div(g, y), x.shape),
                          _unbroadcast(neg(div(mul(g, out), y)), y.shape))
    return _op("div", (a, b), np.divide, vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        return lambda g: (neg(g),)
    return _op("neg", (a,), np.negative, vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(inputs, out):
        return lambda g: (scalar_mul(g, c),)
    return _op("scalar_mul", (a,), lambda x: x * c, vjp)


def square(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (scalar_mul(mul(g, x), 2.0),)
    return _op("square", (a,), np.square, vjp)


def sqrt(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        return lambda g: (scalar_mul(div(g, out), 0.5),)
    return _op("sqrt", (a,), np.sqrt, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (matmul(g, transpose(y)), matmul(transpose(x), g))
    return _op("matmul", (a, b), np.matmul, vjp)


def transpose(a: Tensor) -> Tensor:
    cached = a.tape._transpose_cache.get(a.idx)
    if cached is not None:
        return Tensor(a.tape, cached)

    def vjp(inputs, out):
        return lambda g: (transpose(g),)
    out = _op("transpose", (a,), lambda x: np.ascontiguousarray(x.T), vjp)
    a.tape._transpose_cache[a.idx] = out.idx
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 1 or len(b.shape) != 1:
        raise ShapeError(f"dot expects 1-D operands, got {a.shape}, {b.shape}")

    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (mul(g, y), mul(g, x))
    return _op("dot", (a, b), np.dot, vjp)


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        return lambda g: (sub(g, mul(g, square(out))),)
    return _op("tanh", (a,), np.tanh, vjp)


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        def bw(g):
            one = out.tape.constant(np.ones(out.shape))
            return (mul(g, mul(out, sub(one, out))),)
        return bw
    return _op("sigmoid", (a,), _sigmoid_np, vjp)


def softplus(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (mul(g, sigmoid(x)),)
    return _op("softplus", (a,), lambda x: np.logaddexp(0.0, x), vjp)


def relu(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (mul(g, heaviside(x)),)
    return _op("relu", (a,), lambda x: np.maximum(x, 0.0), vjp)


def heaviside(a: Tensor) -> Tensor:
    def vjp(inputs, out):
        def bw(g):
            raise SecondDerivativeError(
                "relu has no second derivative; use tanh/softplus/smooth_relu "
                "on twice-differentiated paths")
        return bw
    return _op("heaviside", (a,), lambda x: (x > 0.0).astype(np.float64), vjp)


def _smooth_relu_np(x, width):
    return np.where(x <= 0.0, 0.0,
                    np.where(x < width, x * x / (2.0 * width), x - 0.5 * width))


def _smooth_relu_grad_np(x, width):
    return np.where(x <= 0.0, 0.0, np.where(x < width, x / width, 1.0))


def _smooth_relu_curv_np(x, width):
    return np.where((x > 0.0) & (x < width), 1.0 / width, 0.0)


def smooth_relu(a: Tensor, width: float) -> Tensor:
    """C1 rectifier: 0, then quadratic on (0, width), then linear."""
    w = float(width)

    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (mul(g, smooth_relu_grad(x, w)),)
    return _op("smooth_relu", (a,), lambda x: _smooth_relu_np(x, w), vjp)


def smooth_relu_grad(a: Tensor, width: float) -> Tensor:
    w = float(width)

    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (mul(g, smooth_relu_curv(x, w)),)
    return _op("smooth_relu_grad", (a,), lambda x: _smooth_relu_grad_np(x, w), vjp)


def smooth_relu_curv(a: Tensor, width: float) -> Tensor:
    w = float(width)

    def vjp(inputs, out):
        def bw(g):
            raise SecondDerivativeError(
                "smooth_relu supports one nested differentiation level only")
        return bw
    return _op("smooth_relu_curv", (a,), lambda x: _smooth_relu_curv_np(x, w), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def vjp(inputs, out):
        (x,) = inputs

        def bw(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                kd_shape = list(in_shape)
                for ax in axes:
                    kd_shape[ax] = 1
                g = reshape(g, tuple(kd_shape))
            return (broadcast_to(g, in_shape),)
        return bw
    return _op("sum", (a,), lambda x: x.sum(axis=axis, keepdims=keepdims), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = int(np.prod(a.shape)) if a.shape else 1
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm_sq(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squares, optionally along an axis."""
    return sum_(square(a), axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    in_shape = a.shape
    shape = tuple(shape)

    def vjp(inputs, out):
        return lambda g: (reshape(g, in_shape),)
    return _op("reshape", (a,), lambda x: np.reshape(x, shape), vjp)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    in_shape = a.shape
    shape = tuple(shape)

    def vjp(inputs, out):
        return lambda g: (_unbroadcast(g, in_shape),)
    return _op("broadcast_to", (a,),
               lambda x: np.ascontiguousarray(np.broadcast_to(x, shape)), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]

    def vjp(inputs, out):
        def bw(g):
            contribs = []
            start = 0
            for size in sizes:
                contribs.append(slice_along(g, axis, start, start + size))
                start += size
            return tuple(contribs)
        return bw
    return _op("concat", tuple(tensors),
               lambda *xs: np.concatenate(xs, axis=axis), vjp)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    in_shape = a.shape
    sl = tuple(slice(None) if i != axis else slice(start, stop)
               for i in range(len(in_shape)))

    def vjp(inputs, out):
        def bw(g):
            tape = g.tape
            parts = []
            if start > 0:
                before = list(in_shape)
                before[axis] = start
                parts.append(tape.constant(np.zeros(before)))
            parts.append(g)
            if stop < in_shape[axis]:
                after = list(in_shape)
                after[axis] = in_shape[axis] - stop
                parts.append(tape.constant(np.zeros(after)))
            return (concat(parts, axis=axis) if len(parts) > 1 else parts[0],)
        return bw
    return _op("slice", (a,), lambda x: np.ascontiguousarray(x[sl]), vjp)


# ---------------------------------------------------------------------------
# fused ops (node-count relief for the training hot path)

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for a batch of row vectors."""
    if len(x.shape) != 2 or len(w.shape) != 2 or len(b.shape) != 1:
        raise ShapeError(f"affine expects (B,k) @ (k,m) + (m,), got "
                         f"{x.shape}, {w.shape}, {b.shape}")

    def vjp(inputs, out):
        xi, wi, _ = inputs
        return lambda g: (matmul(g, transpose(wi)),
                          matmul(transpose(xi), g),
                          sum_(g, axis=0))
    return _op("affine", (x, w, b), lambda xv, wv, bv: xv @ wv + bv, vjp)


def linear2(x: Tensor, w: Tensor, y: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """x @ w + y @ u + b; the two-input layer of an input-convex network."""
    def vjp(inputs, out):
        xi, wi, yi, ui, _ = inputs
        return lambda g: (matmul(g, transpose(wi)),
                          matmul(transpose(xi), g),
                          matmul(g, transpose(ui)),
                          matmul(transpose(yi), g),
                          sum_(g, axis=0))
    return _op("linear2", (x, w, y, u, b),
               lambda xv, wv, yv, uv, bv: xv @ wv + yv @ uv + bv, vjp)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot product of two (B,d) matrices, returned as (B,1)."""
    if a.shape != b.shape or len(a.shape) != 2:
        raise ShapeError(f"row_dot expects matching 2-D shapes, got {a.shape}, {b.shape}")

    def vjp(inputs, out):
        x, y = inputs
        return lambda g: (mul(g, y), mul(g, x))
    return _op("row_dot", (a, b),
               lambda x, y: (x * y).sum(axis=1, keepdims=True), vjp)


def row_norm_sq(a: Tensor) -> Tensor:
    """Per-row squared Euclidean norm of a (B,d) matrix, returned as (B,1)."""
    def vjp(inputs, out):
        (x,) = inputs
        return lambda g: (scalar_mul(mul(g, x), 2.0),)
    return _op("row_norm_sq", (a,),
               lambda x: (x * x).sum(axis=1, keepdims=True), vjp)


# ---------------------------------------------------------------------------
# backward pass

def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Reverse sweep from a scalar output; returns taped adjoints for ``wrt``.

    Adjoints are built from primitive ops, so they can be differentiated
    again by a later backward call on the same tape.
    """
    if output.tape is not tape:
        raise ShapeError("output does not belong to this tape")
    if output.shape != ():
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    vjps = tape._vjps
    parents = tape._parents
    rg = tape._rg
    # Adjoints only matter on nodes lying between the output and a wrt tensor;
    # skipping the rest keeps nested backward passes from dragging whole
    # parameter cones onto the tape.
    feeds = bytearray(output.idx + 1)
    for t in wrt:
        if not rg[t.idx]:
            raise ShapeError(
                "cannot differentiate with respect to a constant; create it "
                "with Tape.leaf")
        if t.idx <= output.idx:
            feeds[t.idx] = 1
    for nid in range(output.idx + 1):
        if not feeds[nid]:
            for p in parents[nid]:
                if feeds[p]:
                    feeds[nid] = 1
                    break
    adj: dict[int, Tensor] = {output.idx: tape.constant(np.float64(1.0))}
    for nid in range(output.idx, -1, -1):
        g = adj.get(nid)
        if g is None:
            continue
        bw = vjps[nid]
        if bw is None:
            continue
        contribs = bw(g)
        for p, c in zip(parents[nid], contribs):
            if c is None or not rg[p] or not feeds[p]:
                continue
            prev = adj.get(p)
            adj[p] = c if prev is None else add(prev, c)
    tape.adjoints = adj
    out = []
    for t in wrt:
        g = adj.get(t.idx)
        if g is None:
            g = tape.constant(np.zeros(t.shape))
        out.append(g)
    return out


def _subgraph_ops(tape: Tape, root: Tensor) -> set:
    seen = set()
    stack = [root.idx]
    ops = set()
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        ops.add(tape._ops[nid])
        stack.extend(tape._parents[nid])
    return ops


def gradient_of_scalar_field(field: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """Spatial gradient of a scalar field, returned as a differentiable value.

    ``field`` must be built from primitives with defined second derivatives;
    relu anywhere on the path is rejected because the returned gradient is
    expected to be differentiated again.
    """
    if not x.tape._rg[x.idx]:
        raise ShapeError("gradient point must be a differentiable leaf, not a constant")
    y = field(x)
    if y.shape != ():
        raise ShapeError(f"field must produce a scalar, got shape {y.shape}")
    ops = _subgraph_ops(x.tape, y)
    if "relu" in ops or "heaviside" in ops:
        raise SecondDerivativeError(
            "relu on a differentiated path has no usable second derivative")
    return backward(x.tape, y, [x])[0]
