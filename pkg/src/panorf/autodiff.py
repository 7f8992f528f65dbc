"""Reverse-mode automatic differentiation over dense numpy arrays.

A forward pass records primitive operations (affine maps, elementwise
nonlinearities, softmax, gathers/scatters, reductions, products, exp) on a
:class:`Tape`.  Calling :meth:`Tape.backward` replays the record in exact
reverse order and accumulates vector-Jacobian products into the ``.grad``
buffers of the leaf :class:`Var` objects reached by the graph.

Design notes:

* Operations executed while no tape is active just compute values; nothing is
  recorded, which makes inference-time rendering cheap.
* ``stop_gradient`` re-wraps a value as a constant: downstream gradients are
  never propagated through it.  This is the primitive behind the renderer's
  "gradient blocking" of compositing weights.
* Gradient accumulation visits nodes in exact reverse creation order with a
  fixed ``+=`` reduction, so repeated runs are bitwise reproducible.
* Training runs in float32; gradient-check tests run the same code in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteLossError(RuntimeError):
    """Raised when backward() is asked to differentiate a non-finite loss."""


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Var:
    """An array value, optionally connected to the recorded graph.

    ``grad`` is ``None`` until backward reaches the node.  Leaf parameters get
    a persistent zero-initialised buffer from their parameter store instead.
    """

    __slots__ = ("value", "grad", "op", "needs_grad", "_parents", "_vjp")

    def __init__(self, value: np.ndarray, *, needs_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.grad: np.ndarray | None = None
        self.op = op
        self.needs_grad = needs_grad
        self._parents: tuple[Var, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Var(op={self.op!r}, shape={self.value.shape}, needs_grad={self.needs_grad})"

    # Operator sugar, used sparingly; most call sites use the module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of one forward pass, replayable backwards.

    Use as a context manager::

        with Tape() as tape:
            loss = forward(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

        The loss must be a finite scalar; otherwise the first operation that
        produced a non-finite value is named in the raised error.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        if not np.all(np.isfinite(loss.value)):
            culprit = self._first_non_finite()
            raise NonFiniteLossError(
                f"loss is non-finite; first non-finite intermediate: {culprit}"
            )
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    # pg may alias g (e.g. both parents of add receive the
                    # same array); never mutate it in place afterwards.
                    parent.grad = pg
                elif parent.grad.flags.writeable and parent._vjp is None:
                    # Leaf with a persistent buffer: accumulate in place.
                    np.add(parent.grad, pg, out=parent.grad)
                else:
                    parent.grad = parent.grad + pg
            node.grad = None  # free intermediate gradients eagerly

    def _first_non_finite(self) -> str:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                return f"op '{node.op}' (node {i} of {len(self.nodes)})"
        return "loss itself (all recorded intermediates are finite)"


def as_var(x, dtype=None) -> Var:
    """Wrap plain arrays/scalars as constant Vars; pass Vars through."""
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=dtype), op="const")


def leaf(value: np.ndarray, *, op: str = "param") -> Var:
    v = Var(value, needs_grad=True, op=op)
    v.grad = np.zeros_like(value)
    return v


def stop_gradient(v: Var) -> Var:
    """A value identical to ``v`` that propagates zero gradient to its inputs."""
    v = as_var(v)
    return Var(v.value, needs_grad=False, op="stop_gradient")


def _record(value: np.ndarray, parents: tuple[Var, ...], vjp, op: str) -> Var:
    tape = active_tape()
    needs = any(p.needs_grad for p in parents)
    out = Var(value, needs_grad=needs and tape is not None, op=op)
    if tape is not None and needs:
        out._parents = parents
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g, av.shape) if a.needs_grad else None,
                _unbroadcast(g, bv.shape) if b.needs_grad else None)

    return _record(av + bv, (a, b), vjp, "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g, av.shape) if a.needs_grad else None,
                _unbroadcast(-g, bv.shape) if b.needs_grad else None)

    return _record(av - bv, (a, b), vjp, "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if a.needs_grad else None,
                _unbroadcast(g * av, bv.shape) if b.needs_grad else None)

    return _record(av * bv, (a, b), vjp, "mul")


def neg(a) -> Var:
    a = as_var(a)
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.T if a.needs_grad else None
        gb = av.T @ g if b.needs_grad else None
        return ga, gb

    return _record(av @ bv, (a, b), vjp, "matmul")


def affine(x, w, b) -> Var:
    """x @ w + b with a broadcast bias; the MLP building block."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Var:
    a = as_var(a)
    out_val = np.exp(a.value)
    return _record(out_val, (a,), lambda g: (g * out_val,), "exp")


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def softplus(a) -> Var:
    """log(1 + e^x), computed in the overflow-safe form."""
    a = as_var(a)
    av = a.value
    out_val = np.logaddexp(np.zeros((), dtype=av.dtype), av)

    def vjp(g):
        return (g * _sigmoid_val(av),)

    return _record(out_val, (a,), vjp, "softplus")


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    out_val = _sigmoid_val(a.value)
    return _record(out_val, (a,), lambda g: (g * out_val * (1.0 - out_val),), "sigmoid")


def relu(a) -> Var:
    a = as_var(a)
    av = a.value

    def vjp(g):
        return (g * (av > 0),)

    return _record(np.maximum(av, 0), (a,), vjp, "relu")


def clamp_min(a, floor: float) -> Var:
    """max(a, floor) against a scalar; gradient passes where a >= floor."""
    a = as_var(a)
    av = a.value

    def vjp(g):
        return (g * (av >= floor),)

    return _record(np.maximum(av, floor), (a,), vjp, "clamp_min")


def maximum(a, b) -> Var:
    """Elementwise max of two arrays; ties route gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    a_wins = av >= bv

    def vjp(g):
        return (_unbroadcast(g * a_wins, av.shape) if a.needs_grad else None,
                _unbroadcast(g * ~a_wins, bv.shape) if b.needs_grad else None)

    return _record(np.where(a_wins, av, bv), (a, b), vjp, "maximum")


def where(cond: np.ndarray, a, b) -> Var:
    """Select by a constant boolean mask."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * cond, av.shape) if a.needs_grad else None,
                _unbroadcast(g * ~cond, bv.shape) if b.needs_grad else None)

    return _record(np.where(cond, av, bv), (a, b), vjp, "where")


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_val).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_val,)

    return _record(out_val, (a,), vjp, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    av = a.value
    out_val = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _record(out_val, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum_exclusive(a) -> Var:
    """Exclusive prefix sum along the last axis: out[..., i] = sum(a[..., :i]).

    This is the quadrature behind volumetric transmittance, where the optical
    depth accumulated *before* each sample is needed.
    """
    a = as_var(a)
    av = a.value
    c = np.cumsum(av, axis=-1)
    out_val = np.concatenate([np.zeros_like(av[..., :1]), c[..., :-1]], axis=-1)

    def vjp(g):
        # d out_i / d a_j = 1 for j < i, so grad_j = sum_{i > j} g_i.
        tail = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return (tail - g,)

    return _record(out_val, (a,), vjp, "cumsum_exclusive")


def reshape(a, shape) -> Var:
    a = as_var(a)
    av = a.value
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        gs = np.split(g, splits, axis=axis)
        return [gi if p.needs_grad else None for p, gi in zip(parts, gs)]

    return _record(np.concatenate([p.value for p in parts], axis=axis),
                   tuple(parts), vjp, "concat")


# ---------------------------------------------------------------------------
# gathers / scatters


def _scatter_rows_sum(idx: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``vals`` into ``n_rows`` buckets given by ``idx``."""
    if vals.ndim == 1:
        out = np.bincount(idx, weights=vals, minlength=n_rows)
        return out.astype(vals.dtype, copy=False)
    m, c = vals.shape
    out = np.empty((n_rows, c), dtype=vals.dtype)
    for j in range(c):
        out[:, j] = np.bincount(idx, weights=vals[:, j], minlength=n_rows)
    return out


def take_rows(a, idx: np.ndarray, *, unique: bool = False) -> Var:
    """Gather rows along axis 0.  Set ``unique=True`` when indices never repeat
    (enables a faster scatter-assign backward)."""
    a = as_var(a)
    av = a.value

    def vjp(g):
        if unique:
            out = np.zeros_like(av)
            out[idx] = g
            return (out,)
        return (_scatter_rows_sum(idx, g, av.shape[0]),)

    return _record(av[idx], (a,), vjp, "take_rows")


def scatter_rows(vals, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows at unique indices of a zero array of ``n_rows`` rows."""
    vals = as_var(vals)
    vv = vals.value
    out_val = np.zeros((n_rows,) + vv.shape[1:], dtype=vv.dtype)
    out_val[idx] = vv

    def vjp(g):
        return (g[idx],)

    return _record(out_val, (vals,), vjp, "scatter_rows")


def _segment_sum_value(seg: np.ndarray, vv: np.ndarray, n_segments: int) -> np.ndarray:
    if len(seg) and np.all(seg[1:] >= seg[:-1]):
        # sorted ids (the compositing case): contiguous-run reduction, no
        # flat-index temporaries and no float64 round trip
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        sums = np.add.reduceat(vv, starts, axis=0)
        out = np.zeros((n_segments,) + vv.shape[1:], dtype=vv.dtype)
        out[seg[starts]] = sums
        return out
    return _scatter_rows_sum(seg, vv, n_segments)


def segment_sum(vals, seg: np.ndarray, n_segments: int) -> Var:
    """Sum rows of ``vals`` grouped by segment id (the compositing reduction)."""
    vals = as_var(vals)
    vv = vals.value
    out_val = _segment_sum_value(seg, vv, n_segments)

    def vjp(g):
        return (g[seg],)

    return _record(out_val, (vals,), vjp, "segment_sum")


def take_per_row(a, cols: np.ndarray) -> Var:
    """out[i] = a[i, cols[i]] — one column picked per row."""
    a = as_var(a)
    av = a.value
    rows = np.arange(av.shape[0])

    def vjp(g):
        out = np.zeros_like(av)
        out[rows, cols] = g
        return (out,)

    return _record(av[rows, cols], (a,), vjp, "take_per_row")


# ---------------------------------------------------------------------------
# grid interpolation (the vector-matrix factor lookups)


def interp_line(line, x01: np.ndarray) -> Var:
    """Linearly interpolate a (res, C) factor at normalized coords in [0, 1].

    Coordinates are clamped to the grid; callers mask out-of-bounds points
    before getting here.
    """
    line = as_var(line)
    lv = line.value
    res, c = lv.shape
    u = np.clip(x01, 0.0, 1.0).astype(lv.dtype) * lv.dtype.type(res - 1)
    i0 = np.minimum(u.astype(np.int64), res - 2)
    f = (u - i0.astype(lv.dtype))[:, None]
    out_val = lv[i0] * (1.0 - f) + lv[i0 + 1] * f

    def vjp(g):
        contrib = np.concatenate([g * (1.0 - f), g * f], axis=0)
        idx = np.concatenate([i0, i0 + 1])
        return (_scatter_rows_sum(idx, contrib, res),)

    return _record(out_val, (line,), vjp, "interp_line")


def interp_plane(plane, uv01: np.ndarray) -> Var:
    """Bilinearly interpolate a (res_a, res_b, C) factor at coords in [0, 1]^2."""
    plane = as_var(plane)
    pv = plane.value
    ra, rb, c = pv.shape
    flat = pv.reshape(ra * rb, c)
    ua = np.clip(uv01[:, 0], 0.0, 1.0).astype(pv.dtype) * pv.dtype.type(ra - 1)
    ub = np.clip(uv01[:, 1], 0.0, 1.0).astype(pv.dtype) * pv.dtype.type(rb - 1)
    ia = np.minimum(ua.astype(np.int64), ra - 2)
    ib = np.minimum(ub.astype(np.int64), rb - 2)
    fa = (ua - ia.astype(pv.dtype))[:, None]
    fb = (ub - ib.astype(pv.dtype))[:, None]
    base = ia * rb + ib
    rows = np.concatenate([base, base + 1, base + rb, base + rb + 1])
    corners = flat[rows].reshape(4, -1, c)
    w00 = (1 - fa) * (1 - fb)
    w01 = (1 - fa) * fb
    w10 = fa * (1 - fb)
    w11 = fa * fb
    out_val = corners[0] * w00 + corners[1] * w01 + corners[2] * w10 + corners[3] * w11

    def vjp(g):
        contrib = np.concatenate([g * w00, g * w01, g * w10, g * w11], axis=0)
        acc = _scatter_rows_sum(rows, contrib, ra * rb)
        return (acc.reshape(ra, rb, c),)

    return _record(out_val, (plane,), vjp, "interp_plane")


def vm_features(lines: Sequence, planes: Sequence, p01: np.ndarray,
                plane_axes: Sequence[tuple[int, int]]) -> Var:
    """Fused vector-matrix factor lookup: per axis, interpolate the line at
    ``p01[:, i]`` and the matching plane at ``p01[:, plane_axes[i]]``, multiply
    them, and concatenate the three (N, C) products into one (N, 3C) feature
    block.

    Equivalent to three ``interp_line``/``interp_plane``/``mul`` chains plus a
    ``concat``, but records a single tape node and scatters gradients corner
    by corner, which keeps the temporaries small.  This is the training-loop
    hot path; the stand-alone interp ops remain for everything else.
    """
    lines = [as_var(l) for l in lines]
    planes = [as_var(p) for p in planes]
    dt = lines[0].value.dtype
    n = len(p01)
    n_axes = len(lines)
    ctx = []
    out_parts = []
    for i in range(n_axes):
        lv, pv = lines[i].value, planes[i].value
        res, c = lv.shape
        ra, rb, _ = pv.shape
        u = np.clip(p01[:, i], 0.0, 1.0).astype(dt) * dt.type(res - 1)
        i0 = np.minimum(u.astype(np.int64), res - 2)
        f = (u - i0.astype(dt))[:, None]
        line_val = lv[i0] * (1.0 - f) + lv[i0 + 1] * f
        a, b = plane_axes[i]
        ua = np.clip(p01[:, a], 0.0, 1.0).astype(dt) * dt.type(ra - 1)
        ub = np.clip(p01[:, b], 0.0, 1.0).astype(dt) * dt.type(rb - 1)
        ia = np.minimum(ua.astype(np.int64), ra - 2)
        ib = np.minimum(ub.astype(np.int64), rb - 2)
        fa = (ua - ia.astype(dt))[:, None]
        fb = (ub - ib.astype(dt))[:, None]
        base = ia * rb + ib
        flat = pv.reshape(ra * rb, c)
        p0 = flat[base] * (1.0 - fb) + flat[base + 1] * fb
        p1 = flat[base + rb] * (1.0 - fb) + flat[base + rb + 1] * fb
        plane_val = p0 * (1.0 - fa) + p1 * fa
        ctx.append((i0, f, base, fa, fb, line_val, plane_val, res, ra, rb, c))
        out_parts.append(line_val * plane_val)
    out_val = np.concatenate(out_parts, axis=1)

    def vjp(g):
        grads = []
        col = 0
        plane_grads = []
        for i0, f, base, fa, fb, line_val, plane_val, res, ra, rb, c in ctx:
            gi = g[:, col:col + c]
            col += c
            g_line = gi * plane_val
            g_plane = gi * line_val
            d_line = np.empty((res, c), dtype=dt)
            lo, hi = g_line * (1.0 - f), g_line * f
            for j in range(c):
                d_line[:, j] = (np.bincount(i0, weights=lo[:, j], minlength=res)
                                + np.bincount(i0 + 1, weights=hi[:, j], minlength=res))
            grads.append(d_line)
            acc = np.zeros((ra * rb, c), dtype=np.float64)
            corners = ((0, (1.0 - fa) * (1.0 - fb)), (1, (1.0 - fa) * fb),
                       (rb, fa * (1.0 - fb)), (rb + 1, fa * fb))
            for off, w in corners:
                contrib = g_plane * w
                idx = base + off
                for j in range(c):
                    acc[:, j] += np.bincount(idx, weights=contrib[:, j],
                                             minlength=ra * rb)
            plane_grads.append(acc.reshape(ra, rb, c).astype(dt, copy=False))
        return tuple(grads) + tuple(plane_grads)

    return _record(out_val, tuple(lines) + tuple(planes), vjp, "vm_features")
