"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Value` objects in
execution order, so the record is topologically sorted by construction and a
single reverse sweep yields all gradients.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    x = tape.const(np.arange(3.0))
    loss = (x @ w).tanh().sum()
    grads = tape.backward(loss)      # {"w": array of shape (3, 2)}

All arithmetic is float64.
"""
from __future__ import annotations

from math import prod
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_broadcast(op: str, a: tuple, b: tuple) -> tuple:
    # equal shapes, scalar-tensor, vector over the rows of a matrix, or a
    # column (n, 1) against (n, m); anything else is almost always a bug
    if a == b:
        return a
    pa, pb = prod(a), prod(b)
    if pa == 1 or pb == 1:
        return a if pa >= pb and len(a) >= len(b) else b
    big, small = (a, b) if (len(a), pa) >= (len(b), pb) else (b, a)
    ok = False
    if len(small) < len(big) and big[-len(small):] == small:
        ok = True
    elif len(small) == len(big) == 2 and small[1] == 1 and small[0] == big[0]:
        ok = True
    elif len(small) == len(big) == 2 and small[0] == 1 and small[1] == big[1]:
        ok = True
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return big


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Value:
    """An array recorded on a tape. ``data`` must not be mutated in place."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, node={self.node_id})"

    def _lift(self, other) -> "Value":
        if isinstance(other, Value):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.const(other)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return hadamard(self, reciprocal(self._lift(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        return take(self, index)

    # unary shorthands -------------------------------------------------------
    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def square(self):
        return hadamard(self, self)

    def sum(self, axis=None):
        return vsum(self, axis)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    Each node keeps its parents' indices and a vector-Jacobian closure mapping
    the output adjoint to one adjoint per parent.
    """

    def __init__(self, record: bool = True):
        # record=False keeps no history: forward-only evaluation in bounded memory
        self.record = record
        self.values: list[Value] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.params: dict[str, Value] = {}

    def __len__(self) -> int:
        return len(self.values)

    def _record(self, data, parents: Sequence[Value] = (), vjp=None) -> Value:
        if not self.record:
            return Value(data, self, -1)
        v = Value(data, self, len(self.values))
        self.values.append(v)
        self.parents.append(tuple(p.node_id for p in parents))
        self.vjps.append(vjp)
        return v

    def const(self, data) -> Value:
        return self._record(_as_array(data))

    def param(self, name: str, data) -> Value:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        v = self._record(np.array(data, dtype=np.float64))
        self.params[name] = v
        return v

    def params_from(self, arrays: dict[str, np.ndarray]) -> dict[str, Value]:
        """Register every named array as a parameter (copied onto the tape)."""
        return {k: self.param(k, a) for k, a in arrays.items()}

    def backward(self, root: Value) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every registered parameter."""
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads = self.grads_of(root)
        out = {}
        for name, v in self.params.items():
            g = grads[v.node_id] if v.node_id < len(grads) else None
            out[name] = np.zeros_like(v.data) if g is None else g
        return out

    def grads_of(self, root: Value) -> list:
        adj: list = [None] * (root.node_id + 1)
        adj[root.node_id] = np.ones_like(root.data)
        for i in range(root.node_id, -1, -1):
            g = adj[i]
            if g is None or self.vjps[i] is None:
                continue
            parent_grads = self.vjps[i](g)
            for p, pg in zip(self.parents[i], parent_grads):
                if pg is None:
                    continue
                if adj[p] is None:
                    adj[p] = pg
                else:
                    adj[p] = adj[p] + pg
        return adj


def backward(tape: Tape, root: Value) -> dict[str, np.ndarray]:
    return tape.backward(root)


# primitives -------------------------------------------------------------------

def add(a: Value, b: Value) -> Value:
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape._record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Value) -> Value:
    return a.tape._record(-a.data, (a,), lambda g: (-g,))


def scale(a: Value, c: float) -> Value:
    return a.tape._record(a.data * c, (a,), lambda g: (g * c,))


def hadamard(a: Value, b: Value) -> Value:
    _check_broadcast("hadamard", a.shape, b.shape)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return a.tape._record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def reciprocal(a: Value) -> Value:
    out = 1.0 / a.data
    return a.tape._record(out, (a,), lambda g: (-g * out * out,))


def matmul(a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data
    if (ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2
            or ad.shape[-1] != bd.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return a.tape._record(ad @ bd, (a, b), vjp)


def transpose(a: Value) -> Value:
    return a.tape._record(a.data.T, (a,), lambda g: (g.T,))


def sigmoid(a: Value) -> Value:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return a.tape._record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Value) -> Value:
    x = a.data
    out = np.logaddexp(0.0, x)

    def vjp(g):
        return (g * _sigmoid_np(x),)

    return a.tape._record(out, (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    x = a.data
    return a.tape._record(np.log(x), (a,), lambda g: (g / x,))


def relu(a: Value) -> Value:
    x = a.data
    on = (x > 0).astype(np.float64)
    return a.tape._record(x * on, (a,), lambda g: (g * on,))


def vsum(a: Value, axis=None) -> Value:
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._record(np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def take(a: Value, index) -> Value:
    """General numpy indexing (basic slices or integer arrays)."""
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return a.tape._record(np.array(out, dtype=np.float64), (a,), vjp)


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = list(values)
    tape = values[0].tape
    datas = [v.data for v in values]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[d.shape for d in datas]} ({exc})") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, values, vjp)


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    values = list(values)
    tape = values[0].tape
    out = np.stack([v.data for v in values], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return tape._record(out, values, vjp)


def reshape(a: Value, shape) -> Value:
    old = a.shape
    return a.tape._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def diag_part(a: Value) -> Value:
    """Diagonal of a square matrix, or of each matrix in an (N, D, D) stack."""
    x = a.data
    shape = x.shape
    d = shape[-1]
    idx = np.arange(d)

    def vjp(g):
        full = np.zeros(shape)
        full[..., idx, idx] = g
        return (full,)

    return a.tape._record(x[..., idx, idx].copy(), (a,), vjp)


def tril_assemble(diag: Value, off: Value) -> Value:
    """Build lower-triangular (N, D, D) factors from a diagonal (N, D) and the
    strictly-lower entries (N, D(D-1)/2) in row-major order."""
    n, d = diag.shape
    rows, cols = np.tril_indices(d, -1)
    if off.shape != (n, len(rows)):
        raise ShapeError(f"tril_assemble: diag {diag.shape} vs off {off.shape}")
    out = np.zeros((n, d, d))
    idx = np.arange(d)
    out[:, idx, idx] = diag.data
    out[:, rows, cols] = off.data

    def vjp(g):
        return g[:, idx, idx].copy(), g[:, rows, cols].copy()

    return diag.tape._record(out, (diag, off), vjp)


def solve_tril(L: Value, r: Value) -> Value:
    """Row-wise solve ``L[n] u[n] = r[n]`` for lower-triangular stacks."""
    Ld, rd = L.data, r.data
    if Ld.ndim != 3 or rd.shape != Ld.shape[:2]:
        raise ShapeError(f"solve_tril: L {Ld.shape} vs r {rd.shape}")
    u = _batched_tril_solve(Ld, rd)

    def vjp(g):
        # u = L^{-1} r  =>  r_bar = L^{-T} g,  L_bar = -tril(r_bar u^T)
        rbar = _batched_tril_solve(np.swapaxes(Ld, 1, 2), g, lower=False)
        Lbar = -np.tril(rbar[:, :, None] * u[:, None, :])
        return Lbar, rbar

    return L.tape._record(u, (L, r), vjp)


def _batched_tril_solve(L: np.ndarray, r: np.ndarray, lower: bool = True) -> np.ndarray:
    n, d = r.shape
    u = np.zeros((n, d))
    order = range(d) if lower else range(d - 1, -1, -1)
    for i in order:
        acc = r[:, i] - np.einsum("nj,nj->n", L[:, i, :], u)
        u[:, i] = acc / L[:, i, i]
    return u


def where(cond: np.ndarray, a: Value, b: Value) -> Value:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    c = np.asarray(cond, dtype=bool)
    _check_broadcast("where", a.shape, b.shape)
    out = np.where(c, a.data, b.data)
    sa, sb = a.shape, b.shape
    return a.tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), sa),
                   _unbroadcast(np.where(c, 0.0, g), sb)))


# finite differences -----------------------------------------------------------

def finite_diff_check(f: Callable[[Tape, dict[str, Value]], Value],
                      params: dict[str, np.ndarray], step: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar on a fresh tape from the registered parameters; it is
    called once for the analytic gradient and twice per parameter entry.
    """
    tape = Tape()
    root = f(tape, tape.params_from(params))
    analytic = tape.backward(root)

    def evaluate(perturbed):
        t = Tape()
        return float(f(t, t.params_from(perturbed)).data)

    worst = 0.0
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
            a = analytic[name][idx]
            err = abs(a - numeric) / (abs(a) + 1e-8)
            if not np.isfinite(err):
                return float("nan")
            worst = max(worst, err)
    return worst
