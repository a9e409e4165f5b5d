"""Forward-mode differentiation with (nestable) multi-direction dual numbers.

A :class:`SmoothMap` is written component-wise: ``eval`` receives a list of
``in_dim`` coordinates and returns a list of ``out_dim`` components. Each
coordinate is a float, a numpy array (a batch of points) or a :class:`Dual`,
so one definition serves plain evaluation and every derivative order.
Arithmetic and the numpy ufuncs listed in ``_UNARY`` propagate through duals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalFault


class Dual:
    """``re + sum_k du[k] eps_k`` with nilpotent, mutually annihilating ``eps_k``.

    ``re`` and the entries of ``du`` may themselves be duals, which gives
    forward-over-forward higher derivatives.
    """

    __slots__ = ("re", "du")
    __array_priority__ = 1000

    def __init__(self, re, du):
        self.re = re
        self.du = tuple(du)

    def __repr__(self):
        return f"Dual({self.re!r}, {list(self.du)!r})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re + other.re, [a + b for a, b in zip(self.du, other.du)])
        return Dual(self.re + other, self.du)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.re, [-a for a in self.du])

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re - other.re, [a - b for a, b in zip(self.du, other.du)])
        return Dual(self.re - other, self.du)

    def __rsub__(self, other):
        return Dual(other - self.re, [-a for a in self.du])

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.re * other.re,
                [self.re * b + a * other.re for a, b in zip(self.du, other.du)],
            )
        return Dual(self.re * other, [a * other for a in self.du])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.re
            val = self.re * inv
            return Dual(val, [(a - val * b) * inv for a, b in zip(self.du, other.du)])
        inv = 1.0 / other
        return Dual(self.re * inv, [a * inv for a in self.du])

    def __rtruediv__(self, other):
        inv = 1.0 / self.re
        val = other * inv
        return Dual(val, [-(val * inv) * a for a in self.du])

    def __pow__(self, c):
        if isinstance(c, Dual):
            return np.exp(c * np.log(self))
        if c == 2:
            return self * self
        if c == 1:
            return self
        if c == 0:
            return Dual(self.re ** 0, [0.0 * a for a in self.du])
        scale = c * self.re ** (c - 1)
        return Dual(self.re ** c, [scale * a for a in self.du])

    def __rpow__(self, base):
        return np.exp(self * np.log(base))

    # numpy interop ------------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        if ufunc in _BINARY:
            return _BINARY[ufunc](*inputs)
        if ufunc in _UNARY:
            return _UNARY[ufunc](inputs[0])
        return NotImplemented


def _chain(x: Dual, val, slope) -> Dual:
    return Dual(val, [slope * a for a in x.du])


def _exp(x):
    e = np.exp(x.re)
    return _chain(x, e, e)


def _log(x):
    return _chain(x, np.log(x.re), 1.0 / x.re)


def _sin(x):
    return _chain(x, np.sin(x.re), np.cos(x.re))


def _cos(x):
    return _chain(x, np.cos(x.re), -np.sin(x.re))


def _tanh(x):
    t = np.tanh(x.re)
    return _chain(x, t, 1.0 - t * t)


def _sqrt(x):
    s = np.sqrt(x.re)
    return _chain(x, s, 0.5 / s)


def _arctan(x):
    return _chain(x, np.arctan(x.re), 1.0 / (1.0 + x.re * x.re))


def _arccos(x):
    return _chain(x, np.arccos(x.re), -1.0 / np.sqrt(1.0 - x.re * x.re))


_UNARY = {
    np.exp: _exp,
    np.log: _log,
    np.sin: _sin,
    np.cos: _cos,
    np.tanh: _tanh,
    np.sqrt: _sqrt,
    np.arctan: _arctan,
    np.arccos: _arccos,
    np.negative: lambda x: -x,
    np.positive: lambda x: x,
    np.square: lambda x: x * x,
}


def _dispatch(op):
    def fn(a, b):
        if isinstance(a, Dual):
            return op(a, b)
        return getattr(b, "__r" + op.__name__.strip("_") + "__")(a)

    return fn


_BINARY = {
    np.add: _dispatch(Dual.__add__),
    np.subtract: _dispatch(Dual.__sub__),
    np.multiply: _dispatch(Dual.__mul__),
    np.true_divide: _dispatch(Dual.__truediv__),
    np.power: _dispatch(Dual.__pow__),
}


@dataclass(frozen=True)
class SmoothMap:
    """A smooth map R^in_dim -> R^out_dim written component-wise."""

    eval: Callable[[list], list]
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be >= 1")

    def __call__(self, x):
        """Evaluate at a point (n,) or a batch (N, n); returns (m,) or (N, m)."""
        x = np.asarray(x, dtype=float)
        comps = self.eval([x[..., i] for i in range(self.in_dim)])
        return np.stack(np.broadcast_arrays(*comps), axis=-1) if x.ndim > 1 else np.array(
            [float(c) for c in comps]
        )


def compose(outer: SmoothMap, inner: SmoothMap) -> SmoothMap:
    if outer.in_dim != inner.out_dim:
        raise ValueError("dimension mismatch in composition")
    return SmoothMap(lambda x: outer.eval(inner.eval(x)), inner.in_dim, outer.out_dim)


def _seed(x: list, n: int, order: int) -> list:
    """Seed coordinates with ``order`` nested levels of ``n`` unit directions."""
    coords = list(x)
    for _ in range(order):
        nxt = []
        for i, c in enumerate(coords):
            nxt.append(Dual(c, [1.0 if j == i else 0.0 for j in range(n)]))
        coords = nxt
    return coords


def _peel(y, order: int, n: int, shape):
    """Unpack a nested dual into (value, d1, d2, ...) arrays of leading shape ``shape``.

    Derivative k has trailing axes (n,)*k. Constants contribute zeros.
    """
    out = []
    for k in range(order + 1):
        arr = np.zeros(shape + (n,) * k)
        for idx in np.ndindex(*((n,) * k)):
            arr[(Ellipsis,) + idx] = _component(y, idx, order)
        out.append(arr)
    return out


def _component(y, idx, order):
    # Outermost level is the last seeded one; descend through du for each
    # index in idx and through re for the remaining levels.
    obj = y
    depth = 0
    for i in idx:
        if not isinstance(obj, Dual):
            return 0.0
        obj = obj.du[i]
        depth += 1
    while depth < order:
        if not isinstance(obj, Dual):
            return obj
        obj = obj.re
        depth += 1
    return obj


def derivatives(f: SmoothMap, x, order: int = 1):
    """Value and all derivatives of ``f`` up to ``order`` (1, 2 or 3) at ``x``.

    ``x`` is a point (n,) or batch (N, n). Returns a list ``[value, jac, hess,
    third]`` truncated to ``order + 1`` entries, shaped (..., m, n, n, ...).
    Mixed partials come out of separate nested passes and are symmetrised so
    the tensors are exactly symmetric in their differentiation indices.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if not np.all(np.isfinite(xb)):
        raise NumericalFault("non-finite input point", np.argwhere(~np.isfinite(xb)))
    n = f.in_dim
    if xb.shape[-1] != n:
        raise ValueError(f"expected points of dimension {n}, got {xb.shape[-1]}")
    batch = xb.shape[:-1]
    coords = _seed([xb[..., i] for i in range(n)], n, order)
    ys = f.eval(coords)
    if len(ys) != f.out_dim:
        raise ValueError(f"map returned {len(ys)} components, declared {f.out_dim}")
    parts = [_peel(y, order, n, batch) for y in ys]
    result = [np.stack([p[k] for p in parts], axis=len(batch)) for k in range(order + 1)]
    if order >= 2:
        h = result[2]
        result[2] = 0.5 * (h + np.swapaxes(h, -1, -2))
    if order >= 3:
        t = result[3]
        perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        lead = tuple(range(t.ndim - 3))
        off = len(lead)
        acc = sum(np.transpose(t, lead + tuple(off + p for p in perm)) for perm in perms)
        result[3] = acc / 6.0
    bad = [~np.isfinite(r) for r in result]
    if any(b.any() for b in bad):
        idx = next(np.argwhere(b) for b in bad if b.any())
        raise NumericalFault("non-finite derivative entries", idx)
    if single:
        result = [r[0] for r in result]
    return result


def jacobian(f: SmoothMap, x) -> np.ndarray:
    """d f / d x, shape (m, n) (or (N, m, n) for a batch); row i, column j = df_i/dx_j."""
    return derivatives(f, x, 1)[1]


def second_derivative_tensor(f: SmoothMap, x) -> np.ndarray:
    """Entry (a, i, j) = d^2 f_a / dx_i dx_j, exactly symmetric in (i, j)."""
    return derivatives(f, x, 2)[2]


def third_derivative_tensor(f: SmoothMap, x) -> np.ndarray:
    return derivatives(f, x, 3)[3]


def gradient_of_scalar(f: SmoothMap, x) -> np.ndarray:
    if f.out_dim != 1:
        raise ValueError("gradient_of_scalar needs a map with out_dim 1")
    return jacobian(f, x)[..., 0, :]


def central_difference(fn: Callable[[np.ndarray], np.ndarray], x: Sequence[float], h: float = 1e-5):
    """Central finite-difference Jacobian of an array function; test oracle."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)
