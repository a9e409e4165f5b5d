"""Cubic-spline geodesic baseline: minimise curve energy over interior knots.

A natural cubic spline through fixed endpoints and free interior knots at
uniform parameter values is linear in the node values, so the curve and its
velocity at the quadrature nodes are two fixed matrices applied to the knots.
Several pairs are optimised together as one batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .errors import SegmentEscapedDomain
from .geodesic import Curve
from .manifold import Manifold, batch_metric, batch_metric_partials
from .network import adam_update

K_KNOTS = 8
PER_SEGMENT = 16


def default_quad_nodes(k: int) -> int:
    return PER_SEGMENT * (k + 1) + 1


@lru_cache(maxsize=32)
def _basis(k: int, quad_nodes: int | None):
    """(t, B, dB): curve = B @ nodes and velocity = dB @ nodes at t, nodes (k + 2, n).

    Simpson panels must not straddle knots: the spline is only piecewise
    polynomial, and with aligned panels the discrete energy gradient of a
    straight constant-speed line vanishes exactly in flat coordinates.
    """
    quad_nodes = quad_nodes or default_quad_nodes(k)
    if quad_nodes < 3 or (quad_nodes - 1) % (2 * (k + 1)):
        raise ValueError(f"quad_nodes - 1 must be a positive multiple of 2 (k + 1) = {2 * (k + 1)}")
    lam = np.linspace(0.0, 1.0, k + 2)
    t = np.linspace(0.0, 1.0, quad_nodes)
    cs = CubicSpline(lam, np.eye(k + 2), bc_type="natural")
    return t, cs(t), cs(t, 1)


@dataclass(frozen=True)
class SplineCurve:
    p: np.ndarray
    q: np.ndarray
    knots: np.ndarray  # (k, n) interior knots

    @property
    def nodes(self) -> np.ndarray:
        return np.vstack([self.p, self.knots, self.q])

    def evaluate(self, lam):
        lam = np.asarray(lam, dtype=float)
        cs = CubicSpline(np.linspace(0.0, 1.0, len(self.knots) + 2), self.nodes, bc_type="natural")
        return cs(lam), cs(lam, 1)

    def to_curve(self, quad_nodes: int | None = None) -> Curve:
        lam = np.linspace(0.0, 1.0, quad_nodes or default_quad_nodes(len(self.knots)))
        x, v = self.evaluate(lam)
        return Curve(x, v, lam)


def straight_spline(p, q, k: int = K_KNOTS) -> SplineCurve:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    lam = np.linspace(0.0, 1.0, k + 2)[1:-1, None]
    return SplineCurve(p, q, p + (q - p) * lam)


def _check_inside(man: Manifold, pts):
    if not np.all(man.contains(pts)):
        raise SegmentEscapedDomain("spline leaves the domain")


def spline_energy(man: Manifold, c: SplineCurve, quad_nodes: int | None = None) -> float:
    """Integral over [0, 1] of <gamma', gamma'>_g."""
    t, B, dB = _basis(len(c.knots), quad_nodes)
    x, v = B @ c.nodes, dB @ c.nodes
    _check_inside(man, x)
    g, _ = batch_metric(man, x)
    return float(simpson(np.einsum("ti,tij,tj->t", v, g, v), x=t))


def spline_length(man: Manifold, c: SplineCurve, quad_nodes: int | None = None) -> float:
    t, B, dB = _basis(len(c.knots), quad_nodes)
    x, v = B @ c.nodes, dB @ c.nodes
    _check_inside(man, x)
    g, _ = batch_metric(man, x)
    sp = np.sqrt(np.maximum(np.einsum("ti,tij,tj->t", v, g, v), 0.0))
    return float(simpson(sp, x=t))


def _simpson_weights(t):
    return simpson(np.eye(len(t)), x=t, axis=-1)


def _energy_and_grad(man, nodes, B, dB, w):
    """Batched energy (P,) and its gradient with respect to all nodes (P, k + 2, n)."""
    x = np.einsum("tk,pkn->ptn", B, nodes)
    v = np.einsum("tk,pkn->ptn", dB, nodes)
    g, _, dg = batch_metric_partials(man, x)
    gv = np.einsum("ptij,ptj->pti", g, v)
    energy = np.einsum("pti,pti,t->p", v, gv, w)
    g_x = np.einsum("pti,ptijm,ptj->ptm", v, dg, v) * w[:, None]
    g_v = 2.0 * gv * w[:, None]
    grad = np.einsum("tk,ptn->pkn", B, g_x) + np.einsum("tk,ptn->pkn", dB, g_v)
    return energy, grad, x


@dataclass(frozen=True)
class SplineResult:
    curve: SplineCurve
    length: float
    converged: bool
    iterations: int


def optimise_splines(man: Manifold, P, Q, k_knots: int = K_KNOTS, lr: float = 1e-3,
                     max_iters: int = 50_000, grad_tol: float = 1e-4,
                     quad_nodes: int | None = None) -> list:
    """Adam on the knots of every pair at once.

    A pair converges when its largest absolute Adam update is <= grad_tol and
    is frozen from then on. A pair whose curve leaves the domain is frozen
    as not converged at its last in-bounds knots.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    man.check_bounds(P, "spline start")
    man.check_bounds(Q, "spline end")
    t, B, dB = _basis(k_knots, quad_nodes)
    w = _simpson_weights(t)
    nodes = np.stack([straight_spline(p, q, k_knots).nodes for p, q in zip(P, Q)])
    m = np.zeros_like(nodes[:, 1:-1])
    v = np.zeros_like(m)
    active = np.ones(len(P), bool)
    converged = np.zeros(len(P), bool)
    iters = np.zeros(len(P), int)
    for it in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        _, grad, _ = _energy_and_grad(man, nodes[idx], B, dB, w)
        delta, m[idx], v[idx] = adam_update(it, m[idx], v[idx], grad[:, 1:-1], lr)
        iters[idx] += 1
        done = np.max(np.abs(delta), axis=(1, 2)) <= grad_tol
        trial = nodes[idx].copy()
        trial[:, 1:-1] += delta
        inside = np.all(man.contains(np.einsum("tk,pkn->ptn", B, trial)), axis=1)
        keep = inside & ~done
        nodes[idx[keep]] = trial[keep]
        converged[idx[done]] = True
        active[idx[done | ~inside]] = False
    out = []
    for i in range(len(P)):
        c = SplineCurve(P[i], Q[i], nodes[i, 1:-1].copy())
        out.append(SplineResult(c, spline_length(man, c, quad_nodes), bool(converged[i]), int(iters[i])))
    return out


def optimise_spline(man: Manifold, p, q, k_knots: int = K_KNOTS, lr: float = 1e-3,
                    max_iters: int = 50_000, grad_tol: float = 1e-4, quad_nodes: int | None = None):
    """Returns (SplineCurve, length, converged)."""
    r = optimise_splines(man, p, q, k_knots, lr, max_iters, grad_tol, quad_nodes)[0]
    return r.curve, r.length, r.converged


@dataclass(frozen=True)
class ComparisonRow:
    p: np.ndarray
    q: np.ndarray
    spline_length: float
    eikonal_distance: float
    converged: bool


def compare_against_model(model, pairs, path=None, **spline_kw) -> list:
    """Spline length next to the model distance for each (p, q) pair; optional CSV."""
    pairs = np.asarray(pairs, dtype=float)
    n = model.manifold.dim
    P, Q = pairs[:, :n], pairs[:, n:]
    results = optimise_splines(model.manifold, P, Q, **spline_kw)
    dist = np.atleast_1d(model.distance(P, Q))
    rows = [ComparisonRow(p, q, r.length, float(d), r.converged) for p, q, r, d in zip(P, Q, results, dist)]
    if path is not None:
        write_comparison_csv(path, rows)
    return rows


def write_comparison_csv(path, rows) -> None:
    n = len(rows[0].p) if rows else 0
    header = ([f"p{i + 1}" for i in range(n)] + [f"q{i + 1}" for i in range(n)]
              + ["spline_length", "eikonal_distance", "converged"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.17g}" for x in (*r.p, *r.q, r.spline_length, r.eikonal_distance)]
                       + [int(r.converged)])


def read_pairs(path) -> np.ndarray:
    """One pair per row: p1..pn, q1..qn; a header line is skipped if present."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0 if first.strip() and _is_numeric_row(first) else 1
    return np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)


def _is_numeric_row(line: str) -> bool:
    try:
        [float(x) for x in line.split(",")]
    except ValueError:
        return False
    return True
