"""Geodesic shooting (exp map), curve lengths and the straight-segment upper bound."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .errors import NumericalFault, SegmentEscapedDomain, TrajectoryEscapedDomain
from .manifold import Manifold, batch_christoffel, batch_metric


@dataclass(frozen=True)
class Curve:
    points: np.ndarray  # (K, n)
    velocities: np.ndarray  # (K, n), derivative with respect to lambdas
    lambdas: np.ndarray  # (K,), from 0 to 1

    def __post_init__(self):
        k = len(self.lambdas)
        if k < 2 or len(self.points) != k or len(self.velocities) != k:
            raise ValueError("a curve needs >= 2 nodes with matching points/velocities")
        if self.lambdas[0] != 0.0 or self.lambdas[-1] != 1.0 or np.any(np.diff(self.lambdas) <= 0):
            raise ValueError("lambdas must increase strictly from 0 to 1")

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def to_csv(self, path) -> None:
        n = self.points.shape[1]
        header = ["lambda"] + [f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for lam, x, v in zip(self.lambdas, self.points, self.velocities):
                w.writerow([f"{val:.17g}" for val in (lam, *x, *v)])

    @classmethod
    def from_csv(cls, path) -> "Curve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = (data.shape[1] - 1) // 2
        return cls(data[:, 1 : 1 + n], data[:, 1 + n :], data[:, 0])


def _geodesic_rhs(man: Manifold, x, v):
    gamma = batch_christoffel(man, x)
    return v, -np.einsum("...kij,...i,...j->...k", gamma, v, v)


def exp_map(man: Manifold, p, v, steps: int = 256) -> Curve:
    """Integrate the geodesic equation from (p, v) over lambda in [0, 1] with RK4."""
    if steps < 16:
        raise ValueError("steps must be >= 16")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    man.check_bounds(p, "start point")
    h = 1.0 / steps
    xs = np.empty((steps + 1, man.dim))
    vs = np.empty_like(xs)
    xs[0], vs[0] = p, v
    x, u = p.copy(), v.copy()
    for k in range(steps):
        k1x, k1v = _geodesic_rhs(man, x, u)
        k2x, k2v = _geodesic_rhs(man, x + 0.5 * h * k1x, u + 0.5 * h * k1v)
        k3x, k3v = _geodesic_rhs(man, x + 0.5 * h * k2x, u + 0.5 * h * k2v)
        k4x, k4v = _geodesic_rhs(man, x + h * k3x, u + h * k3v)
        x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        u = u + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise NumericalFault(f"non-finite state at step {k + 1}")
        if not man.contains(x):
            raise TrajectoryEscapedDomain(
                f"geodesic left the domain at lambda={(k + 1) * h:.6g}", exit_lambda=(k + 1) * h
            )
        xs[k + 1], vs[k + 1] = x, u
    return Curve(xs, vs, np.linspace(0.0, 1.0, steps + 1))


def speeds(man: Manifold, c: Curve) -> np.ndarray:
    g, _ = batch_metric(man, c.points)
    sq = np.einsum("ki,kij,kj->k", c.velocities, g, c.velocities)
    return np.sqrt(np.maximum(sq, 0.0))


def curve_length(man: Manifold, c: Curve) -> float:
    """Composite Simpson estimate of the integral of the metric speed."""
    if not (np.all(np.isfinite(c.points)) and np.all(np.isfinite(c.velocities))):
        raise NumericalFault("non-finite curve data")
    return float(simpson(speeds(man, c), x=c.lambdas))


def covariant_deviation(man: Manifold, c: Curve) -> float:
    """max over nodes of |acc^k + Gamma^k_ij vel^i vel^j|, acc by differencing velocities."""
    if len(c.lambdas) < 3:
        raise ValueError("need at least 3 nodes")
    acc = np.gradient(c.velocities, c.lambdas, axis=0, edge_order=2)
    gamma = batch_christoffel(man, c.points)
    resid = acc + np.einsum("kaij,ki,kj->ka", gamma, c.velocities, c.velocities)
    return float(np.max(np.linalg.norm(resid, axis=1)))


def segment_speeds(man: Manifold, p, q, quad_nodes: int = 129):
    """Nodes t and metric speeds |p - q|_g along q + (p - q) t; p, q may be batched."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    t = np.linspace(0.0, 1.0, quad_nodes)
    d = p - q
    pts = q[..., None, :] + d[..., None, :] * t[:, None]
    g, _ = batch_metric(man, pts)
    sq = np.einsum("...i,...kij,...j->...k", d, g, d)
    return t, np.sqrt(np.maximum(sq, 0.0)), pts, d


def upper_bound_length(man: Manifold, p, q, quad_nodes: int = 129):
    """Length of the straight intrinsic segment from q to p (an upper bound on distance)."""
    if quad_nodes < 3 or quad_nodes % 2 == 0:
        raise ValueError("quad_nodes must be odd and >= 3")
    if not (np.all(man.contains(p)) and np.all(man.contains(q))):
        # The box is convex, so a segment stays inside iff its endpoints do.
        raise SegmentEscapedDomain("segment endpoints outside the domain")
    t, sp, _, _ = segment_speeds(man, p, q, quad_nodes)
    out = simpson(sp, x=t, axis=-1)
    return float(out) if np.ndim(out) == 0 else out
