"""The geodesic flow of a distance model: gradient fields, log*, tracing, grids.

The flow is the index-raised gradient of phi(p, .). Following it backwards
from q descends the distance to p along the minimising geodesic, so the
direction in which it arrives at p is the initial velocity of that geodesic.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .eikonal import EPS_DIAG, _check_offdiag, pullback_euclidean
from .errors import StalledFlow, TrajectoryEscapedDomain
from .geodesic import Curve
from .manifold import Manifold, batch_metric

STEPS = 512
STOP_FRACTION = 1e-3
EPS_STALL = 1e-8


def grad_distance(model, p, q, eps_diag: float = EPS_DIAG):
    """(grad phi)^i = g^ij(q) dphi/dq_j."""
    _check_offdiag(model.manifold, p, q, eps_diag)
    dphi = model.grad_q(p, q)
    _, g_inv = batch_metric(model.manifold, np.asarray(q, dtype=float))
    return np.einsum("...ij,...j->...i", g_inv, dphi)


def _flow(model, p, x):
    return grad_distance(model, p, x, eps_diag=0.0)


def _descend(model, p, q, steps):
    """RK4 on x' = -grad phi from q over arclength [0, phi (1 - STOP_FRACTION)].

    p, q are batches (N, n); every pair takes ``steps`` steps of its own
    length. A pair that comes within one step of p, or whose next step would
    land inside half the stop margin, has arrived and stays put. Returns nodes (steps + 1, N, n), the flow at
    each node, phi and the per-pair number of steps actually taken.
    """
    if steps < 16:
        raise ValueError("steps must be >= 16")
    man = model.manifold
    phi = np.asarray(model.distance(p, q), dtype=float).reshape(-1)
    h = (phi * (1.0 - STOP_FRACTION) / steps)[:, None]
    xs = np.empty((steps + 1,) + q.shape)
    fs = np.empty_like(xs)
    x = q.copy()
    xs[0] = x
    fs[0] = _flow(model, p, x)
    taken = np.full(len(q), steps)
    live = np.ones(len(q), dtype=bool)

    def inside(y, k):
        if not np.all(man.contains(y)):
            raise TrajectoryEscapedDomain(
                f"gradient flow left the domain at arclength fraction {(k + 1) / steps:.6g}",
                exit_lambda=(k + 1) / steps,
            )
        return y

    for k in range(steps):
        a = np.flatnonzero(live)
        xa, pa, ha, f1 = x[a], p[a], h[a], fs[k, a]
        f2 = _flow(model, pa, inside(xa - 0.5 * ha * f1, k))
        f3 = _flow(model, pa, inside(xa - 0.5 * ha * f2, k))
        f4 = _flow(model, pa, inside(xa - ha * f3, k))
        nxt = inside(xa - ha / 6.0 * (f1 + 2 * f2 + 2 * f3 + f4), k)
        # Within a step of p the flow turns around the kink at p, and a step that
        # lands deep inside the stop margin has overshot into it: both are arrival.
        margin = 0.5 * STOP_FRACTION * phi[a]
        near = (pullback_euclidean(man, pa, xa) <= ha[:, 0]) | (pullback_euclidean(man, pa, nxt) < margin)
        if np.any((np.linalg.norm(nxt - xa, axis=-1) < EPS_STALL) & ~near):
            raise StalledFlow(f"flow progress below {EPS_STALL:g} at step {k + 1}")
        nxt[near] = xa[near]
        x[a] = nxt
        xs[k + 1] = x
        fs[k + 1] = fs[k]
        fs[k + 1, a[~near]] = _flow(model, pa[~near], nxt[~near])
        taken[a[near]] = k
        live[a[near]] = False
        if not live.any():
            xs[k + 2:] = x
            fs[k + 2:] = fs[k + 1]
            break
    return xs, fs, phi, taken


def _pairs(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    single = p.ndim == 1 and q.ndim == 1
    p, q = np.broadcast_arrays(np.atleast_2d(p), np.atleast_2d(q))
    return p.copy(), q.copy(), single


def log_star(model, p, q, steps: int = STEPS):
    """Initial velocity at p of the minimising geodesic reaching q at lambda = 1.

    The returned vector has g(p)-norm phi(p, q), so ``exp_map(man, p, v)``
    over the unit interval ends near q. Accepts single pairs or batches.
    """
    p, q, single = _pairs(p, q)
    _check_offdiag(model.manifold, p, q, EPS_DIAG)
    _, fs, phi, _ = _descend(model, p, q, steps)
    w = fs[-1]
    g, _ = batch_metric(model.manifold, p)
    v = phi[:, None] * w / np.sqrt(np.einsum("ni,nij,nj->n", w, g, w))[:, None]
    return v[0] if single else v


def trace_geodesic(model, p, q, steps: int = STEPS) -> Curve:
    """The flow line from q down to p as a Curve over normalised arclength.

    Nodes run until the flow arrives at p (at most ``steps`` steps); the last
    node is p itself, reached by the short straight gap that remains, and its
    velocity repeats the previous one.
    """
    p, q, _ = _pairs(p, q)
    if len(p) != 1:
        raise ValueError("trace_geodesic takes a single pair")
    man = model.manifold
    _check_offdiag(man, p, q, EPS_DIAG)
    xs, fs, phi, taken = _descend(model, p, q, steps)
    k = int(taken[0])
    h = phi[0] * (1.0 - STOP_FRACTION) / steps
    s = h * np.arange(k + 1)
    pts, flow = xs[: k + 1, 0], fs[: k + 1, 0]
    gap = float(pullback_euclidean(man, p[0], pts[-1]))
    if gap > 0.0:
        s = np.append(s, s[-1] + gap)
        pts = np.vstack([pts, p])
        flow = np.vstack([flow, flow[-1]])
    else:
        pts = np.vstack([pts[:-1], p])
    total = s[-1]
    return Curve(pts, -total * flow, s / total)


@dataclass(frozen=True)
class DistanceField:
    axes: tuple  # one coordinate vector per dimension
    points: np.ndarray  # (M, n) lattice nodes, last axis varying fastest
    values: np.ndarray  # (M,)
    flow: np.ndarray  # (M, n); zero at nodes on the diagonal
    source: np.ndarray

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def to_csv(self, path) -> None:
        n = self.points.shape[1]
        header = [f"x{i + 1}" for i in range(n)] + ["phi"] + [f"flow{i + 1}" for i in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for x, v, f in zip(self.points, self.values, self.flow):
                w.writerow([f"{val:.17g}" for val in (*x, v, *f)])


def field_on_grid(model, p, resolution: int = 64, eps_diag: float = EPS_DIAG) -> DistanceField:
    """phi(p, .) and its flow on a regular lattice spanning the bounds box."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    man = model.manifold
    p = np.asarray(p, dtype=float)
    axes = tuple(np.linspace(lo, hi, resolution) for lo, hi in zip(man.bounds_low, man.bounds_high))
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, man.dim)
    src = np.broadcast_to(p, pts.shape)
    values = np.asarray(model.distance(src, pts), dtype=float)
    flow = np.zeros_like(pts)
    off = pullback_euclidean(man, src, pts) >= eps_diag
    if off.any():
        flow[off] = grad_distance(model, src[off], pts[off], eps_diag)
    return DistanceField(axes, pts, values, flow, p)


@dataclass(frozen=True)
class SymmetryReport:
    origins: np.ndarray  # (K, n)
    forward: np.ndarray  # forward[i, j] = phi(origins[j]; origins[i])
    backward: np.ndarray  # backward[i, j] = phi(origins[i]; origins[j]) = forward[j, i]
    separation: np.ndarray  # pullback Euclidean distance between origins

    def pairs(self) -> np.ndarray:
        """(forward, backward) scatter pairs over i < j."""
        i, j = np.triu_indices(len(self.origins), k=1)
        return np.column_stack([self.forward[i, j], self.backward[i, j]])

    def asymmetry(self) -> np.ndarray:
        """Relative asymmetry |a - b| / mean(a, b) over i < j."""
        pr = self.pairs()
        mean = 0.5 * (pr[:, 0] + pr[:, 1])
        return np.abs(pr[:, 0] - pr[:, 1]) / np.where(mean > 0, mean, 1.0)

    @property
    def max_asymmetry(self) -> float:
        return float(np.max(self.asymmetry(), initial=0.0))


def origin_grid(man: Manifold, k: int = 3) -> np.ndarray:
    """k^n origins at the cell centres of a k-per-axis partition of the box."""
    if k < 2:
        raise ValueError("grid_k must be >= 2")
    axes = [lo + (np.arange(k) + 0.5) * (hi - lo) / k for lo, hi in zip(man.bounds_low, man.bounds_high)]
    return np.array(list(itertools.product(*axes)))


def symmetricity_test(trainer, man: Manifold, grid_k: int = 3) -> SymmetryReport:
    """Compare phi(q; p) with phi(p; q) across a grid of origins.

    ``trainer(origin)`` returns a distance model valid for pairs whose first
    argument is ``origin`` (a single-point model, or any global model).
    """
    origins = origin_grid(man, grid_k)
    K = len(origins)
    fwd = np.empty((K, K))
    for i, o in enumerate(origins):
        model = trainer(o)
        fwd[i] = model.distance(np.broadcast_to(o, origins.shape), origins)
    sep = pullback_euclidean(man, origins[:, None, :], origins[None, :, :])
    return SymmetryReport(origins, fwd, fwd.T.copy(), np.asarray(sep))
