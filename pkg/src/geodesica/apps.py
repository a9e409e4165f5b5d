"""Statistics on a learned distance: Frechet means and k-means clustering."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .geodesic import exp_map
from .geoflow import log_star
from .manifold import Manifold, batch_metric

log = logging.getLogger(__name__)

FRECHET_LR = 1e-2
CHAINS = 16
JITTER = 0.05  # fraction of each box edge


@dataclass(frozen=True)
class FrechetResult:
    mean: np.ndarray
    trajectory: np.ndarray  # (iters + 1, chains, n)
    objective: np.ndarray  # (iters + 1, chains)
    chains: int
    best_chain: int

    @property
    def termini(self) -> np.ndarray:
        return self.trajectory[-1]

    @property
    def spread(self) -> float:
        """Largest distance between any chain terminus and the returned mean."""
        return float(np.max(np.linalg.norm(self.termini - self.mean, axis=1)))


def _require_symmetric(model):
    if not getattr(model, "symmetric", False):
        raise ValueError("Frechet means and clustering need a symmetric (global) distance model")


def _objective_and_grad(model, groups, owner, mu):
    """Per chain: sum over its group's samples of phi(x, mu)^2, and the mu-gradient.

    ``owner[c]`` is the group index of chain c.
    """
    xs, cs = [], []
    for c, gi in enumerate(owner):
        xs.append(groups[gi])
        cs.append(np.full(len(groups[gi]), c))
    x = np.vstack(xs)
    chain = np.concatenate(cs)
    m = mu[chain]
    phi, grad = model.value_and_grad(x, m)
    phi = np.atleast_1d(phi)
    # phi * grad -> 0 where mu sits on a sample, the gradient itself being undefined there.
    contrib = np.where((phi > 0)[:, None], 2.0 * phi[:, None] * np.nan_to_num(grad), 0.0)
    obj = np.bincount(chain, phi * phi, minlength=len(mu))
    g = np.stack([np.bincount(chain, contrib[:, i], minlength=len(mu)) for i in range(mu.shape[1])], axis=1)
    return obj, g


def _descend_means(model, groups, owner, init, lr, iters, tol):
    """Adam on every chain's mu at once, projected onto the box after each step."""
    man = model.manifold
    mu = init.copy()
    m = np.zeros_like(mu)
    v = np.zeros_like(mu)
    traj = [mu.copy()]
    obj, g = _objective_and_grad(model, groups, owner, mu)
    objs = [obj]
    for t in range(iters):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = -lr * (m / (1 - 0.9 ** (t + 1))) / (np.sqrt(v / (1 - 0.999 ** (t + 1))) + 1e-8)
        new = np.clip(mu + step, man.bounds_low, man.bounds_high)
        if np.any(new != mu + step):
            log.debug("iterate projected onto the box at step %d", t)
        moved = np.max(np.abs(new - mu))
        mu = new
        obj, g = _objective_and_grad(model, groups, owner, mu)
        traj.append(mu.copy())
        objs.append(obj)
        if moved <= tol:
            break
    return np.array(traj), np.array(objs)


def _initial_chains(man: Manifold, center, chains, rng):
    edge = man.bounds_high - man.bounds_low
    init = center + rng.uniform(-JITTER, JITTER, (chains, man.dim)) * edge
    init[0] = center
    return np.clip(init, man.bounds_low, man.bounds_high)


def frechet_mean(model, samples, chains: int = CHAINS, lr: float = FRECHET_LR, iters: int = 1000,
                 seed: int = 0, tol: float = 1e-7, init=None) -> FrechetResult:
    """Minimise sum_x phi(mu, x)^2 by Adam from several starts; best terminus wins.

    Chains start at the arithmetic mean (or ``init``) plus uniform jitter of
    +-5% of each box edge; the first chain starts unjittered.
    """
    _require_symmetric(model)
    man = model.manifold
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(x) == 0:
        raise ValueError("samples must be nonempty")
    man.check_bounds(x, "samples")
    center = x.mean(axis=0) if init is None else np.asarray(init, dtype=float)
    start = _initial_chains(man, center, chains, np.random.default_rng(seed))
    traj, objs = _descend_means(model, [x], np.zeros(chains, int), start, lr, iters, tol)
    best = int(np.argmin(objs[-1]))
    return FrechetResult(traj[-1, best].copy(), traj, objs, chains, best)


def frechet_mean_classic(model, samples, iters: int = 20, tol: float = 1e-8, steps: int = 256,
                         flow_steps: int = 128) -> FrechetResult:
    """Tangent-space iteration: average the log* vectors at mu, shoot with exp.

    log* vectors have g-norm equal to the distance, i.e. unit initial
    directions scaled by geodesic length.
    """
    _require_symmetric(model)
    man = model.manifold
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    man.check_bounds(x, "samples")
    mu = x.mean(axis=0)
    traj, objs = [mu.copy()], [np.sum(np.atleast_1d(model.distance(x, mu)) ** 2)]
    for _ in range(iters):
        d = np.atleast_1d(model.distance(np.broadcast_to(mu, x.shape), x))
        far = d > 1e-9
        vecs = np.zeros_like(x)
        if far.any():
            vecs[far] = log_star(model, np.broadcast_to(mu, x[far].shape), x[far], steps=flow_steps)
        vbar = vecs.sum(axis=0) / len(x)
        g, _ = batch_metric(man, mu)
        if np.sqrt(vbar @ g @ vbar) <= tol:
            break
        mu = exp_map(man, mu, vbar, steps).end
        traj.append(mu.copy())
        objs.append(np.sum(np.atleast_1d(model.distance(x, mu)) ** 2))
    traj = np.array(traj)[:, None, :]
    return FrechetResult(mu, traj, np.array(objs)[:, None], 1, 0)


# clustering -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusteringResult:
    centroids: np.ndarray  # (k, n)
    assignments: np.ndarray  # (N,)
    iterations: int
    objective: np.ndarray  # per Lloyd iteration, after the assignment step
    converged: bool

    def to_csv(self, path, samples) -> None:
        samples = np.asarray(samples)
        n = samples.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(n)] + ["cluster"])
            for x, a in zip(samples, self.assignments):
                w.writerow([f"{v:.17g}" for v in x] + [int(a)])


def distance_matrix(model, samples, centroids) -> np.ndarray:
    """(k, N) matrix of phi(mu_i, x_j), evaluated in one batch."""
    x = np.asarray(samples, dtype=float)
    c = np.asarray(centroids, dtype=float)
    k, N = len(c), len(x)
    mu = np.repeat(c, N, axis=0)
    return np.asarray(model.distance(mu, np.tile(x, (k, 1)))).reshape(k, N)


def _cluster_objective(dmat, assign):
    return float(np.sum(dmat[assign, np.arange(dmat.shape[1])] ** 2))


def _initial_centroids(samples, k, seed):
    if not 1 <= k <= len(samples):
        raise ValueError("need 1 <= k <= number of samples")
    idx = np.random.default_rng(seed).choice(len(samples), size=k, replace=False)
    return samples[idx].copy()


def _lloyd(samples, k, seed, max_iters, dist_fn, update_fn):
    x = np.asarray(samples, dtype=float)
    cent = _initial_centroids(x, k, seed)
    assign = None
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        dmat = dist_fn(cent)
        new_assign = np.argmin(dmat, axis=0)
        history.append(_cluster_objective(dmat, new_assign))
        if assign is not None and np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
        for i in range(k):
            members = assign == i
            if not members.any():
                # Reseed at the sample worst served by its current centroid.
                far = int(np.argmax(dmat[assign, np.arange(len(x))]))
                log.info("cluster %d empty; reseeding at sample %d", i, far)
                cent[i] = x[far]
                continue
            cent[i] = update_fn(i, x[members], cent[i], dmat[i, members])
    return ClusteringResult(cent, assign if assign is not None else np.zeros(len(x), int), it,
                            np.array(history), converged)


def kmeans(model, samples, k: int, seed: int = 0, max_iters: int = 50, chains: int = 4,
           frechet_iters: int = 300, lr: float = FRECHET_LR) -> ClusteringResult:
    """Lloyd's algorithm with the learned distance.

    Each update solves the cluster's Frechet mean from the members'
    coordinate mean; the old centroid is kept when the solve does not lower
    the cluster objective, which makes the Lloyd objective non-increasing.
    """
    _require_symmetric(model)
    x = np.asarray(samples, dtype=float)
    model.manifold.check_bounds(x, "samples")

    def update(i, members, current, current_d):
        res = frechet_mean(model, members, chains=chains, lr=lr, iters=frechet_iters,
                           seed=seed + i)
        new_obj = float(res.objective[-1, res.best_chain])
        return res.mean if new_obj < float(np.sum(current_d ** 2)) else current

    return _lloyd(x, k, seed, max_iters, lambda c: distance_matrix(model, x, c), update)


def assignment_is_optimal(model, samples, result: ClusteringResult) -> bool:
    """Exhaustive check that every sample sits with a distance-minimising centroid."""
    d = distance_matrix(model, samples, result.centroids)
    own = d[result.assignments, np.arange(d.shape[1])]
    return bool(np.all(own <= d.min(axis=0)))


def kmeans_euclidean_baselines(man: Manifold, samples, k: int, seed: int = 0, max_iters: int = 100):
    """(intrinsic l2 clustering, ambient l2 clustering of iota(x)).

    The second result's centroids live in the ambient space.
    """
    x = np.asarray(samples, dtype=float)
    man.check_bounds(x, "samples")

    def l2(points):
        return lambda c: np.linalg.norm(points[None, :, :] - c[:, None, :], axis=-1)

    def mean(i, members, current, d):
        return members.mean(axis=0)

    intrinsic = _lloyd(x, k, seed, max_iters, l2(x), mean)
    y = man.embed(x)
    ambient = _lloyd(y, k, seed, max_iters, l2(y), mean)
    return intrinsic, ambient


def write_clusterings_csv(path, samples, results: dict) -> None:
    """Side-by-side assignments, one column per named clustering."""
    samples = np.asarray(samples)
    names = list(results)
    n = samples.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(n)] + names)
        for j, x in enumerate(samples):
            w.writerow([f"{v:.17g}" for v in x] + [int(results[m].assignments[j]) for m in names])
