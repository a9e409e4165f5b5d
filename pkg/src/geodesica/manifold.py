"""Manifolds given by immersions into Euclidean space, and their geometry.

Everything here works on a single point ``(n,)`` or a batch ``(N, n)``; the
``*_at`` functions return small dataclasses for one point, the ``batch_*``
helpers return raw arrays and are what the solvers use.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import SmoothMap, derivatives
from .errors import DegenerateMetric, NumericalFault, OutOfBounds

BUILTIN_NAMES = ("euclidean", "hypersphere", "peaks", "gmm")


@dataclass(frozen=True, eq=False)
class Manifold:
    immersion: SmoothMap
    bounds_low: np.ndarray
    bounds_high: np.ndarray
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        low = np.asarray(self.bounds_low, dtype=float)
        high = np.asarray(self.bounds_high, dtype=float)
        object.__setattr__(self, "bounds_low", low)
        object.__setattr__(self, "bounds_high", high)
        if self.immersion.in_dim > self.immersion.out_dim:
            raise ValueError("an immersion needs in_dim <= out_dim")
        if low.shape != (self.dim,) or high.shape != (self.dim,):
            raise ValueError("bounds must have one entry per intrinsic dimension")
        if not np.all(low < high):
            raise ValueError("bounds_low must be strictly below bounds_high")

    @property
    def dim(self) -> int:
        return self.immersion.in_dim

    @property
    def ambient_dim(self) -> int:
        return self.immersion.out_dim

    @property
    def ident(self) -> str:
        """Identity string stored in checkpoints: name, dimension, parameter digest."""
        blob = json.dumps(self.params, sort_keys=True).encode()
        return f"{self.name}:{self.dim}:{hashlib.sha256(blob).hexdigest()[:16]}"

    def embed(self, x) -> np.ndarray:
        return self.immersion(x)

    def contains(self, x, strict: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if strict:
            return np.all((x > self.bounds_low) & (x < self.bounds_high), axis=-1)
        return np.all((x >= self.bounds_low) & (x <= self.bounds_high), axis=-1)

    def check_bounds(self, x, what: str = "point") -> None:
        ok = self.contains(x)
        if not np.all(ok):
            raise OutOfBounds(f"{what} outside the bounds of manifold {self.name!r}")

    def standardise(self, x) -> np.ndarray:
        """Affine map of the bounds box onto [-1, 1]^n."""
        return 2.0 * (np.asarray(x) - self.bounds_low) / (self.bounds_high - self.bounds_low) - 1.0

    @property
    def standardise_scale(self) -> np.ndarray:
        return 2.0 / (self.bounds_high - self.bounds_low)


@dataclass(frozen=True)
class MetricTensor:
    g: np.ndarray
    g_inv: np.ndarray
    point: np.ndarray


@dataclass(frozen=True)
class ChristoffelSymbols:
    gamma: np.ndarray  # gamma[k, i, j] = Gamma^k_ij
    point: np.ndarray


@dataclass(frozen=True)
class CurvatureBundle:
    riemann: np.ndarray  # riemann[l, i, j, k] = R^l_ijk
    ricci: np.ndarray
    scalar: float
    point: np.ndarray


# batched geometry ------------------------------------------------------------


def _inverse(g: np.ndarray) -> np.ndarray:
    # Cholesky doubles as the positive-definiteness check; a pivot at rounding
    # level means the Jacobian has lost rank.
    try:
        chol = np.linalg.cholesky(g)
        diag = np.diagonal(chol, axis1=-2, axis2=-1)
        scale = np.sqrt(np.max(np.abs(np.diagonal(g, axis1=-2, axis2=-1)), axis=-1, keepdims=True))
        if not np.all(diag > 1e-12 * scale):
            raise np.linalg.LinAlgError
        g_inv = np.linalg.inv(g)
    except np.linalg.LinAlgError:
        raise DegenerateMetric("induced metric is not positive definite") from None
    return 0.5 * (g_inv + np.swapaxes(g_inv, -1, -2))


def _metric_partials(jac, hess):
    # g_ij,m = sum_a H_aim J_aj + J_ai H_ajm; the second term is the (i, j)
    # transpose of the first, so adding the two keeps g_ij,m symmetric exactly.
    first = np.einsum("...aim,...aj->...ijm", hess, jac)
    return first + np.swapaxes(first, -3, -2)


def batch_metric(man: Manifold, x):
    """(g, g_inv) at a point or batch."""
    jac = derivatives(man.immersion, x, 1)[1]
    g = np.einsum("...ai,...aj->...ij", jac, jac)
    return g, _inverse(g)


def batch_metric_partials(man: Manifold, x):
    """(g, g_inv, dg) with dg[..., i, j, m] = d g_ij / d x_m."""
    _, jac, hess = derivatives(man.immersion, x, 2)
    g = np.einsum("...ai,...aj->...ij", jac, jac)
    return g, _inverse(g), _metric_partials(jac, hess)


def _christoffel_from(g_inv, dg):
    # S[m, i, j] = g_mi,j + g_mj,i - g_ij,m
    s = dg + np.swapaxes(dg, -1, -2) - np.moveaxis(dg, -1, -3)
    return 0.5 * np.einsum("...km,...mij->...kij", g_inv, s)


def batch_christoffel(man: Manifold, x) -> np.ndarray:
    _, g_inv, dg = batch_metric_partials(man, x)
    return _christoffel_from(g_inv, dg)


def batch_curvature(man: Manifold, x):
    """(riemann, ricci, scalar, g_inv) from exact third derivatives of the immersion."""
    _, jac, hess, third = derivatives(man.immersion, x, 3)
    g = np.einsum("...ai,...aj->...ij", jac, jac)
    g_inv = _inverse(g)
    dg = _metric_partials(jac, hess)
    gamma = _christoffel_from(g_inv, dg)

    # d2g[i, j, m, l] = d_l g_ij,m
    t1 = np.einsum("...aiml,...aj->...ijml", third, jac)
    t2 = np.einsum("...aim,...ajl->...ijml", hess, hess)
    d2g = t1 + np.swapaxes(t1, -4, -3) + t2 + np.swapaxes(t2, -4, -3)
    s = dg + np.swapaxes(dg, -1, -2) - np.moveaxis(dg, -1, -3)
    ds = d2g + np.swapaxes(d2g, -2, -3) - np.moveaxis(d2g, -2, -4)  # ds[m, i, j, l]
    dg_inv = -np.einsum("...ka,...abl,...bm->...kml", g_inv, dg, g_inv)
    dgamma = 0.5 * (
        np.einsum("...kml,...mij->...kijl", dg_inv, s)
        + np.einsum("...km,...mijl->...kijl", g_inv, ds)
    )

    # R^l_ijk = d_j G^l_ik - d_k G^l_ij + G^l_jm G^m_ik - G^l_km G^m_ij
    riemann = (
        np.einsum("...likj->...lijk", dgamma)
        - dgamma
        + np.einsum("...ljm,...mik->...lijk", gamma, gamma)
        - np.einsum("...lkm,...mij->...lijk", gamma, gamma)
    )
    ricci = np.einsum("...mimj->...ij", riemann)
    scalar = np.einsum("...ij,...ij->...", g_inv, ricci)
    if not np.all(np.isfinite(scalar)):
        raise NumericalFault("non-finite curvature", np.argwhere(~np.isfinite(scalar)))
    return riemann, ricci, scalar, g_inv


def ricci_scalar(man: Manifold, x) -> np.ndarray:
    return batch_curvature(man, x)[2]


# single-point operations -------------------------------------------------------


def metric_at(man: Manifold, x) -> MetricTensor:
    x = np.asarray(x, dtype=float)
    g, g_inv = batch_metric(man, x)
    return MetricTensor(g, g_inv, x)


def inner_product(man: Manifold, x, v, w) -> float:
    g = metric_at(man, x).g
    return float(np.asarray(v, dtype=float) @ g @ np.asarray(w, dtype=float))


def christoffel_at(man: Manifold, x) -> ChristoffelSymbols:
    x = np.asarray(x, dtype=float)
    return ChristoffelSymbols(batch_christoffel(man, x), x)


def curvature_at(man: Manifold, x) -> CurvatureBundle:
    x = np.asarray(x, dtype=float)
    riemann, ricci, scalar, _ = batch_curvature(man, x)
    return CurvatureBundle(riemann, ricci, float(scalar), x)


# builtin immersions --------------------------------------------------------------


def _identity(x):
    return list(x)


def _hypersphere(x):
    n = len(x)
    out = [np.cos(x[0])]
    prod = np.sin(x[0])
    for k in range(1, n):
        out.append(prod * np.cos(x[k]))
        prod = prod * np.sin(x[k])
    out.append(prod)
    return out


def _peaks_height(x, y):
    return (
        3.0 * (1.0 - x) ** 2 * np.exp(-(x * x) - (y + 1.0) ** 2)
        - 10.0 * (x / 5.0 - x ** 3 - y ** 5) * np.exp(-(x * x) - y * y)
        - np.exp(-((x + 1.0) ** 2) - y * y) / 3.0
    )


def _peaks(x):
    return [x[0], x[1], _peaks_height(x[0], x[1])]


# Four-component mixture used when no GMM parameters are supplied. Means sit
# well inside [-3, 3]^2 and the mixture mean is away from the origin so the
# relative error of a recovered mean is well conditioned.
DEFAULT_GMM = {
    "weights": [0.3, 0.25, 0.25, 0.2],
    "means": [[1.2, 1.0], [-0.6, 1.4], [1.4, -0.8], [-0.4, -0.6]],
    "covs": [
        [[0.35, 0.1], [0.1, 0.3]],
        [[0.3, 0.0], [0.0, 0.25]],
        [[0.25, -0.05], [-0.05, 0.35]],
        [[0.3, 0.05], [0.05, 0.3]],
    ],
}


def gmm_pdf_map(weights, means, covs):
    """Component-wise GMM density, usable with duals; returns ``density(x_list)``."""
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n = means.shape[1]
    terms = []
    for a, mu, cov in zip(weights, means, covs):
        chol = np.linalg.cholesky(cov)
        prec = np.linalg.inv(cov)
        norm = a / ((2.0 * np.pi) ** (n / 2) * np.prod(np.diag(chol)))
        terms.append((norm, mu, prec))

    def density(x):
        total = 0.0
        for norm, mu, prec in terms:
            d = [x[i] - mu[i] for i in range(n)]
            quad = 0.0
            for i in range(n):
                quad = quad + prec[i, i] * d[i] * d[i]
                for j in range(i + 1, n):
                    quad = quad + 2.0 * prec[i, j] * d[i] * d[j]
            total = total + norm * np.exp(-0.5 * quad)
        return total

    return density


def _validate_gmm(weights, means, covs, n):
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    k = weights.shape[0]
    if weights.ndim != 1 or k < 1:
        raise ValueError("GMM weights must be a non-empty vector")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("GMM weights must be nonnegative and sum to 1")
    if means.shape != (k, n) or covs.shape != (k, n, n):
        raise ValueError("GMM means/covariances have inconsistent shapes")
    for c in covs:
        if not np.allclose(c, c.T):
            raise ValueError("GMM covariances must be symmetric")
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            raise ValueError("GMM covariances must be positive definite") from None


def builtin(name: str, n: int = 2, *, gmm: dict | None = None, bounds=None) -> Manifold:
    """One of the shipped manifolds: ``euclidean``, ``hypersphere``, ``peaks``, ``gmm``.

    ``bounds`` optionally overrides the default training box as ``(low, high)``.
    """
    if name not in BUILTIN_NAMES:
        raise ValueError(f"unknown manifold {name!r}; expected one of {BUILTIN_NAMES}")
    if n < 1:
        raise ValueError("dimension must be >= 1")
    params: dict = {}
    if name == "euclidean":
        imm = SmoothMap(_identity, n, n)
        low, high = np.full(n, -3.0), np.full(n, 3.0)
    elif name == "hypersphere":
        imm = SmoothMap(_hypersphere, n, n + 1)
        low, high = np.full(n, np.pi / 6), np.full(n, 5 * np.pi / 6)
    elif name == "peaks":
        if n != 2:
            raise ValueError("the peaks manifold is two-dimensional")
        imm = SmoothMap(_peaks, 2, 3)
        low, high = np.full(2, -3.0), np.full(2, 3.0)
    else:
        if n != 2:
            raise ValueError("the gmm manifold is two-dimensional")
        spec = DEFAULT_GMM if gmm is None else gmm
        _validate_gmm(spec["weights"], spec["means"], spec["covs"], n)
        params = {k: np.asarray(spec[k], dtype=float).tolist() for k in ("weights", "means", "covs")}
        density = gmm_pdf_map(params["weights"], params["means"], params["covs"])
        imm = SmoothMap(lambda x: list(x) + [density(x)], n, n + 1)
        low, high = np.full(n, -3.0), np.full(n, 3.0)
    if bounds is not None:
        low, high = (np.broadcast_to(np.asarray(b, dtype=float), (n,)).copy() for b in bounds)
        params = dict(params, bounds=[low.tolist(), high.tolist()])
    return Manifold(imm, low, high, name, params)


def gmm_mean(man: Manifold) -> np.ndarray:
    """Mixture mean sum_i alpha_i mu_i of a GMM manifold."""
    return np.asarray(man.params["weights"]) @ np.asarray(man.params["means"])


def sphere_distance(man: Manifold, p, q) -> np.ndarray:
    """Great-circle distance arccos(iota(p) . iota(q)) on the unit hypersphere."""
    c = np.sum(man.embed(p) * man.embed(q), axis=-1)
    return np.arccos(np.clip(c, -1.0, 1.0))


def describe(man: Manifold) -> dict:
    """JSON-ready description from which :func:`from_description` rebuilds a builtin."""
    return {"name": man.name, "dim": man.dim, "params": man.params}


def from_description(desc: dict) -> Manifold:
    params = desc.get("params") or {}
    gmm = {k: params[k] for k in ("weights", "means", "covs")} if desc["name"] == "gmm" else None
    return builtin(desc["name"], int(desc["dim"]), gmm=gmm, bounds=params.get("bounds"))
