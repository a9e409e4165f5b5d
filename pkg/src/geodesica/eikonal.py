"""Distance models built on the network, the metric-constrained Eikonal loss, training.

All distance objects expose the same small surface used downstream:
``manifold``, ``symmetric``, ``distance(p, q)`` and ``grad_q(p, q)``, the
latter being the coordinate gradient d phi / d q. Inputs are single points
(n,) or batches (N, n).

The network is wrapped so that M1 (zero on the diagonal), M2 (nonnegative)
and M5 (at least the pullback Euclidean distance) hold for any parameters:

    phi = D + C * link(s)

with D the pullback Euclidean distance and s the (symmetrised, for the
global kinds) network output. The lower-bounded kinds use C = D and the
softplus link; the upper-bounded kind uses C = L+ - D, where L+ is the length
of the straight coordinate segment, and the sigmoid link.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import network
from .errors import DiagonalSample, NonFiniteLoss, OutOfBounds, SchemaMismatch
from .geodesic import segment_speeds
from .manifold import Manifold, batch_metric, batch_metric_partials, describe, from_description, sphere_distance
from .diffcore import derivatives
from scipy.integrate import simpson

log = logging.getLogger(__name__)

KINDS = ("single_point", "global", "global_upper")
EPS_DIAG = 1e-6


# link functions: value, first and second derivative ------------------------------


def softplus(s):
    sp = np.logaddexp(0.0, s)
    sig = 0.5 * (1.0 + np.tanh(0.5 * s))
    return sp, sig, sig * (1.0 - sig)


def sigmoid(s):
    sig = 0.5 * (1.0 + np.tanh(0.5 * s))
    d1 = sig * (1.0 - sig)
    return sig, d1, d1 * (1.0 - 2.0 * sig)


LINKS = {"softplus": softplus, "sigmoid": sigmoid}


# pullback Euclidean distance -------------------------------------------------------


def pullback_euclidean(man: Manifold, p, q):
    """|iota(p) - iota(q)|_2."""
    d = man.embed(p) - man.embed(q)
    out = np.sqrt(np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def _pullback_and_grad(man: Manifold, p, q):
    ip = man.embed(p)
    iq, jq = derivatives(man.immersion, q, 1)
    diff = iq - ip
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.einsum("...ai,...a->...i", jq, diff) / dist[..., None]
    return dist, grad


def _upper_and_grads(man: Manifold, a, b, quad_nodes):
    """L+ along a + (b - a) t with gradients with respect to a and b."""
    t, sp, pts, d = segment_speeds(man, b, a, quad_nodes)
    g, _, dg = batch_metric_partials(man, pts)
    gd = np.einsum("...kij,...j->...ki", g, d)
    dgdd = np.einsum("...i,...kijm,...j->...km", d, dg, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 0.5 / sp
    tt = t[:, None]
    integ_a = (-2.0 * gd + (1.0 - tt) * dgdd) * inv[..., None]
    integ_b = (2.0 * gd + tt * dgdd) * inv[..., None]
    length = simpson(sp, x=t, axis=-1)
    return length, simpson(integ_a, x=t, axis=-2), simpson(integ_b, x=t, axis=-2)


# analytic distances ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExactDistance:
    """A closed-form distance function used as an oracle and as a bypass model."""

    manifold: Manifold
    fn: object
    grad_fn: object
    name: str = "exact"
    symmetric: bool = True

    def distance(self, p, q):
        return self.fn(np.asarray(p, dtype=float), np.asarray(q, dtype=float))

    def grad_q(self, p, q):
        return self.grad_fn(np.asarray(p, dtype=float), np.asarray(q, dtype=float))

    def value_and_grad(self, p, q):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.distance(p, q), self.grad_q(p, q)


def euclidean_exact(man: Manifold) -> ExactDistance:
    def fn(p, q):
        return np.linalg.norm(q - p, axis=-1)

    def grad(p, q):
        d = q - p
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    return ExactDistance(man, fn, grad, "euclidean_exact")


def sphere_exact(man: Manifold) -> ExactDistance:
    """arccos(iota(p) . iota(q)) on the unit hypersphere with its exact q-gradient."""

    def fn(p, q):
        return sphere_distance(man, p, q)

    def grad(p, q):
        ip = man.embed(p)
        iq, jq = derivatives(man.immersion, q, 1)
        c = np.clip(np.sum(ip * iq, axis=-1), -1.0, 1.0)
        dc = np.einsum("...ai,...a->...i", jq, ip)
        return -dc / np.sqrt(1.0 - c * c)[..., None]

    return ExactDistance(man, fn, grad, "sphere_exact")


def exact_distance_for(man: Manifold) -> ExactDistance | None:
    if man.name == "euclidean":
        return euclidean_exact(man)
    if man.name == "hypersphere":
        return sphere_exact(man)
    return None


# network-backed distance model ----------------------------------------------------------


@dataclass
class _Pieces:
    dist_e: np.ndarray  # D
    coef: np.ndarray  # C
    base_grad: np.ndarray  # A = grad D
    coef_grad: np.ndarray  # B = grad C
    s: np.ndarray
    ds: np.ndarray  # (N, n) = d s / d q
    cache: object = None
    upper: np.ndarray | None = None  # max(L+, D), upper-bounded kind only


@dataclass(eq=False)
class DistanceModel:
    params: network.MlpParameters
    manifold: Manifold
    kind: str = "global"
    source: np.ndarray | None = None
    quad_nodes: int = 129

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        n = self.manifold.dim
        want = n if self.kind == "single_point" else 2 * n
        if self.params.input_dim != want:
            raise ValueError(f"{self.kind} model needs input_dim {want}")
        if self.kind == "single_point":
            if self.source is None:
                raise ValueError("single-point model needs a source point")
            self.source = np.asarray(self.source, dtype=float)

    @property
    def symmetric(self) -> bool:
        return self.kind != "single_point"

    @property
    def link(self) -> str:
        return "sigmoid" if self.kind == "global_upper" else "softplus"

    # --------------------------------------------------------------------
    def _inputs(self, p, q):
        man = self.manifold
        n = man.dim
        scale = man.standardise_scale
        N = q.shape[0]
        if self.kind == "single_point":
            x = man.standardise(q)
            dx = np.zeros((n, N, n))
            for j in range(n):
                dx[j, :, j] = scale[j]
            return x, dx, None
        # Canonical order (lexicographic) makes phi(p, q) and phi(q, p)
        # evaluate the identical batch, hence M3 holds bit-exactly.
        swap = _lex_less(q, p)
        lo = np.where(swap[:, None], q, p)
        hi = np.where(swap[:, None], p, q)
        slo, shi = man.standardise(lo), man.standardise(hi)
        x = np.concatenate([np.concatenate([slo, shi], 1), np.concatenate([shi, slo], 1)], 0)
        dx = np.zeros((n, 2 * N, 2 * n))
        # q is `hi` unless swapped; it sits in the second slot of the first
        # half and the first slot of the second half.
        for j in range(n):
            col_first = np.where(swap, j, n + j)
            col_second = np.where(swap, n + j, j)
            dx[j, np.arange(N), col_first] = scale[j]
            dx[j, N + np.arange(N), col_second] = scale[j]
        return x, dx, swap

    def _pieces(self, p, q, grad=True, keep_cache=False) -> _Pieces:
        man = self.manifold
        N = q.shape[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            x, dx, swap = self._inputs(p, q)
            if grad:
                dist, dgrad = _pullback_and_grad(man, p, q)
            else:
                dist, dgrad = np.asarray(pullback_euclidean(man, p, q)).reshape(N), None
                dx = dx[:0]
            res = network.forward(self.params, x, dx, keep_cache=keep_cache)
            out, dout = res[0], res[1]
            cache = res[2] if keep_cache else None
            if self.kind == "single_point":
                s, ds = out, dout.T
            else:
                s = 0.5 * (out[:N] + out[N:])
                ds = (0.5 * (dout[:, :N] + dout[:, N:])).T
            if self.kind != "global_upper":
                return _Pieces(dist, dist, dgrad, dgrad, s, ds, cache)
            lo = np.where(swap[:, None], q, p)
            hi = np.where(swap[:, None], p, q)
            # Quadrature can undershoot D by rounding on nearly straight images.
            if grad:
                upper, g_lo, g_hi = _upper_and_grads(man, lo, hi, self.quad_nodes)
                clamp = upper < dist
                gq = np.where(swap[:, None], g_lo, g_hi)
                coef_grad = np.where(clamp[:, None], 0.0, gq - dgrad)
            else:
                t, sp, _, _ = segment_speeds(man, hi, lo, self.quad_nodes)
                upper = simpson(sp, x=t, axis=-1)
                clamp = upper < dist
                coef_grad = None
            coef = np.where(clamp, 0.0, upper - dist)
        return _Pieces(dist, coef, dgrad, coef_grad, s, ds, cache, np.maximum(upper, dist))

    def _prepare(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        single = p.ndim == 1 and q.ndim == 1
        p, q = np.broadcast_arrays(np.atleast_2d(p), np.atleast_2d(q))
        if self.kind == "single_point" and not np.allclose(p, self.source, rtol=0, atol=1e-12):
            raise ValueError("single-point model evaluated away from its source")
        if not (np.all(self.manifold.contains(p)) and np.all(self.manifold.contains(q))):
            raise OutOfBounds("distance queried outside the training bounds")
        return p, q, single

    def distance(self, p, q):
        p, q, single = self._prepare(p, q)
        pc = self._pieces(p, q, grad=False)
        val = pc.dist_e + pc.coef * LINKS[self.link](pc.s)[0]
        if pc.upper is not None:
            # D + (L+ - D) sigma can round one ulp past L+.
            val = np.minimum(val, pc.upper)
        return float(val[0]) if single else val

    def grad_q(self, p, q):
        p, q, single = self._prepare(p, q)
        pc = self._pieces(p, q)
        lk, d1, _ = LINKS[self.link](pc.s)
        grad = pc.base_grad + pc.coef_grad * lk[:, None] + (pc.coef * d1)[:, None] * pc.ds
        return grad[0] if single else grad

    def value_and_grad(self, p, q):
        p, q, single = self._prepare(p, q)
        pc = self._pieces(p, q)
        lk, d1, _ = LINKS[self.link](pc.s)
        val = pc.dist_e + pc.coef * lk
        grad = pc.base_grad + pc.coef_grad * lk[:, None] + (pc.coef * d1)[:, None] * pc.ds
        return (float(val[0]), grad[0]) if single else (val, grad)

    def upper_bound(self, p, q):
        """max(L+, D) for the pairs, in the same canonical order as ``distance``.

        L+ is never below D in exact arithmetic; the maximum absorbs
        quadrature rounding on nearly straight images.
        """
        p, q, single = self._prepare(p, q)
        swap = _lex_less(q, p)
        lo = np.where(swap[:, None], q, p)
        hi = np.where(swap[:, None], p, q)
        t, sp, _, _ = segment_speeds(self.manifold, hi, lo, self.quad_nodes)
        out = np.maximum(simpson(sp, x=t, axis=-1), pullback_euclidean(self.manifold, lo, hi))
        return float(out[0]) if single else out


def _lex_less(a, b):
    """Row-wise lexicographic a < b."""
    neq = a != b
    first = np.argmax(neq, axis=1)
    rows = np.arange(a.shape[0])
    return neq.any(axis=1) & (a[rows, first] < b[rows, first])


def distance(model, p, q):
    return model.distance(p, q)


# residual and loss ---------------------------------------------------------------------------


def _check_offdiag(man, p, q, eps):
    d = pullback_euclidean(man, np.atleast_2d(p), np.atleast_2d(q))
    if np.any(d < eps):
        raise DiagonalSample(f"{int(np.sum(d < eps))} pair(s) closer than {eps:g} to the diagonal")


def eikonal_residual(model, p, q, eps_diag: float = EPS_DIAG):
    """g^ij(q) dphi/dq_i dphi/dq_j - 1 for a model or an exact distance."""
    man = model.manifold
    _check_offdiag(man, p, q, eps_diag)
    grad = model.grad_q(p, q)
    _, g_inv = batch_metric(man, np.asarray(q, dtype=float))
    r = np.einsum("...i,...ij,...j->...", grad, g_inv, grad) - 1.0
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class EikonalLoss:
    residual_mse: float
    batch_size: int


def loss(model: DistanceModel, p, q, eps_diag: float = EPS_DIAG, p_side: bool = False):
    """Mean squared Eikonal residual at q and its gradient with respect to the parameters.

    With ``p_side`` the swapped pairs are appended, which for the symmetric
    kinds is the residual in the p argument.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if p_side:
        if not model.symmetric:
            raise ValueError("p-side residual needs a symmetric model")
        p, q = np.concatenate([p, q]), np.concatenate([q, p])
    man = model.manifold
    _check_offdiag(man, p, q, eps_diag)
    p, q, _ = model._prepare(p, q)
    pc = model._pieces(p, q, keep_cache=True)
    lk, d1, d2 = LINKS[model.link](pc.s)
    grad = pc.base_grad + pc.coef_grad * lk[:, None] + (pc.coef * d1)[:, None] * pc.ds
    _, g_inv = batch_metric(man, q)
    g_grad = np.einsum("nij,nj->ni", g_inv, grad)
    r = np.sum(grad * g_grad, axis=1) - 1.0
    N = r.shape[0]
    value = float(np.mean(r * r))

    g_a = (4.0 / N) * r[:, None] * g_grad  # d loss / d grad
    g_s = np.sum(g_a * (pc.coef_grad * d1[:, None] + (pc.coef * d2)[:, None] * pc.ds), axis=1)
    g_ds = g_a * (pc.coef * d1)[:, None]  # (N, n)
    if model.kind == "single_point":
        g_out, g_dout = g_s, g_ds.T
    else:
        g_out = np.concatenate([0.5 * g_s, 0.5 * g_s])
        g_dout = np.concatenate([0.5 * g_ds.T, 0.5 * g_ds.T], axis=1)
    grads = network.backward(model.params, pc.cache, g_out, g_dout)
    return EikonalLoss(value, N), grads


# training ------------------------------------------------------------------------------------


@dataclass
class TrainingConfig:
    width: int = 128
    depth: int = 4
    fourier_features: int = 0
    fourier_scale: float = 1.0
    updates: int = 10_000
    batch: int = 1024
    lr: float = 1e-3
    decay: float = 0.9
    decay_interval: int = 2000
    kind: str = "global"
    source: list | None = None
    p_side: bool = False
    log_every: int = 100
    eps_diag: float = EPS_DIAG
    quad_nodes: int = 129
    dtype: str = "float32"  # training precision; the returned model is always float64

    def validate(self, man: Manifold | None = None) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        for name in ("width", "depth", "batch", "decay_interval", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.updates < 0 or self.lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("need updates >= 0, lr > 0 and decay in (0, 1]")
        if self.kind == "single_point":
            if self.source is None:
                raise ValueError("single_point training needs a source point")
            if man is not None:
                man.check_bounds(np.asarray(self.source, dtype=float), "source")

    def as_dict(self) -> dict:
        return asdict(self)


PAPER_SCALE = dict(width=256, depth=8, updates=50_000, batch=2 ** 14)


def new_model(man: Manifold, config: TrainingConfig, seed: int = 0) -> DistanceModel:
    input_dim = man.dim if config.kind == "single_point" else 2 * man.dim
    params = network.init(input_dim, config.width, config.depth, seed,
                          config.fourier_features, config.fourier_scale)
    return DistanceModel(params, man, config.kind, config.source, config.quad_nodes)


def draw_pairs(man: Manifold, sampler, count: int, source=None, eps_diag: float = EPS_DIAG):
    """Off-diagonal training pairs; pairs closer than eps_diag are redrawn."""
    if source is not None:
        p = np.broadcast_to(np.asarray(source, dtype=float), (count, man.dim)).copy()
        q = sampler.draw(count)
    else:
        p, q = sampler.draw(count), sampler.draw(count)
    for _ in range(100):
        bad = pullback_euclidean(man, p, q) < eps_diag
        if not bad.any():
            return p, q
        k = int(bad.sum())
        q[bad] = sampler.draw(k)
        if source is None:
            p[bad] = sampler.draw(k)
    raise DiagonalSample("could not draw off-diagonal pairs")


@dataclass
class TrainingResult:
    model: DistanceModel
    history: list = field(default_factory=list)  # (update, loss, lr)
    state: network.OptimizerState | None = None


def train(man: Manifold, config: TrainingConfig, sampler=None, seed: int = 0,
          checkpoint_path=None, progress=None) -> TrainingResult:
    """Minimise the Eikonal residual; deterministic given ``seed`` and the sampler."""
    from .sampling import SamplerConfig, make_sampler

    config.validate(man)
    if sampler is None:
        sampler = make_sampler(man, SamplerConfig(seed=seed))
    model = new_model(man, config, seed)
    model = replace(model, params=model.params.astype(config.dtype))
    state = network.OptimizerState.fresh(model.params, config.lr, config.decay, config.decay_interval)
    history = []
    for t in range(config.updates):
        p, q = draw_pairs(man, sampler, config.batch, config.source if config.kind == "single_point" else None,
                          config.eps_diag)
        lval, grads = loss(model, p, q, config.eps_diag, config.p_side)
        gnorm = math.fsum(float(np.sum(g * g)) for g in grads.values())
        if not (math.isfinite(lval.residual_mse) and math.isfinite(gnorm)):
            model = _as_float64(model)
            if checkpoint_path is not None:
                save_model(checkpoint_path, model, state)
            raise NonFiniteLoss(f"non-finite loss at update {t}", last_good=model, update=t)
        if t % config.log_every == 0 or t == config.updates - 1:
            history.append((t, lval.residual_mse, state.effective_lr))
            log.info("update %d loss %.6e lr %.3e", t, lval.residual_mse, state.effective_lr)
            if progress is not None:
                progress(t, lval.residual_mse)
        state, params = network.adam_step(state, model.params, grads)
        model = replace(model, params=params)
    model = _as_float64(model)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, state)
    return TrainingResult(model, history, state)


def _as_float64(model: DistanceModel) -> DistanceModel:
    return replace(model, params=model.params.astype(np.float64))


def save_model(path, model: DistanceModel, state=None) -> None:
    extra = {"source": None if model.source is None else model.source.tolist(),
             "quad_nodes": model.quad_nodes, "manifold": describe(model.manifold)}
    man = model.manifold
    network.save_checkpoint(path, model.params, state, man.ident,
                            (man.bounds_low, man.bounds_high), model.kind, extra)


def load_model(path, man: Manifold | None = None) -> DistanceModel:
    """Load a checkpoint; without ``man`` the manifold recorded in it is rebuilt."""
    if man is None:
        desc = network.load_checkpoint(path).extra.get("manifold")
        if desc is None:
            raise SchemaMismatch("checkpoint does not record its manifold; pass one explicitly")
        man = from_description(desc)
    ck = network.load_checkpoint(path, man)
    return DistanceModel(ck.params, man, ck.augmentation_kind, ck.extra.get("source"),
                         ck.extra.get("quad_nodes", 129))


# evaluation ------------------------------------------------------------------------------------


def relative_error(model, oracle, n_pairs: int = 4096, seed: int = 0, chunk: int = 4096) -> float:
    """sqrt(E[(phi - d)^2] / E[d^2]) over pairs drawn uniformly from the bounds box."""
    man = model.manifold
    rng = np.random.default_rng(seed)
    p = rng.uniform(man.bounds_low, man.bounds_high, (n_pairs, man.dim))
    q = rng.uniform(man.bounds_low, man.bounds_high, (n_pairs, man.dim))
    if getattr(model, "kind", None) == "single_point":
        p[:] = model.source
    num = den = 0.0
    for i in range(0, n_pairs, chunk):
        pred = np.asarray(model.distance(p[i : i + chunk], q[i : i + chunk]))
        true = np.asarray(oracle(p[i : i + chunk], q[i : i + chunk]))
        num += float(np.sum((pred - true) ** 2))
        den += float(np.sum(true ** 2))
    return math.sqrt(num / den)
