"""Point samplers over a manifold's bounds box.

Samplers are streams: ``draw(count)`` continues where the previous call
stopped, so a training loop can pull a fresh batch per update. The
``sample_*`` functions are one-shot conveniences over the same streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FlatManifold
from .manifold import Manifold, ricci_scalar

LOG_FLOOR = np.log(1e-12)
KINDS = ("uniform", "curvature", "mixture")


@dataclass
class SamplerConfig:
    kind: str = "uniform"
    weight: float = 0.5  # probability of the uniform component (mixture only)
    delta: float | None = None  # proposal scale; None -> 5% of the smallest box edge
    burn_in: int = 1000
    chains: int = 64
    thin: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.burn_in < 0 or self.chains < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, chains >= 1, thin >= 1")


class UniformSampler:
    def __init__(self, man: Manifold, seed: int = 0):
        self.man = man
        self.rng = np.random.default_rng(seed)

    def draw(self, count: int) -> np.ndarray:
        man = self.man
        x = self.rng.uniform(man.bounds_low, man.bounds_high, (count, man.dim))
        # uniform() is half-open; the lower face has probability ~0 but is
        # excluded to keep every point strictly interior.
        bad = ~man.contains(x, strict=True)
        while bad.any():
            x[bad] = self.rng.uniform(man.bounds_low, man.bounds_high, (int(bad.sum()), man.dim))
            bad = ~man.contains(x, strict=True)
        return x


def metropolis_accept(log_u, log_target_new, log_target_old):
    """Accept iff log u <= log pi(new) - log pi(old) (symmetric proposal)."""
    return log_u <= log_target_new - log_target_old


def log_abs_curvature(man: Manifold, x) -> np.ndarray:
    r = np.abs(ricci_scalar(man, x))
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(r), LOG_FLOOR)


class CurvatureChains:
    """Interleaved Metropolis-Hastings chains targeting |R| restricted to the box.

    Each chain owns a generator spawned from the seed; proposals leaving the
    box are rejected (the chain repeats its state).
    """

    BLOCK = 256

    def __init__(self, man: Manifold, config: SamplerConfig, log_target=None):
        config.validate()
        self.man = man
        self.config = config
        self.log_target = log_target or (lambda x: log_abs_curvature(man, x))
        edges = man.bounds_high - man.bounds_low
        self.delta = config.delta if config.delta is not None else 0.05 * float(edges.min())
        ss = np.random.SeedSequence(config.seed)
        init_ss, *chain_ss = ss.spawn(config.chains + 1)
        self.rngs = [np.random.default_rng(s) for s in chain_ss]
        init_rng = np.random.default_rng(init_ss)
        self.x = UniformSampler(man, int(init_rng.integers(2 ** 63))).draw(config.chains)
        self.logt = self.log_target(self.x)
        if np.all(self.logt <= LOG_FLOOR):
            probes = UniformSampler(man, int(init_rng.integers(2 ** 63))).draw(100)
            if np.all(self.log_target(probes) <= LOG_FLOOR):
                raise FlatManifold(
                    f"|R| < 1e-12 everywhere probed on {man.name!r}; use uniform sampling"
                )
        self._noise = None
        self._pos = self.BLOCK
        self._buffer = np.empty((0, man.dim))
        self.accepted = 0
        self.proposed = 0
        for _ in range(config.burn_in):
            self.step()

    def _refill(self):
        n = self.man.dim
        z = np.empty((self.BLOCK, len(self.rngs), n))
        lu = np.empty((self.BLOCK, len(self.rngs)))
        for c, rng in enumerate(self.rngs):
            z[:, c] = rng.standard_normal((self.BLOCK, n))
            lu[:, c] = np.log(rng.random(self.BLOCK))
        self._noise = (z, lu)
        self._pos = 0

    def step(self) -> None:
        if self._pos >= self.BLOCK:
            self._refill()
        z, lu = self._noise[0][self._pos], self._noise[1][self._pos]
        self._pos += 1
        prop = self.x + self.delta * z
        inside = self.man.contains(prop, strict=True)
        logt_prop = np.full(len(prop), -np.inf)
        if inside.any():
            logt_prop[inside] = self.log_target(prop[inside])
        accept = inside & metropolis_accept(lu, logt_prop, self.logt)
        self.x = np.where(accept[:, None], prop, self.x)
        self.logt = np.where(accept, logt_prop, self.logt)
        self.accepted += int(accept.sum())
        self.proposed += len(accept)

    def draw(self, count: int) -> np.ndarray:
        parts = [self._buffer]
        have = len(self._buffer)
        while have < count:
            for _ in range(self.config.thin):
                self.step()
            parts.append(self.x.copy())
            have += len(self.x)
        allx = np.concatenate(parts)
        self._buffer = allx[count:]
        return allx[:count]


class MixtureSampler:
    """Uniform with probability ``weight``, otherwise the curvature chains."""

    def __init__(self, man: Manifold, config: SamplerConfig):
        config.validate()
        self.man = man
        self.config = config
        self.weight = config.weight
        self.uniform = UniformSampler(man, config.seed)
        self._chains = None
        self.select = np.random.default_rng([config.seed, 0x5E1EC7])

    @property
    def chains(self) -> CurvatureChains:
        if self._chains is None:
            self._chains = CurvatureChains(self.man, self.config)
        return self._chains

    def draw(self, count: int) -> np.ndarray:
        if self.weight >= 1.0:
            return self.uniform.draw(count)
        if self.weight <= 0.0:
            return self.chains.draw(count)
        pick = self.select.random(count) < self.weight
        out = np.empty((count, self.man.dim))
        out[pick] = self.uniform.draw(int(pick.sum()))
        out[~pick] = self.chains.draw(int((~pick).sum()))
        return out


def make_sampler(man: Manifold, config: SamplerConfig):
    config.validate()
    if config.kind == "uniform":
        return UniformSampler(man, config.seed)
    if config.kind == "curvature":
        return CurvatureChains(man, config)
    return MixtureSampler(man, config)


def sample_uniform(man: Manifold, count: int, seed: int = 0) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return UniformSampler(man, seed).draw(count)


def sample_curvature_mh(man: Manifold, count: int, config: SamplerConfig | None = None) -> np.ndarray:
    config = config or SamplerConfig(kind="curvature")
    return CurvatureChains(man, config).draw(count)


def sample_mixture(man: Manifold, count: int, config: SamplerConfig | None = None) -> np.ndarray:
    config = config or SamplerConfig(kind="mixture")
    return MixtureSampler(man, config).draw(count)


def sample_gmm(man: Manifold, count: int, seed: int = 0, balanced: bool = True) -> np.ndarray:
    """Draws from a GMM manifold's own mixture, rejecting points outside the box.

    With ``balanced`` the component counts are allocated in proportion to the
    weights (largest remainder, in antithetic pairs) and every draw mu + L z
    comes with its mirror mu - L z; a pair is rejected as a whole. The sample
    mean then matches the allocated mixture mean up to rounding, which keeps
    small-sample experiments free of Monte Carlo noise in the mean.
    """
    if man.name != "gmm":
        raise ValueError("sample_gmm needs a GMM manifold")
    if count < 1:
        raise ValueError("count must be >= 1")
    w = np.asarray(man.params["weights"])
    mu = np.asarray(man.params["means"])
    chol = np.linalg.cholesky(np.asarray(man.params["covs"]))
    rng = np.random.default_rng(seed)
    if not balanced:
        comp = rng.choice(len(w), size=count, p=w)
        out = np.empty((count, man.dim))
        todo = np.arange(count)
        while todo.size:
            z = rng.standard_normal((todo.size, man.dim))
            x = mu[comp[todo]] + np.einsum("nij,nj->ni", chol[comp[todo]], z)
            ok = man.contains(x, strict=True)
            out[todo[ok]] = x[ok]
            todo = todo[~ok]
        return out
    pairs = count // 2
    raw = w * pairs
    alloc = np.floor(raw).astype(int)
    alloc[np.argsort(raw - alloc)[::-1][: pairs - alloc.sum()]] += 1
    parts = []
    for i, m in enumerate(alloc):
        kept = []
        have = 0
        while have < m:
            d = rng.standard_normal((m - have, man.dim)) @ chol[i].T
            ok = man.contains(mu[i] + d, strict=True) & man.contains(mu[i] - d, strict=True)
            kept.append(d[ok])
            have += int(ok.sum())
        d = np.vstack(kept)[:m] if kept else np.empty((0, man.dim))
        parts.append(np.stack([mu[i] + d, mu[i] - d], axis=1).reshape(-1, man.dim))
    out = np.vstack(parts)
    if count % 2:
        out = np.vstack([out, mu[np.argmax(w)]])
    return out
