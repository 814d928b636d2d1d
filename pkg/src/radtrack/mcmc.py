"""Affine-invariant ensemble sampler with the stretch move.

The walker ensemble is split into two halves; each half is moved against the
frozen complementary half, so a whole half can be proposed and evaluated in
one vectorised call of the log-density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class McmcConfig:
    walkers: int = 600
    iterations: int = 400
    burn_in: int = 100
    a: float = 2.0
    subset: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn-in must be shorter than the run")
        if self.a <= 1.0:
            raise ValueError("stretch parameter must exceed 1")
        if self.walkers < 4 or self.walkers % 2:
            raise ValueError("need an even number of at least 4 walkers")

    def check_dimension(self, ndim: int) -> None:
        if self.walkers < 2 * ndim:
            raise ValueError(f"{self.walkers} walkers is fewer than twice the dimension {ndim}")


@dataclass
class Chain:
    samples: np.ndarray  # (iterations, walkers, ndim)
    log_prob: np.ndarray  # (iterations, walkers)
    acceptance: float

    def flat(self, burn_in: int = 0):
        s = self.samples[burn_in:]
        return s.reshape(-1, s.shape[-1]), self.log_prob[burn_in:].ravel()


def sample_z(rng: np.random.Generator, a: float, size: int) -> np.ndarray:
    """Draws from g(z) proportional to 1/sqrt(z) on [1/a, a] by inverse CDF."""
    u = rng.random(size)
    return ((a - 1.0) * u + 1.0) ** 2 / a


def run_ensemble(log_prob, p0, config: McmcConfig) -> Chain:
    """Run the stretch-move sampler.

    ``log_prob`` maps an (m, ndim) array of positions to (m,) log densities
    (``-inf`` is allowed).  ``p0`` holds the initial walker positions.
    """
    p = np.array(p0, dtype=float)
    nw, ndim = p.shape
    if nw != config.walkers:
        raise ValueError("initial ensemble size does not match the configuration")
    config.check_dimension(ndim)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 7]))
    lp = np.asarray(log_prob(p), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ValueError("initial walkers must have finite log density")
    half = nw // 2
    halves = (np.arange(half), np.arange(half, nw))
    samples = np.empty((config.iterations, nw, ndim))
    lps = np.empty((config.iterations, nw))
    accepted = 0
    for it in range(config.iterations):
        for k in (0, 1):
            move, other = halves[k], halves[1 - k]
            z = sample_z(rng, config.a, half)
            partners = other[rng.integers(0, half, size=half)]
            prop = p[partners] + z[:, None] * (p[move] - p[partners])
            lp_new = np.asarray(log_prob(prop), dtype=float)
            with np.errstate(invalid="ignore"):
                log_ratio = (ndim - 1) * np.log(z) + lp_new - lp[move]
            ok = np.log(rng.random(half)) < np.nan_to_num(log_ratio, nan=-np.inf)
            idx = move[ok]
            p[idx] = prop[ok]
            lp[idx] = lp_new[ok]
            accepted += int(ok.sum())
        samples[it] = p
        lps[it] = lp
    return Chain(samples, lps, accepted / (config.iterations * nw))


def draw_subset(chain: Chain, config: McmcConfig):
    """Random subset of post-burn-in samples, with their log densities."""
    flat, lp = chain.flat(config.burn_in)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 8]))
    n = min(config.subset, len(flat))
    idx = np.sort(rng.choice(len(flat), size=n, replace=False))
    return flat[idx], lp[idx]
