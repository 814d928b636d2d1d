"""Track-informed integration windows.

For a fixed trajectory, the expected source signal in bin ``i`` of a
detector is proportional to ``w_i * dt_i`` where ``w_i`` is the geometric
factor of the count model, and the background is proportional to ``dt_i``.
The sensitivity of a set of bins ``T`` is therefore

    $_T = sum_{i in T} w_i dt_i / sqrt(sum_{i in T} dt_i)

and the window that maximises it is what gets integrated.  Across the array
the per-detector series are concatenated and optimised jointly, so each
detector keeps its own subset of bins (possibly empty).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import mcmc
from .anomaly import BackgroundModel, anomaly_value
from .attribution import (
    EncounterWindow,
    TrackModel,
    geometric_factor,
    model_counts,
    track_samples,
)
from .response import hexagonal_array

FIXED_WINDOWS = (1.0, 2.0, 3.0, 4.0)
EXHAUSTIVE_MAX = 20
TIE_RTOL = 1e-12
MAX_KNOTS = 30


@dataclass
class SegmentSeries:
    detector: int
    t: np.ndarray
    dt: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.dt = np.broadcast_to(np.asarray(self.dt, dtype=float), self.t.shape).copy()
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != self.t.shape:
            raise ValueError("w and t must have the same length")
        if np.any(self.dt <= 0):
            raise ValueError("segment durations must be positive")
        if np.any(self.w < 0):
            raise ValueError("segment weights must be non-negative")

    def __len__(self):
        return len(self.t)


@dataclass
class OptimalWindow:
    """Selected bin indices per detector and the sensitivity they reach."""

    selection: dict  # detector -> sorted index array
    value: float
    dt: float | None = None
    durations: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return float(sum(self.durations.values()))

    @property
    def wall_duration(self) -> float:
        """Time covered by the union of selected bins (needs ``dt``)."""
        bins = set()
        for idx in self.selection.values():
            bins.update(int(i) for i in idx)
        return len(bins) * (self.dt or 0.0)

    @property
    def detectors_used(self) -> tuple:
        return tuple(d for d, idx in sorted(self.selection.items()) if len(idx))


def sensitivity(series: SegmentSeries, T) -> float:
    """$_T for index set ``T`` (0 for the empty set)."""
    idx = np.asarray(sorted(T), dtype=int)
    if idx.size == 0:
        return 0.0
    dt = series.dt[idx]
    return float((series.w[idx] * dt).sum() / np.sqrt(dt.sum()))


def _canonical(cands: list) -> tuple:
    """Tie-break among equal-value subsets: fewest segments, then lexicographically smallest."""
    return min((tuple(sorted(c)) for c in cands), key=lambda c: (len(c), c))


def _prefix_scan(w, dt, order):
    a = np.cumsum((w * dt)[order])
    d = np.cumsum(dt[order])
    vals = a / np.sqrt(d)
    best = vals.max()
    if best <= 0:
        return (), 0.0
    k = int(np.flatnonzero(vals >= best * (1.0 - TIE_RTOL))[0]) + 1
    return tuple(sorted(order[:k].tolist())), float(best)


def _subset_sums(v: np.ndarray) -> np.ndarray:
    """Sums over all 2^n subsets; entry m includes element i when bit i of m is set."""
    out = np.zeros(1)
    for x in v:
        out = np.concatenate([out, out + x])
    return out


def _exhaustive(w, dt):
    a = _subset_sums(w * dt)
    d = _subset_sums(dt)
    vals = np.zeros_like(a)
    np.divide(a, np.sqrt(d), out=vals, where=d > 0)
    best = vals.max()
    if best <= 0:
        return (), 0.0
    masks = np.flatnonzero(vals >= best * (1.0 - TIE_RTOL))
    n = len(w)
    cands = [[i for i in range(n) if (m >> i) & 1] for m in masks]
    return _canonical(cands), float(best)


def best_subset(w, dt) -> tuple[tuple, float]:
    """Index set maximising $ and its value.

    Uniform durations: the optimum for each size k is the k largest weights,
    so a prefix scan over weights sorted descending is exact.  Mixed
    durations: exhaustive enumeration for up to 20 segments, otherwise a
    prefix scan in descending weight order.
    """
    w = np.asarray(w, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if w.size == 0:
        return (), 0.0
    order = np.lexsort((np.arange(w.size), -w))
    if np.all(dt == dt[0]) or w.size > EXHAUSTIVE_MAX:
        return _prefix_scan(w, dt, order)
    return _exhaustive(w, dt)


def optimize_window(series: SegmentSeries) -> OptimalWindow:
    if len(series) == 0:
        raise ValueError("series has no segments")
    T, val = best_subset(series.w, series.dt)
    idx = np.array(T, dtype=int)
    dt = float(series.dt[0]) if np.all(series.dt == series.dt[0]) else None
    return OptimalWindow({series.detector: idx}, val, dt, {series.detector: float(series.dt[idx].sum())})


def optimize_array(series_list) -> OptimalWindow:
    """Joint optimum over the concatenation of all detectors' segments."""
    series_list = list(series_list)
    if not series_list:
        raise ValueError("no detector series")
    n0 = len(series_list[0])
    if any(len(s) != n0 for s in series_list):
        raise ValueError("detector series must share the bin grid")
    w = np.concatenate([s.w for s in series_list])
    dt = np.concatenate([s.dt for s in series_list])
    T, val = best_subset(w, dt)
    T = np.array(T, dtype=int)
    sel, durs = {}, {}
    for k, s in enumerate(series_list):
        idx = T[(T >= k * n0) & (T < (k + 1) * n0)] - k * n0
        sel[s.detector] = idx
        durs[s.detector] = float(s.dt[idx].sum())
    return OptimalWindow(sel, val, None, durs)


def optimize_array_weights(g: np.ndarray, dt: float) -> OptimalWindow:
    """Array optimum for a (n_detectors, n_bins) weight matrix on a uniform grid."""
    nd, nb = g.shape
    T, val = _prefix_scan(g.ravel(), np.full(g.size, dt), np.lexsort((np.arange(g.size), -g.ravel())))
    T = np.array(T, dtype=int)
    det, b = np.divmod(T, nb)
    sel = {d: b[det == d] for d in range(nd)}
    return OptimalWindow(sel, val, dt, {d: dt * len(sel[d]) for d in range(nd)})


def series_from_model(model: TrackModel, t) -> list[SegmentSeries]:
    return [SegmentSeries(d, t, model.dt, model.g[d]) for d in range(model.g.shape[0])]


def summed_array_window(model: TrackModel, t=None) -> OptimalWindow:
    """Optimal bins of the detector-summed response, applied to every detector."""
    t = np.arange(model.g.shape[1]) if t is None else t
    ow = optimize_window(SegmentSeries(-1, t, model.dt, model.g.sum(axis=0)))
    idx = ow.selection[-1]
    nd = model.g.shape[0]
    return OptimalWindow({d: idx for d in range(nd)}, ow.value, float(model.dt[0]),
                         {d: float(model.dt[idx].sum()) for d in range(nd)})


def fixed_window(model: TrackModel, length: float) -> OptimalWindow:
    """``length`` seconds of all detectors centred on the peak summed model rate."""
    g = model.g.sum(axis=0)
    nb = len(g)
    dt = float(model.dt[0])
    k = min(max(int(round(length / dt)), 1), nb)
    peak = int(np.argmax(g))
    lo = min(max(peak - k // 2, 0), nb - k)
    idx = np.arange(lo, lo + k)
    nd = model.g.shape[0]
    return OptimalWindow({d: idx for d in range(nd)}, np.nan, dt, {d: k * dt for d in range(nd)})


def neg_log_like(x, lam) -> float:
    """Poisson negative log-likelihood sum(lam - x log lam + lnGamma(x + 1))."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any((lam == 0) & (x > 0)) or not np.all(np.isfinite(lam)):
        raise ValueError("invalid model rates")
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(lam), 0.0)
    return float((lam - xlog + gammaln(x + 1.0)).sum())


def spectrum_for_window(spectra: np.ndarray, window: OptimalWindow) -> np.ndarray:
    """Channel-wise sum of the selected (detector, bin) spectra.

    ``spectra`` is (n_detectors, n_bins, n_channels).
    """
    out = np.zeros(spectra.shape[-1], dtype=spectra.dtype)
    for d, idx in window.selection.items():
        if len(idx):
            out = out + spectra[d, idx].sum(axis=0)
    return out


def window_exposure(window: OptimalWindow, n_detectors: int, dt: float) -> np.ndarray:
    """Live time per detector covered by the selection."""
    w = np.zeros(n_detectors)
    for d, idx in window.selection.items():
        w[d] = len(idx) * dt
    return w


# -- trajectory sampling ---------------------------------------------------------


@dataclass
class TrajectoryPrior:
    """Knot times and Gaussian priors for the sampled trajectory positions."""

    knot_t: np.ndarray
    mean: np.ndarray  # (k, 3)
    sigma: np.ndarray  # (k, 3), per-axis standard deviations

    @property
    def ndim(self) -> int:
        return self.mean.size


def trajectory_prior(track, times, offset: float = 0.0, max_knots: int = MAX_KNOTS,
                     floor: float = 1e-3) -> TrajectoryPrior:
    """Knots spread over the covered ``times`` with means/variances from the track."""
    times = np.asarray(times, dtype=float)
    _, _, _, valid = track_samples(track, times - offset)
    tv = times[valid]
    if tv.size == 0:
        raise ValueError("track does not cover the window")
    knot_t = tv if tv.size <= max_knots else np.linspace(tv[0], tv[-1], max_knots)
    pos, cov, _, _ = track_samples(track, knot_t - offset)
    sig = np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), floor**2))
    return TrajectoryPrior(knot_t, pos, sig)


def _interp_knots(theta: np.ndarray, knot_t: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Positions at ``times`` from (m, k, 3) knot positions by linear interpolation."""
    if len(knot_t) == 1:
        return np.repeat(theta[:, :1, :], len(times), axis=1)
    j = np.clip(np.searchsorted(knot_t, times, side="right") - 1, 0, len(knot_t) - 2)
    f = np.clip((times - knot_t[j]) / (knot_t[j + 1] - knot_t[j]), 0.0, 1.0)
    return theta[:, j, :] * (1 - f)[None, :, None] + theta[:, j + 1, :] * f[None, :, None]


class TrajectoryLikelihood:
    """Poisson likelihood of the window counts as a function of knot positions.

    Source strength and backgrounds are held at their best-fit values; the
    geometric factor is evaluated at bin centres.
    """

    def __init__(self, track, window: EncounterWindow, response, attenuation, poses, alpha, b,
                 prior: TrajectoryPrior, geometry=None, offset: float = 0.0):
        self.geometry = geometry or hexagonal_array()
        c = window.counts
        self.x = c.roi.astype(float)
        self.dt = c.dt
        self.t = c.centers
        self.prior = prior
        self.alpha = float(alpha)
        self.b = np.asarray(b, dtype=float)
        self.track = track
        self.offset = offset
        self.response = response
        self.attenuation = attenuation
        self.poses = poses
        _, _, heading, valid = track_samples(track, self.t - offset)
        self.valid = valid
        self.heading = heading
        self.platform = poses.at(self.t)
        self.lgx = gammaln(self.x + 1.0).sum()

    def g(self, theta: np.ndarray) -> np.ndarray:
        """(m, n_detectors, n_bins) geometric factors for flat knot vectors ``theta``."""
        theta = np.atleast_2d(theta)
        m = theta.shape[0]
        knots = theta.reshape(m, -1, 3)
        pos = _interp_knots(knots, self.prior.knot_t, self.t)  # (m, n, 3)
        n = len(self.t)
        times = np.tile(self.t, m)
        heading = None if self.heading is None else np.tile(self.heading, m)
        ppos, pyaw = self.platform
        platform = (np.tile(ppos, (m, 1)), np.tile(pyaw, m))
        g = geometric_factor(pos.reshape(-1, 3), heading, self.track.label, times, self.poses,
                             self.response, self.attenuation, self.geometry, platform)
        g = g.reshape(m, n, -1).transpose(0, 2, 1)
        return np.where(self.valid[None, None, :], g, 0.0)

    def nll(self, theta: np.ndarray) -> np.ndarray:
        lam = self.alpha * self.g(theta) * self.dt + self.b[None, :, None] * self.dt
        lam = np.maximum(lam, 1e-300)
        return (lam - self.x[None] * np.log(lam)).sum(axis=(1, 2)) + self.lgx

    def log_prior(self, theta: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(theta) - self.prior.mean.ravel()[None]) / self.prior.sigma.ravel()[None]
        return -0.5 * (z**2).sum(axis=1)

    def log_prob(self, theta: np.ndarray) -> np.ndarray:
        return self.log_prior(theta) - self.nll(theta)


@dataclass
class McmcResult:
    window: OptimalWindow
    theta: np.ndarray
    nll: float
    acceptance: float
    n_samples: int


def mcmc_refine(track, window: EncounterWindow, response, attenuation, poses, alpha, b,
                config: mcmc.McmcConfig | None = None, geometry=None, offset: float = 0.0) -> McmcResult:
    """Sample trajectories around the track, then pick the per-detector windows.

    Among a random subset of posterior samples, the array-optimal window with
    the longest total duration wins; equal durations go to the lower
    negative log-likelihood.
    """
    config = config or mcmc.McmcConfig()
    prior = trajectory_prior(track, window.counts.centers, offset)
    like = TrajectoryLikelihood(track, window, response, attenuation, poses, alpha, b, prior, geometry, offset)
    ndim = prior.ndim
    config.check_dimension(ndim)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 9]))
    p0 = prior.mean.ravel()[None] + 0.1 * prior.sigma.ravel()[None] * rng.standard_normal((config.walkers, ndim))
    chain = mcmc.run_ensemble(like.log_prob, p0, config)
    thetas, _ = mcmc.draw_subset(chain, config)
    nll = like.nll(thetas)
    g_all = like.g(thetas)
    best = None
    for i in range(len(thetas)):
        ow = optimize_array_weights(g_all[i], like.dt)
        key = (-ow.duration, nll[i])
        if best is None or key < best[0]:
            best = (key, ow, i)
    _, ow, i = best
    return McmcResult(ow, thetas[i], float(nll[i]), chain.acceptance, len(thetas))


# -- method comparison ---------------------------------------------------------------


@dataclass
class ComparisonRow:
    method: str
    anomaly_value: float
    duration_s: float
    detectors_used: tuple


def anomaly_for_window(spectra, window: OptimalWindow, background: BackgroundModel, dt: float) -> float:
    spec = spectrum_for_window(spectra, window)
    expo = window_exposure(window, spectra.shape[0], dt)
    if expo.sum() == 0:
        return 0.0
    return anomaly_value(spec, background.shape(expo))


def compare_windows(window: EncounterWindow, model: TrackModel, background: BackgroundModel,
                    optimal: OptimalWindow | None = None, fixed=FIXED_WINDOWS) -> list[ComparisonRow]:
    """Anomaly values for the optimal configuration, the summed array and fixed windows.

    ``optimal`` defaults to the deterministic array optimum of ``model``; pass
    the MCMC-refined window to compare that instead.
    """
    c = window.counts
    optimal = optimal or optimize_array_weights(model.g, c.dt)
    methods = [("optimal-config", optimal), ("summed-array", summed_array_window(model, c.centers))]
    methods += [(f"fixed-{L:g}s", fixed_window(model, L)) for L in fixed]
    rows = []
    for name, ow in methods:
        val = anomaly_for_window(c.spectra, ow, background, c.dt)
        rows.append(ComparisonRow(name, val, ow.wall_duration, ow.detectors_used))
    return rows


def window_model(track, window: EncounterWindow, response, attenuation, poses, geometry=None,
                 offset: float = 0.0) -> TrackModel:
    return model_counts(track, response, attenuation, window, poses, geometry, offset)
