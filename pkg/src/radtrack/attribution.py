"""Source-object attribution.

Every track overlapping an alarm is assumed, in turn, to carry the source.
Its trajectory gives a geometric factor per detector and time bin,

    g = eps(direction) * T(bearing) * exp(-mu_air r) / (4 pi r^2),

and the expected ROI counts are ``alpha * g * dt + b_d * dt`` with one source
strength shared by the array and one background rate per detector.  The fit
maximises the Poisson likelihood with multiplicative EM updates; the Poisson
deviance of the best fit gives a p-value and the exclusion metric
``S = -log2(p)``.  A BIC comparison against the background-only model and the
fraction of the track lying outside the alarm flag tracks that cannot be
responsible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .anomaly import poisson_deviance
from .response import (
    MU_662,
    DetectorArrayGeometry,
    ResponseTable,
    attenuation_at,
    hexagonal_array,
    lookup_eps,
    object_bearing,
    source_geometry,
    wrap_angle,
)
from .scene import CountSeries, PoseSeries

PAD = 3.0
OFFSET_STEP = 0.1
OFFSET_SPAN = 0.5
OUTSIDE_ALARM_LIMIT = 0.95
N_QUAD = 5


@dataclass
class EncounterWindow:
    start: float
    stop: float
    counts: CountSeries
    tracks: list
    isotope: str = "cs137"
    pad: float = PAD

    def __post_init__(self):
        if not self.stop > self.start:
            raise ValueError("alarm stop must follow start")

    @property
    def span(self) -> tuple[float, float]:
        return self.start - self.pad, self.stop + self.pad


def track_in_span(track, lo: float, hi: float) -> bool:
    return any(lo <= h[0] <= hi for h in track.history)


def make_window(counts: CountSeries, start: float, stop: float, tracks, pad: float = PAD) -> EncounterWindow:
    """Restrict counts to the padded alarm span and keep tracks that overlap it."""
    lo, hi = start - pad, stop + pad
    sub = counts.select(lo, hi)
    cands = [t for t in tracks if track_in_span(t, lo, hi)]
    return EncounterWindow(start, stop, sub, cands, counts.isotope, pad)


def track_samples(track, times, tol: float = 1.0 / 15.0):
    """Interpolated track position, covariance and heading at ``times``.

    Returns ``(pos (n, 3), cov (n, 3, 3), heading (n,) or None, valid (n,))``.
    Times outside the track's history (beyond ``tol``) are invalid.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    ht = np.array([h[0] for h in track.history])
    hp = np.array([h[1] for h in track.history])
    hc = np.array([h[2] for h in track.history])
    valid = (times >= ht[0] - tol) & (times <= ht[-1] + tol)
    pos = np.column_stack([np.interp(times, ht, hp[:, i]) for i in range(3)])
    cov = np.stack([np.interp(times, ht, hc[:, i, j]) for i in range(3) for j in range(3)], axis=1)
    cov = cov.reshape(-1, 3, 3)
    headings = [h[4] for h in track.history]
    if any(h is None for h in headings):
        heading = None
    else:
        unwrapped = np.unwrap(np.array(headings, dtype=float))
        heading = wrap_angle(np.interp(times, ht, unwrapped))
    return pos, cov, heading, valid


@dataclass
class TrackModel:
    track_id: int
    g: np.ndarray  # (n_detectors, n_bins), 1/m^2
    dt: np.ndarray  # (n_bins,)
    offset: float = 0.0

    @property
    def exposure(self) -> np.ndarray:
        return self.g * self.dt


def geometric_factor(positions, headings, label, times, poses: PoseSeries, response: ResponseTable,
                     attenuation: dict, geometry: DetectorArrayGeometry, platform=None):
    """g for source positions (n, 3) at ``times`` -> (n, n_detectors).

    ``platform`` optionally supplies the already interpolated ``(position,
    yaw)`` of the platform at ``times``.
    """
    ppos, pyaw = poses.at(times) if platform is None else platform
    r, az, el = source_geometry(positions, ppos, pyaw, geometry)
    dets = np.arange(geometry.n_detectors)[None, :]
    eps = lookup_eps(response, az[:, None], el[:, None], dets)
    profile = attenuation.get(label) if attenuation else None
    if profile is None:
        trans = np.ones((len(times), 1))
    elif headings is None:
        trans = np.full((len(times), 1), profile.mean())
    else:
        theta = object_bearing(positions, ppos, headings, geometry)
        trans = attenuation_at(profile, theta)[:, None]
    return eps * trans * np.exp(-MU_662["air"] * r) / (4.0 * np.pi * r**2)


def model_counts(track, response: ResponseTable, attenuation: dict, window: EncounterWindow,
                 poses: PoseSeries, geometry: DetectorArrayGeometry | None = None,
                 offset: float = 0.0, n_quad: int = N_QUAD) -> TrackModel:
    """Per-bin geometric factors for ``track`` over the window's bins.

    The source is taken at the track position ``offset`` seconds earlier; the
    factor is averaged over ``n_quad`` points per bin.  Bins the track does
    not cover get ``g = 0``.
    """
    geometry = geometry or hexagonal_array()
    c = window.counts
    if c.n_bins == 0:
        raise ValueError("window has no count bins")
    q = (np.arange(n_quad) + 0.5) / n_quad
    t = (c.t0[:, None] + q[None, :] * c.dt).ravel()
    if t.min() < poses.t[0] - 0.5 or t.max() > poses.t[-1] + 0.5:
        raise ValueError("pose estimates do not cover the window")
    pos, _, heading, valid = track_samples(track, t - offset)
    g = geometric_factor(pos, heading, track.label, t, poses, response, attenuation, geometry)
    g = np.where(valid[:, None], g, 0.0)
    g = g.reshape(c.n_bins, n_quad, -1).mean(axis=1).T
    return TrackModel(track.id, g, np.full(c.n_bins, c.dt), offset)


def poisson_loglike(x, lam) -> float:
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any((lam <= 0) & (x > 0)):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(lam), 0.0)
    return float((xlog - lam - gammaln(x + 1.0)).sum())


@dataclass
class MLEFit:
    alpha: float
    b: np.ndarray
    loglike: float
    n_iter: int
    degenerate: bool = False
    se_alpha: float = np.nan
    trace: list = field(default_factory=list)

    def expected(self, model: TrackModel) -> np.ndarray:
        return self.alpha * model.exposure + self.b[:, None] * model.dt[None, :]


def fit_mle(model: TrackModel, counts, max_iter: int = 500, tol: float = 1e-9, keep_trace: bool = False) -> MLEFit:
    """Poisson maximum-likelihood (alpha, b) by multiplicative EM updates.

    ``counts`` is (n_detectors, n_bins).  Iterates until the relative change
    of the log-likelihood drops below ``tol`` or ``max_iter`` is reached, then
    finishes with guarded Newton steps.
    """
    x = np.asarray(counts, dtype=float)
    G = model.exposure
    dt = model.dt[None, :]
    T = dt.sum()
    if x.shape != G.shape:
        raise ValueError("counts are not aligned with the model bins")
    b_mle = x.sum(axis=1) / T
    if not np.any(G > 0):
        b = b_mle
        return MLEFit(0.0, b, poisson_loglike(x, b[:, None] * dt), 0, degenerate=True, se_alpha=np.inf)
    sum_g = G.sum()
    excess = x.sum() - (b_mle[:, None] * dt).sum() * 0.9
    alpha = max(excess, 0.05 * x.sum(), 1e-12) / sum_g
    b = np.maximum(0.9 * b_mle, 1e-12)
    ll = poisson_loglike(x, alpha * G + b[:, None] * dt)
    trace = [ll] if keep_trace else []
    n = 0
    for n in range(1, max_iter + 1):
        lam = alpha * G + b[:, None] * dt
        ratio = np.divide(x, lam, out=np.zeros_like(x), where=lam > 0)
        alpha = alpha * (ratio * G).sum() / sum_g
        b = b * (ratio * dt).sum(axis=1) / T
        new = poisson_loglike(x, alpha * G + b[:, None] * dt)
        if keep_trace:
            trace.append(new)
        done = abs(new - ll) <= tol * abs(ll)
        ll = new
        if done:
            break
    alpha, b, ll = _newton_polish(x, G, dt, alpha, b, ll)
    if keep_trace:
        trace.append(ll)
    fit = MLEFit(float(alpha), b, ll, n, trace=trace)
    fit.se_alpha = alpha_standard_error(fit, model)
    return fit


def _newton_polish(x, G, dt, alpha, b, ll, max_steps: int = 30):
    """Newton ascent on the concave likelihood from the EM estimate.

    EM converges linearly; a few Newton steps reach the optimum to machine
    precision.  Steps are halved until the likelihood does not drop and all
    parameters stay positive; the EM point is kept otherwise.
    """
    nd, nb = G.shape
    J = np.zeros((nd * nb, nd + 1))
    J[:, 0] = G.ravel()
    for d in range(nd):
        J[d * nb:(d + 1) * nb, d + 1] = dt[0]
    xf = x.ravel()
    theta = np.concatenate([[alpha], b])
    for _ in range(max_steps):
        lam = J @ theta
        if np.any(lam <= 0):
            break
        grad = J.T @ (xf / lam - 1.0)
        hess = (J * (xf / lam**2)[:, None]).T @ J
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-6:
            cand = theta + t * step
            if np.all(cand > 0):
                new = poisson_loglike(x, (J @ cand).reshape(nd, nb))
                if new >= ll:
                    break
            t *= 0.5
        else:
            break
        converged = np.all(np.abs(t * step) <= 1e-13 * np.maximum(np.abs(theta), 1e-300))
        theta, ll = cand, new
        if converged:
            break
    return float(theta[0]), theta[1:], ll


def alpha_standard_error(fit: MLEFit, model: TrackModel) -> float:
    """Standard error of alpha from the expected Fisher information."""
    G = model.exposure
    dt = model.dt
    lam = fit.expected(model)
    nd = G.shape[0]
    J = np.zeros((G.size, nd + 1))
    J[:, 0] = G.ravel()
    for d in range(nd):
        J[d * G.shape[1]:(d + 1) * G.shape[1], d + 1] = dt
    w = 1.0 / np.maximum(lam.ravel(), 1e-12)
    info = J.T @ (J * w[:, None])
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return np.inf
    return float(np.sqrt(max(cov[0, 0], 0.0)))


def deviance(counts, lam) -> float:
    """Poisson deviance; ``inf`` when a bin has counts but zero expectation."""
    return poisson_deviance(counts, lam)


def score(dev: float, dof: int) -> tuple[float, float]:
    """p-value from the chi-square survival function and S = -log2(p)."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not np.isfinite(dev):
        return 0.0, np.inf
    p = float(stats.chi2.sf(dev, dof))
    s = float(-stats.chi2.logsf(dev, dof) / np.log(2.0))
    return p, max(s, 0.0)


def bic(loglike: float, k: int, n: int) -> float:
    return k * np.log(n) - 2.0 * loglike


def bic_reject(model: TrackModel, counts, fit: MLEFit) -> tuple[bool, float, float]:
    """Compare the source+background fit against background only.

    Returns ``(background_preferred, bic_source, bic_background)``.
    """
    x = np.asarray(counts, dtype=float)
    n = x.size
    nd = x.shape[0]
    b0 = x.sum(axis=1) / model.dt.sum()
    ll_bg = poisson_loglike(x, b0[:, None] * model.dt[None, :])
    bic_src = bic(fit.loglike, nd + 1, n)
    bic_bg = bic(ll_bg, nd, n)
    return bool(bic_bg <= bic_src), float(bic_src), float(bic_bg)


@dataclass
class FitResult:
    track_id: int
    alpha: float
    b: np.ndarray
    deviance: float
    dof: int
    p: float
    S: float
    loglike: float
    bic_source: float = np.nan
    bic_background: float = np.nan
    background_preferred: bool = False
    outside_alarm_frac: float = 0.0
    offset: float = 0.0
    offset_m: float = 0.0
    se_alpha: float = np.nan
    degenerate: bool = False
    label: str = ""

    @property
    def flagged(self) -> bool:
        return self.background_preferred or self.outside_alarm_frac > OUTSIDE_ALARM_LIMIT


def fit_track(track, window: EncounterWindow, response, attenuation, poses, geometry=None,
              offset: float = 0.0) -> tuple[FitResult, TrackModel, MLEFit]:
    model = model_counts(track, response, attenuation, window, poses, geometry, offset)
    x = window.counts.roi
    fit = fit_mle(model, x)
    lam = fit.expected(model)
    dev = deviance(x, lam)
    dof = x.size - (x.shape[0] + 1)
    p, s = score(dev, dof)
    bg, bic_s, bic_b = bic_reject(model, x, fit)
    res = FitResult(track.id, fit.alpha, fit.b, dev, dof, p, s, fit.loglike, bic_s, bic_b, bg,
                    offset=offset, se_alpha=fit.se_alpha, degenerate=fit.degenerate, label=track.label)
    return res, model, fit


def offset_grid(span: float = OFFSET_SPAN, step: float = OFFSET_STEP) -> np.ndarray:
    n = int(round(span / step))
    return np.round(np.arange(-n, n + 1) * step, 10)


def track_speed(track, lo: float, hi: float) -> float:
    v = [np.linalg.norm(h[3][:2]) for h in track.history if lo <= h[0] <= hi]
    return float(np.mean(v)) if v else 0.0


def outside_alarm_fraction(track, window: EncounterWindow) -> float:
    lo, hi = window.span
    ts = np.array([h[0] for h in track.history if lo <= h[0] <= hi])
    if len(ts) == 0:
        return 1.0
    return float(np.mean((ts < window.start) | (ts > window.stop)))


def offset_scan(track, window: EncounterWindow, response, attenuation, poses, geometry=None,
                offsets=None) -> FitResult:
    """Best fit over trajectory time shifts; lowest S wins, first index on ties."""
    offsets = offset_grid() if offsets is None else np.asarray(offsets, dtype=float)
    best = None
    for off in offsets:
        res, _, _ = fit_track(track, window, response, attenuation, poses, geometry, float(off))
        if best is None or res.S < best.S:
            best = res
    best.offset_m = best.offset * track_speed(track, *window.span)
    best.outside_alarm_frac = outside_alarm_fraction(track, window)
    return best


@dataclass
class AdjudicationReport:
    start: float
    stop: float
    fits: list  # FitResult, in track id order
    ranking: list  # unflagged track ids by ascending S
    attributed: int | None

    def fit(self, track_id: int) -> FitResult:
        for f in self.fits:
            if f.track_id == track_id:
                return f
        raise KeyError(track_id)


def adjudicate(window: EncounterWindow, response, attenuation, poses, geometry=None,
               offsets=None) -> AdjudicationReport:
    """Offset-scanned fits for every candidate track, flags and ranking."""
    if not window.tracks:
        raise ValueError("no candidate tracks overlap the encounter")
    fits = [offset_scan(t, window, response, attenuation, poses, geometry, offsets)
            for t in sorted(window.tracks, key=lambda t: t.id)]
    ranked = sorted((f for f in fits if not f.flagged), key=lambda f: (f.S, f.track_id))
    ranking = [f.track_id for f in ranked]
    return AdjudicationReport(window.start, window.stop, fits, ranking, ranking[0] if ranking else None)
