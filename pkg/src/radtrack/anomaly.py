"""Spectral model, anomaly value and sliding-window alarms.

The anomaly value is the Poisson deviance between an observed spectrum and
the mean background spectrum rescaled to the observed total.  It serves both
as the alarm statistic and as the detection-sensitivity proxy when comparing
integration windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

N_CHANNELS = 128
E_MAX_KEV = 3000.0
CHANNEL_EDGES = np.linspace(0.0, E_MAX_KEV, N_CHANNELS + 1)
CHANNEL_CENTERS = 0.5 * (CHANNEL_EDGES[1:] + CHANNEL_EDGES[:-1])

PHOTOPEAK_KEV = {"cs137": 661.7}
FWHM_FRACTION = 0.075


@dataclass(frozen=True)
class ROI:
    """Energy window around a photopeak, snapped outward to channel edges."""

    isotope: str
    lo_kev: float
    hi_kev: float

    def __post_init__(self):
        if not self.lo_kev < self.hi_kev:
            raise ValueError("ROI lower bound must be below the upper bound")
        if self.lo_kev < 0 or self.hi_kev > E_MAX_KEV:
            raise ValueError("ROI outside spectrum range")

    @property
    def channels(self) -> slice:
        # every channel that overlaps [lo, hi]
        lo = int(np.searchsorted(CHANNEL_EDGES, self.lo_kev, side="right") - 1)
        hi = int(np.searchsorted(CHANNEL_EDGES, self.hi_kev, side="left"))
        return slice(max(lo, 0), min(hi, N_CHANNELS))

    @property
    def n_channels(self) -> int:
        s = self.channels
        return s.stop - s.start


ROIS = {"cs137": ROI("cs137", 600.0, 725.0)}


def get_roi(isotope: str) -> ROI:
    try:
        return ROIS[isotope]
    except KeyError:
        raise ValueError(f"unknown isotope ROI {isotope!r}") from None


def roi_counts(spectrum, roi: ROI):
    """Counts in the ROI channels; works on the last axis of ``spectrum``."""
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != N_CHANNELS:
        raise ValueError(f"spectrum must have {N_CHANNELS} channels")
    return spectrum[..., roi.channels].sum(axis=-1)


def photopeak_shape(isotope: str = "cs137", roi: ROI | None = None) -> np.ndarray:
    """Gaussian photopeak binned on the channel grid, ROI sum normalised to 1."""
    roi = roi or get_roi(isotope)
    e0 = PHOTOPEAK_KEV[isotope]
    sigma = FWHM_FRACTION * e0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    cdf = 0.5 * (1.0 + erf((CHANNEL_EDGES - e0) / (np.sqrt(2.0) * sigma)))
    shape = np.diff(cdf)
    return shape / shape[roi.channels].sum()


def background_shape(shape_id: str = "smooth", roi: ROI | None = None) -> np.ndarray:
    """Smooth falling continuum, ROI sum normalised to 1."""
    if shape_id != "smooth":
        raise ValueError(f"unknown background shape {shape_id!r}")
    roi = roi or get_roi("cs137")
    e = CHANNEL_CENTERS
    shape = np.exp(-e / 350.0) * (1.0 - np.exp(-e / 40.0)) + 0.08 * np.exp(-e / 1500.0)
    return shape / shape[roi.channels].sum()


def poisson_deviance(x, lam) -> float:
    """2 * sum(lam - x + x log(x / lam)), with x log x = 0 at x = 0.

    Returns ``inf`` when some bin has ``lam == 0`` but ``x > 0``.
    """
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any((lam <= 0) & (x > 0)):
        return float("inf")
    pos = x > 0
    term = lam - x
    term[pos] += x[pos] * np.log(x[pos] / lam[pos])
    return float(max(2.0 * term.sum(), 0.0))


@dataclass
class BackgroundModel:
    """Per-detector mean background spectra, in counts per channel per second."""

    spectrum_rate: np.ndarray  # (n_detectors, n_channels)
    roi: ROI

    @property
    def roi_rate(self) -> np.ndarray:
        return roi_counts(self.spectrum_rate, self.roi)

    def shape(self, weights=None) -> np.ndarray:
        """Expected background spectrum for detector exposure ``weights`` (s)."""
        w = np.ones(len(self.spectrum_rate)) if weights is None else np.asarray(weights, float)
        return w @ self.spectrum_rate

    @classmethod
    def from_rates(cls, roi_rate, roi: ROI, shape_id: str = "smooth"):
        roi_rate = np.asarray(roi_rate, dtype=float)
        return cls(roi_rate[:, None] * background_shape(shape_id, roi)[None, :], roi)


def calibrate_background(counts, roi: ROI | None = None) -> BackgroundModel:
    """Mean background spectra from a source-free ``CountSeries``."""
    roi = roi or get_roi(counts.isotope)
    live = counts.dt * counts.spectra.shape[1]
    rate = counts.spectra.sum(axis=1) / live
    # keep every channel strictly positive so the deviance stays finite
    rate = np.maximum(rate, 1e-6 * rate.max())
    return BackgroundModel(rate, roi)


def anomaly_value(observed, background) -> float:
    """Poisson deviance against the background shape rescaled to the observed total.

    ``background`` is a spectrum shape (any normalisation) or a
    ``BackgroundModel``, whose detector-summed spectrum is used.
    """
    observed = np.asarray(observed, dtype=float)
    total = observed.sum()
    if total <= 0:
        return 0.0
    shape = background.shape() if isinstance(background, BackgroundModel) else np.asarray(background, float)
    expected = shape * (total / shape.sum())
    return poisson_deviance(observed, expected)


@dataclass(frozen=True)
class AlarmEvent:
    detector: int
    start: float
    stop: float
    isotope: str
    peak_value: float


def sliding_anomaly(counts, background: BackgroundModel, window: float = 2.0) -> np.ndarray:
    """Anomaly value of every ``window``-long run of bins, per detector.

    Returns an (n_detectors, n_windows) array; window ``j`` covers bins
    ``j .. j + n - 1``.
    """
    n = max(int(round(window / counts.dt)), 1)
    csum = np.cumsum(counts.spectra, axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    sums = csum[:, n:] - csum[:, :-n]  # (det, n_windows, channels)
    if sums.shape[1] == 0:
        return np.zeros((counts.spectra.shape[0], 0))
    shape = background.spectrum_rate
    totals = sums.sum(axis=2, keepdims=True)
    expected = shape[:, None, :] / shape.sum(axis=1)[:, None, None] * totals
    x = sums.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(x / expected), 0.0)
    dev = 2.0 * (expected - x + xlog).sum(axis=2)
    return np.where(totals[..., 0] > 0, np.maximum(dev, 0.0), 0.0)


def _runs(mask):
    """Start/stop indices (inclusive) of consecutive True runs."""
    padded = np.concatenate([[False], mask, [False]]).astype(int)
    d = np.diff(padded)
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1) - 1


def detect_alarms(counts, background: BackgroundModel, threshold: float, window: float = 2.0,
                  values=None) -> list[AlarmEvent]:
    """Per-detector alarm intervals where the sliding anomaly value exceeds ``threshold``.

    An interval spans from the start of the first exceeding window to the end
    of the last one in a consecutive run.
    """
    if values is None:
        values = sliding_anomaly(counts, background, window)
    n = max(int(round(window / counts.dt)), 1)
    events = []
    for det, series in enumerate(values):
        starts, stops = _runs(series > threshold)
        for a, b in zip(starts, stops):
            events.append(AlarmEvent(
                det, float(counts.t0[a]), float(counts.t0[b + n - 1] + counts.dt),
                counts.isotope, float(series[a:b + 1].max()),
            ))
    events.sort(key=lambda e: (e.start, e.detector))
    return events


def merge_alarms(events) -> list[tuple[float, float, tuple]]:
    """Union of overlapping per-detector intervals: (start, stop, detectors)."""
    spans = []
    for e in sorted(events, key=lambda e: (e.start, e.detector)):
        if spans and e.start <= spans[-1][1]:
            s, t, dets = spans[-1]
            spans[-1] = (s, max(t, e.stop), tuple(sorted(set(dets) | {e.detector})))
        else:
            spans.append((e.start, e.stop, (e.detector,)))
    return spans


def _count_encounters(values, threshold, n, t0, dt):
    events = []
    for det, series in enumerate(values):
        starts, stops = _runs(series > threshold)
        events += [AlarmEvent(det, t0[a], t0[b + n - 1] + dt, "", 0.0) for a, b in zip(starts, stops)]
    return len(merge_alarms(events))


def calibrate_threshold(counts, background: BackgroundModel, false_alarm_rate: float,
                        window: float = 2.0) -> float:
    """Threshold giving at most ``false_alarm_rate`` (1/s) merged alarms on source-free data.

    Very low thresholds merge everything into one long alarm, so the count
    of encounters is not monotone over the full range.  The threshold is
    lowered from the maximum observed value and the last value whose
    encounter count stays within the target is returned.
    """
    if false_alarm_rate < 0:
        raise ValueError("false-alarm rate must be non-negative")
    values = sliding_anomaly(counts, background, window)
    n = max(int(round(window / counts.dt)), 1)
    duration = len(counts.t0) * counts.dt
    target = false_alarm_rate * duration
    cand = np.unique(values)[::-1]
    best = float(cand[0])
    for thr in cand:
        if _count_encounters(values, thr, n, counts.t0, counts.dt) > target:
            break
        best = float(thr)
    return best
