"""End-to-end processing of one simulated run.

The stages mirror the command-line verbs: simulate streams, track, detect
alarms and adjudicate each encounter, then compare integration windows for
the attributed track.  The in-memory path and the file-based path share
these functions, and tracks always pass through their logged form so both
paths see identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import anomaly, attribution, snr_window
from .io import LoggedTrack, as_logged
from .mcmc import McmcConfig
from .response import build_response, default_profiles, hexagonal_array, isotropic_profiles
from .scene import (
    GroundTruth,
    ScenarioConfig,
    _frame_times,
    background_run,
    carrier_profile,
    generate_truth,
    synthesize_counts,
    synthesize_detections,
    synthesize_pose,
)
from .tracking import TrackerConfig, run_tracker

CALIBRATION_SECONDS = 3600.0
CALIBRATION_SEED = 1_000_003
DEFAULT_FAR = 1.0 / 600.0
ALARM_WINDOW = 2.0


@lru_cache(maxsize=4)
def response_table(isotope: str = "cs137"):
    return build_response(hexagonal_array(), anomaly.get_roi(isotope))


def model_profiles(config: ScenarioConfig, matched: bool = False) -> dict:
    """Attenuation profiles assumed by the count model for each object class.

    The model knows the shielding but not the placement inside the object, so
    it uses the class's default placement; ``matched`` switches both the model
    and the simulation to isotropic objects.
    """
    shielding = config.source.shielding_specs()
    return isotropic_profiles(shielding) if matched else default_profiles(shielding)


def calibrate(config: ScenarioConfig, far: float = DEFAULT_FAR, duration: float = CALIBRATION_SECONDS,
              seed: int = CALIBRATION_SEED, window: float = ALARM_WINDOW):
    """Background model and alarm threshold from a source-free run."""
    bkg = config.background
    run = background_run(duration, bkg.roi_rate, seed, config.sensors.count_bin, bkg.shape, config.source.roi)
    model = anomaly.calibrate_background(run)
    return model, anomaly.calibrate_threshold(run, model, far, window)


@dataclass
class Streams:
    truth: GroundTruth
    times: np.ndarray
    frames: list
    poses: object
    counts: object
    sensor: str
    pose_mode: str


def simulate(config: ScenarioConfig, seed: int, sensor: str, pose_mode: str, matched: bool = False) -> Streams:
    truth = generate_truth(config)
    times = _frame_times(config.sensors.detection_hz, config.duration)
    frames = synthesize_detections(truth, sensor, seed=seed)
    poses = synthesize_pose(truth, pose_mode, seed)
    if matched:
        src = config.source
        att = isotropic_profiles(src.shielding_specs())[config.object(src.carrier).label]
    else:
        att = carrier_profile(config)
    counts = synthesize_counts(truth, response_table(config.source.roi), att, config, seed)
    return Streams(truth, times, frames, poses, counts, sensor, pose_mode.upper())


def track(frames, poses, times, config: TrackerConfig | None = None) -> list[LoggedTrack]:
    state = run_tracker(frames, poses, times, config)
    return [as_logged(t) for t in state.all_tracks()]


@dataclass
class Encounter:
    id: int
    start: float
    stop: float
    detectors: tuple
    window: attribution.EncounterWindow
    report: attribution.AdjudicationReport | None


def adjudicate(counts, tracks, poses, background, threshold, response, profiles,
               window: float = ALARM_WINDOW) -> tuple[list, list[Encounter]]:
    """Alarms and one adjudication per merged encounter.

    Encounters with no overlapping track keep ``report = None``.
    """
    events = anomaly.detect_alarms(counts, background, threshold, window)
    encounters = []
    for k, (s0, s1, dets) in enumerate(anomaly.merge_alarms(events)):
        w = attribution.make_window(counts, s0, s1, tracks)
        rep = attribution.adjudicate(w, response, profiles, poses) if w.tracks else None
        encounters.append(Encounter(k, s0, s1, dets, w, rep))
    return events, encounters


def optimize(encounter: Encounter, tracks, poses, background, response, profiles, mcmc_config=None):
    """Window comparison for the attributed track of ``encounter`` (None when unattributed)."""
    rep = encounter.report
    if rep is None or rep.attributed is None:
        return None
    trk = next(t for t in tracks if t.id == rep.attributed)
    fit = rep.fit(trk.id)
    model = attribution.model_counts(trk, response, profiles, encounter.window, poses, offset=fit.offset)
    optimal = None
    if mcmc_config is not None:
        optimal = snr_window.mcmc_refine(trk, encounter.window, response, profiles, poses, fit.alpha, fit.b,
                                         mcmc_config, offset=fit.offset).window
    return snr_window.compare_windows(encounter.window, model, background, optimal)


# -- evaluation against truth -----------------------------------------------------------


def closest_approach(truth: GroundTruth, object_id: int) -> float:
    obj = truth.objects[object_id]
    ppos, _, _ = truth.platform.state(obj.t)
    d = np.linalg.norm(obj.position[:, :2] - ppos[:, :2], axis=1)
    return float(obj.t[int(np.argmin(d))])


def moving_vehicles(config: ScenarioConfig) -> list[int]:
    from .response import VEHICLE_CLASSES

    return [o.id for o in config.objects
            if o.label in VEHICLE_CLASSES and o.speed > 0 and len(o.waypoints) > 1]


def carrier_encounter(encounters: list[Encounter], t_ca: float) -> Encounter | None:
    """The encounter spanning closest approach, else the one nearest to it."""
    if not encounters:
        return None
    for e in encounters:
        if e.start <= t_ca <= e.stop:
            return e
    return min(encounters, key=lambda e: min(abs(e.start - t_ca), abs(e.stop - t_ca)))


@dataclass
class Outcome:
    alarmed: bool
    attributed: bool
    others_excluded: bool
    offset: float = np.nan
    encounter: Encounter | None = None
    notes: dict = field(default_factory=dict)


def evaluate(encounter: Encounter | None, tracks, carrier: int, others: list[int]) -> Outcome:
    """Was the carrier attributed, and were the other moving vehicles excluded?

    A vehicle is excluded when every track following it is flagged or has a
    higher S than the best carrier track.
    """
    if encounter is None or encounter.report is None:
        return Outcome(encounter is not None, False, False, encounter=encounter)
    rep = encounter.report
    truth_of = {t.id: t.majority_truth() for t in tracks}
    attributed = rep.attributed is not None and truth_of.get(rep.attributed) == carrier
    carrier_fits = [f for f in rep.fits if truth_of.get(f.track_id) == carrier and not f.flagged]
    s_car = min((f.S for f in carrier_fits), default=np.inf)
    others_ok = bool(carrier_fits)
    for f in rep.fits:
        if truth_of.get(f.track_id) in others and not f.flagged and not f.S > s_car:
            others_ok = False
    offset = rep.fit(rep.attributed).offset if attributed else np.nan
    return Outcome(True, attributed, others_ok, offset, encounter)


def run_seed(config: ScenarioConfig, seed: int, sensor: str, pose_mode: str, background, threshold,
             matched: bool = False, with_windows: bool = False, mcmc: bool = False) -> Outcome:
    """Simulate, track, adjudicate and evaluate one seed in memory.

    With ``with_windows`` the window comparison for the carrier encounter is
    stored in ``notes["comparison"]``; ``mcmc`` refines the optimal
    configuration by trajectory sampling seeded like the command line does.
    """
    streams = simulate(config, seed, sensor, pose_mode, matched)
    tracks = track(streams.frames, streams.poses, streams.times)
    response = response_table(config.source.roi)
    profiles = model_profiles(config, matched)
    _, encounters = adjudicate(streams.counts, tracks, streams.poses, background, threshold, response, profiles)
    carrier = config.source.carrier
    enc = carrier_encounter(encounters, closest_approach(streams.truth, carrier))
    out = evaluate(enc, tracks, carrier, [i for i in moving_vehicles(config) if i != carrier])
    if with_windows and enc is not None:
        cfg = McmcConfig(seed=seed) if mcmc else None
        out.notes["comparison"] = optimize(enc, tracks, streams.poses, background, response, profiles, cfg)
    return out
