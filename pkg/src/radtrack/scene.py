"""Synthetic drive-by scenarios.

A scenario moves a platform carrying the detector array and a handful of
pedestrians and vehicles along piecewise-linear paths.  From the ground truth
this module draws noisy object detections (video- or lidar-like), platform
pose estimates (SLAM- or INS-like) and Poisson gamma-ray counts per detector.

All random draws come from ``numpy.random.Generator`` objects seeded from a
``SeedSequence`` keyed by stream name, so each stream is reproducible and
independent of which other streams were drawn.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np
import yaml

from . import anomaly
from .response import (
    CLASS_DIMENSIONS,
    OBJECT_CLASSES,
    VEHICLE_CLASSES,
    AttenuationProfile,
    DetectorArrayGeometry,
    ResponseTable,
    ShieldingSpec,
    attenuation_at,
    hexagonal_array,
    lookup_eps,
    object_bearing,
    source_geometry,
    wrap_angle,
    MU_662,
)

SCENARIO_FORMAT = "radtrack-scenario"
SCENARIO_VERSION = 1
MPH = 0.44704
NONE_ID = -1

STREAM_KEYS = {"detections": 1, "pose": 2, "counts": 3}


class ScenarioError(ValueError):
    """A scenario file that cannot be parsed or violates an invariant."""


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_KEYS[stream]]))


# -- configuration -------------------------------------------------------------


@dataclass
class ObjectSpec:
    id: int
    label: str
    waypoints: list
    speed: float
    start: float = 0.0
    heading: str = "along-path"


@dataclass
class PlatformSpec:
    waypoints: list
    speed: float
    array: str = "hex6"
    start: float = 0.0


@dataclass
class SourceSpec:
    carrier: int
    activity: float
    roi: str = "cs137"
    shielding: list = field(default_factory=list)
    offset: float = -1.3
    placement: str = "default"

    def shielding_specs(self) -> list[ShieldingSpec]:
        return [ShieldingSpec(**s) for s in self.shielding]


@dataclass
class BackgroundSpec:
    roi_rate: list = field(default_factory=lambda: [60.0] * 6)
    shape: str = "smooth"


@dataclass
class SensorRates:
    detection_hz: float = 15.0
    counts_hz: float = 20.0
    count_bin: float = 0.25
    pose_hz: float = 10.0


@dataclass
class DetectionNoise:
    """Noise model of one detection sensor.

    Video ranges come from the apparent pixel height, so the radial error is
    proportional to range; lidar measures depth and adds false positives.
    """

    p_det: float = 0.95
    radial_frac: float = 0.0
    transverse_sigma: float = 0.0
    position_sigma: float = 0.0
    z_sigma: float = 0.0
    heading_sigma: float = 0.0
    fp_rate: float = 0.0
    max_range: float = 40.0
    focal_length: float = 1000.0

    @classmethod
    def video(cls, **kw):
        base = dict(p_det=0.90, radial_frac=0.05, transverse_sigma=0.10, z_sigma=0.05)
        return cls(**{**base, **kw})

    @classmethod
    def lidar(cls, **kw):
        base = dict(p_det=0.95, position_sigma=0.10, z_sigma=0.05, heading_sigma=0.05, fp_rate=0.2)
        return cls(**{**base, **kw})

    @classmethod
    def noiseless(cls, **kw):
        return cls(**{**dict(p_det=1.0), **kw})


@dataclass
class PoseNoise:
    """SLAM: small white jitter.  INS: random-walk drift plus jitter proportional to speed."""

    slam_sigma: float = 0.02
    slam_yaw_sigma: float = 0.002
    ins_drift_rate: float = 0.05
    ins_jitter_per_speed: float = 0.04
    ins_yaw_jitter_per_speed: float = 0.002
    jitter_time: float = 0.005


@dataclass
class ScenarioConfig:
    name: str
    duration: float
    platform: PlatformSpec
    objects: list
    source: SourceSpec
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    sensors: SensorRates = field(default_factory=SensorRates)
    seeds: list = field(default_factory=lambda: [0])
    video: DetectionNoise = field(default_factory=DetectionNoise.video)
    lidar: DetectionNoise = field(default_factory=DetectionNoise.lidar)
    pose: PoseNoise = field(default_factory=PoseNoise)

    def __post_init__(self):
        validate(self)

    def object(self, oid: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def noise(self, sensor: str) -> DetectionNoise:
        if sensor not in ("video", "lidar"):
            raise ValueError(f"unknown sensor {sensor!r}")
        return getattr(self, sensor)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"format": SCENARIO_FORMAT, "version": SCENARIO_VERSION, **d}


def validate(cfg: ScenarioConfig) -> None:
    def bad(key, why):
        raise ScenarioError(f"{key}: {why}")

    if not cfg.duration > 0:
        bad("duration", "must be > 0")
    s = cfg.sensors
    for key in ("detection_hz", "counts_hz", "count_bin", "pose_hz"):
        if not getattr(s, key) > 0:
            bad(f"sensors.{key}", "must be > 0")
    if cfg.platform.speed < 0:
        bad("platform.speed", "speed must be >= 0")
    if len(cfg.platform.waypoints) < 1:
        bad("platform.waypoints", "need at least one waypoint")
    ids = set()
    for o in cfg.objects:
        if o.label not in OBJECT_CLASSES:
            bad(f"objects[{o.id}].label", f"unknown class {o.label!r}")
        if o.speed < 0:
            bad(f"objects[{o.id}].speed", "speed must be >= 0")
        if len(o.waypoints) < 1:
            bad(f"objects[{o.id}].waypoints", "need at least one waypoint")
        if o.heading != "along-path":
            bad(f"objects[{o.id}].heading", "only 'along-path' is supported")
        if o.id in ids or o.id < 0:
            bad(f"objects[{o.id}].id", "ids must be unique and non-negative")
        ids.add(o.id)
    if cfg.source.carrier not in ids:
        bad("source.carrier", f"no object with id {cfg.source.carrier}")
    if cfg.source.activity < 0:
        bad("source.activity", "must be >= 0")
    anomaly.get_roi(cfg.source.roi)
    cfg.source.shielding_specs()
    if len(cfg.background.roi_rate) != 6 or min(cfg.background.roi_rate) < 0:
        bad("background.roi_rate", "need six non-negative rates")
    if not cfg.seeds:
        bad("seeds", "need at least one seed")


def _build(cls, data, key):
    if not isinstance(data, dict):
        raise ScenarioError(f"{key}: expected a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ScenarioError(f"{key}: unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ScenarioError(f"{key}: {exc}") from None


def scenario_from_dict(data: dict) -> ScenarioConfig:
    if data.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"format: expected {SCENARIO_FORMAT!r}")
    if data.get("version") != SCENARIO_VERSION:
        raise ScenarioError(f"version: unsupported version {data.get('version')!r}")
    d = {k: v for k, v in data.items() if k not in ("format", "version")}
    try:
        d["platform"] = _build(PlatformSpec, d["platform"], "platform")
        d["objects"] = [_build(ObjectSpec, o, f"objects[{i}]") for i, o in enumerate(d["objects"])]
        d["source"] = _build(SourceSpec, d["source"], "source")
    except KeyError as exc:
        raise ScenarioError(f"{exc.args[0]}: required key missing") from None
    for key, cls in (("background", BackgroundSpec), ("sensors", SensorRates), ("pose", PoseNoise)):
        if key in d:
            d[key] = _build(cls, d[key], key)
    for key in ("video", "lidar"):
        if key in d:
            defaults = asdict(getattr(DetectionNoise, key)())
            d[key] = _build(DetectionNoise, {**defaults, **(d[key] or {})}, key)
    try:
        return _build(ScenarioConfig, d, "scenario")
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from None


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a YAML scenario file."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ScenarioError(f"{path}: parse error at {where}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return scenario_from_dict(data)


def dump_scenario(cfg: ScenarioConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def intersection_scenario(mph: float = 10.0, duration: float | None = None, **overrides) -> ScenarioConfig:
    """Drive-by through a four-way intersection.

    The platform and the source car approach each other in opposite lanes
    and pass at the intersection centre; a second car follows the carrier,
    a third crosses on the side street ahead of the encounter, two parked
    cars sit at the corners perpendicular to the road and two pedestrians
    walk along the sidewalks.
    """
    v = mph * MPH
    lead = 45.0
    meet = lead / v
    duration = duration if duration is not None else 2.0 * meet
    gap = 12.0
    objects = [
        ObjectSpec(1, "car", [[lead, 2.0], [-lead - 60.0, 2.0]], v),
        ObjectSpec(2, "car", [[lead + gap, 2.0], [-lead - 60.0, 2.0]], v),
        ObjectSpec(3, "car", [[-2.0, -40.0], [-2.0, 60.0]], v, start=0.0),
        ObjectSpec(4, "car", [[-9.0, 8.0], [-9.0, 12.0]], 0.0),
        ObjectSpec(5, "car", [[9.0, -8.0], [9.0, -12.0]], 0.0),
        ObjectSpec(6, "person", [[-12.0, 7.5], [20.0, 7.5]], 1.4),
        ObjectSpec(7, "person", [[12.0, -7.5], [-20.0, -7.5]], 1.4),
    ]
    cfg = dict(
        name=f"intersection-{mph:g}mph",
        duration=float(duration),
        platform=PlatformSpec([[-lead, -2.0], [lead + 60.0, -2.0]], v),
        objects=objects,
        source=SourceSpec(
            carrier=1,
            activity=1.87e-3 * 3.7e10 * 0.851,
            shielding=[{"material": "Pb", "thickness": 0.02}],
        ),
    )
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


# -- ground truth --------------------------------------------------------------


class Path2D:
    """Constant-speed motion along a polyline, holding at the last waypoint."""

    def __init__(self, waypoints, speed: float, start: float = 0.0, z: float = 0.0):
        self.points = np.atleast_2d(np.asarray(waypoints, dtype=float))
        self.speed = float(speed)
        self.start = float(start)
        self.z = float(z)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        nz = np.flatnonzero(self.seg_len > 0)
        self.first_bearing = float(np.arctan2(*seg[nz[0]][::-1])) if len(nz) else 0.0

    def state(self, t):
        """Position (n, 3), velocity (n, 3) and heading (n,) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.clip(self.speed * (t - self.start), 0.0, self.cum[-1])
        moving = (t > self.start) & (self.speed * (t - self.start) < self.cum[-1]) & (self.speed > 0)
        if len(self.points) == 1:
            pos = np.repeat(self.points[:1], len(t), axis=0)
            heading = np.full(len(t), self.first_bearing)
            vel = np.zeros((len(t), 2))
        else:
            i = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)
            seg = self.points[i + 1] - self.points[i]
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(self.seg_len[i] > 0, (s - self.cum[i]) / self.seg_len[i], 0.0)
                unit = np.where(self.seg_len[i][:, None] > 0, seg / self.seg_len[i][:, None], 0.0)
            pos = self.points[i] + frac[:, None] * seg
            heading = np.where(self.seg_len[i] > 0, np.arctan2(unit[:, 1], unit[:, 0]), self.first_bearing)
            vel = np.where(moving[:, None], unit * self.speed, 0.0)
        pos3 = np.column_stack([pos, np.full(len(t), self.z)])
        vel3 = np.column_stack([vel, np.zeros(len(t))])
        return pos3, vel3, heading


@dataclass
class ObjectTruth:
    id: int
    label: str
    path: Path2D
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    heading: np.ndarray

    def state(self, t):
        return self.path.state(t)


@dataclass
class PlatformTruth:
    path: Path2D
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    yaw: np.ndarray

    def state(self, t):
        return self.path.state(t)

    def speed(self, t) -> np.ndarray:
        return np.linalg.norm(self.path.state(t)[1], axis=1)


@dataclass
class GroundTruth:
    config: ScenarioConfig
    objects: dict
    platform: PlatformTruth

    def source_position(self, t):
        """True source position (n, 3) and carrier heading (n,)."""
        src = self.config.source
        pos, _, heading = self.objects[src.carrier].state(t)
        pos = pos.copy()
        pos[:, 0] += src.offset * np.cos(heading)
        pos[:, 1] += src.offset * np.sin(heading)
        return pos, heading


def _frame_times(rate: float, duration: float) -> np.ndarray:
    n = int(np.floor(duration * rate + 1e-9)) + 1
    return np.arange(n) / rate


def generate_truth(config: ScenarioConfig) -> GroundTruth:
    """Sample every object at the detection rate and the platform at the counts rate."""
    t_obj = _frame_times(config.sensors.detection_hz, config.duration)
    objects = {}
    for o in config.objects:
        path = Path2D(o.waypoints, o.speed, o.start, z=CLASS_DIMENSIONS[o.label][2] / 2.0)
        pos, vel, hd = path.state(t_obj)
        objects[o.id] = ObjectTruth(o.id, o.label, path, t_obj, pos, vel, hd)
    p = config.platform
    ppath = Path2D(p.waypoints, p.speed, p.start, z=0.0)
    t_pl = _frame_times(config.sensors.counts_hz, config.duration)
    pos, vel, yaw = ppath.state(t_pl)
    return GroundTruth(config, objects, PlatformTruth(ppath, t_pl, pos, vel, yaw))


# -- detections ------------------------------------------------------------------


@dataclass
class SyntheticDetection:
    t: float
    sensor: str
    label: str
    confidence: float
    center: np.ndarray  # platform frame
    extent: np.ndarray
    heading: float | None  # platform frame
    truth_id: int = NONE_ID


def infer_range(pixel_height: float, focal_length: float, nominal_height: float) -> float:
    """Monocular range from apparent height: f * H / h."""
    if pixel_height <= 0 or focal_length <= 0:
        raise ValueError("pixel height and focal length must be positive")
    return focal_length * nominal_height / pixel_height


def _to_platform(points, platform_pos, yaw):
    d = points - platform_pos
    c, s = np.cos(yaw), np.sin(yaw)
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])


def synthesize_detections(truth: GroundTruth, sensor: str, noise: DetectionNoise | None = None,
                          seed: int = 0) -> list[list[SyntheticDetection]]:
    """Detections per frame at the detection rate, in the platform frame.

    Returns one list per frame (frames can be empty).
    """
    noise = noise or truth.config.noise(sensor)
    if sensor not in ("video", "lidar"):
        raise ValueError(f"unknown sensor {sensor!r}")
    rng = stream_rng(seed, "detections")
    times = _frame_times(truth.config.sensors.detection_hz, truth.config.duration)
    ppos, _, pyaw = truth.platform.state(times)
    states = {oid: o.state(times) for oid, o in truth.objects.items()}
    frames = []
    for k, t in enumerate(times):
        frame = []
        for oid, obj in truth.objects.items():
            pos, _, hd = states[oid]
            local = _to_platform(pos[k:k + 1], ppos[k], pyaw[k])[0]
            rng_h = float(np.hypot(local[0], local[1]))
            detected = rng.random() < noise.p_det
            draws = rng.standard_normal(5)
            if rng_h > noise.max_range or not detected or rng_h < 0.5:
                continue
            L, W, H = CLASS_DIMENSIONS[obj.label]
            center = local.copy()
            if sensor == "video":
                radial = np.array([local[0], local[1], 0.0]) / rng_h
                perp = np.array([-radial[1], radial[0], 0.0])
                px = noise.focal_length * H / rng_h * (1.0 + noise.radial_frac * draws[0])
                r_hat = infer_range(max(px, 1e-6), noise.focal_length, H)
                center = center + (r_hat - rng_h) * radial + noise.transverse_sigma * draws[1] * perp
                center[2] += noise.z_sigma * draws[2]
                foot = np.sqrt(L * W)
                extent = np.array([foot, foot, H])
                heading = None
            else:
                center[:2] += noise.position_sigma * draws[:2]
                center[2] += noise.z_sigma * draws[2]
                extent = np.array([L, W, H])
                heading = float(wrap_angle(hd[k] - pyaw[k] + noise.heading_sigma * draws[3]))
            conf = float(0.6 + 0.4 * rng.random())
            frame.append(SyntheticDetection(float(t), sensor, obj.label, conf, center, extent, heading, oid))
        if sensor == "lidar" and noise.fp_rate > 0:
            for _ in range(rng.poisson(noise.fp_rate)):
                label = "person" if rng.random() < 0.5 else "car"
                L, W, H = CLASS_DIMENSIONS[label]
                r = noise.max_range * np.sqrt(rng.uniform(0.02, 1.0))
                a = rng.uniform(-np.pi, np.pi)
                center = np.array([r * np.cos(a), r * np.sin(a), H / 2.0])
                extent = np.array([L, W, H]) * rng.uniform(0.7, 1.3, size=3)
                frame.append(SyntheticDetection(float(t), sensor, label, float(0.3 + 0.3 * rng.random()),
                                                center, extent, float(rng.uniform(-np.pi, np.pi)), NONE_ID))
        frames.append(frame)
    return frames


# -- platform pose ---------------------------------------------------------------


@dataclass
class PoseEstimate:
    t: float
    position: np.ndarray
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0
    mode: str = "SLAM"


@dataclass
class PoseSeries:
    """Pose estimates as arrays; ``at`` interpolates between samples."""

    t: np.ndarray
    position: np.ndarray
    yaw: np.ndarray
    mode: str
    pitch: np.ndarray | None = None
    roll: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.t)
        self.pitch = np.zeros(n) if self.pitch is None else np.asarray(self.pitch, float)
        self.roll = np.zeros(n) if self.roll is None else np.asarray(self.roll, float)

    def at(self, t):
        """Interpolated (position (n, 3), yaw (n,)) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        pos = np.column_stack([np.interp(t, self.t, self.position[:, i]) for i in range(3)])
        yaw = np.interp(t, self.t, np.unwrap(self.yaw))
        return pos, wrap_angle(yaw)

    def estimate(self, t: float) -> PoseEstimate:
        pos, yaw = self.at(t)
        return PoseEstimate(float(t), pos[0], float(yaw[0]), mode=self.mode)

    def __iter__(self):
        for i in range(len(self.t)):
            yield PoseEstimate(float(self.t[i]), self.position[i], float(self.yaw[i]),
                               float(self.pitch[i]), float(self.roll[i]), self.mode)

    def __len__(self):
        return len(self.t)


def synthesize_pose(truth: GroundTruth, mode: str, seed: int = 0, noise: PoseNoise | None = None) -> PoseSeries:
    """Platform pose estimates at the pose rate."""
    mode = mode.upper()
    if mode not in ("SLAM", "INS"):
        raise ValueError(f"unknown pose mode {mode!r}")
    noise = noise or truth.config.pose
    rng = stream_rng(seed, "pose")
    rate = truth.config.sensors.pose_hz
    base = _frame_times(rate, truth.config.duration)
    t = base + noise.jitter_time * rng.uniform(-1.0, 1.0, size=len(base))
    t[0] = base[0]
    t = np.maximum.accumulate(t)
    pos, vel, yaw = truth.platform.state(t)
    n = len(t)
    if mode == "SLAM":
        pos = pos + noise.slam_sigma * rng.standard_normal((n, 3))
        yaw = yaw + noise.slam_yaw_sigma * rng.standard_normal(n)
    else:
        speed = np.linalg.norm(vel, axis=1)
        dt = np.diff(t, prepend=t[0])
        drift = np.cumsum(noise.ins_drift_rate * np.sqrt(dt)[:, None] * rng.standard_normal((n, 3)), axis=0)
        jitter = noise.ins_jitter_per_speed * speed[:, None] * rng.standard_normal((n, 3))
        pos = pos + drift + jitter
        yaw = yaw + noise.ins_yaw_jitter_per_speed * speed * rng.standard_normal(n)
    return PoseSeries(t, pos, wrap_angle(yaw), mode)


# -- counts ----------------------------------------------------------------------


@dataclass
class CountRecord:
    detector: int
    t0: float
    dt: float
    roi_counts: int
    spectrum: np.ndarray


@dataclass
class CountSeries:
    """Binned counts for the whole array.

    ``roi`` is (n_detectors, n_bins); ``spectra`` is (n_detectors, n_bins,
    n_channels).  ``expected`` and ``distance`` carry the simulator's mean
    ROI counts and crystal-to-source distances at bin centres when known.
    """

    t0: np.ndarray
    dt: float
    roi: np.ndarray
    spectra: np.ndarray
    isotope: str = "cs137"
    expected: np.ndarray | None = None
    distance: np.ndarray | None = None

    @property
    def centers(self) -> np.ndarray:
        return self.t0 + 0.5 * self.dt

    @property
    def n_bins(self) -> int:
        return len(self.t0)

    def records(self) -> list[CountRecord]:
        return [
            CountRecord(d, float(self.t0[i]), self.dt, int(self.roi[d, i]), self.spectra[d, i])
            for i in range(self.n_bins)
            for d in range(self.roi.shape[0])
        ]

    def select(self, start: float, stop: float) -> "CountSeries":
        """Bins whose interval lies within [start, stop)."""
        m = (self.t0 >= start - 1e-9) & (self.t0 + self.dt <= stop + 1e-9)
        sub = lambda a: None if a is None else a[:, m]
        return CountSeries(self.t0[m], self.dt, self.roi[:, m], self.spectra[:, m], self.isotope,
                           sub(self.expected), sub(self.distance))


def mean_counts(activity, eps, r, dt, b=0.0, transmission=1.0, mu=0.0):
    """Expected counts in a bin: alpha eps T exp(-mu r) / (4 pi r^2) dt + b dt."""
    r = np.asarray(r, dtype=float)
    return activity * eps * transmission * np.exp(-mu * r) / (4.0 * np.pi * r**2) * dt + b * dt


def source_rate(truth: GroundTruth, t, response: ResponseTable, attenuation: AttenuationProfile,
                geometry: DetectorArrayGeometry):
    """Photopeak count rate (n, 6) from the source at times ``t`` and the distances used."""
    src = truth.config.source
    spos, heading = truth.source_position(t)
    ppos, _, pyaw = truth.platform.state(t)
    r, az, el = source_geometry(spos, ppos, pyaw, geometry)
    eps = lookup_eps(response, az[:, None], el[:, None], np.arange(geometry.n_detectors)[None, :])
    theta = object_bearing(spos, ppos, heading, geometry)
    trans = attenuation_at(attenuation, theta)[:, None]
    return mean_counts(src.activity, eps, r, 1.0, 0.0, trans, MU_662["air"]), r


def synthesize_counts(truth: GroundTruth, response: ResponseTable, attenuation: AttenuationProfile,
                      config: ScenarioConfig | None = None, seed: int = 0,
                      geometry: DetectorArrayGeometry | None = None) -> CountSeries:
    """Poisson counts per detector and bin, with spectra.

    Rates are evaluated at the raw packet rate and summed into bins of the
    configured width.  The source contributes a Gaussian photopeak whose ROI
    integral equals the photopeak rate; the background contributes the
    configured continuum shape scaled to the per-detector ROI rate.
    """
    config = config or truth.config
    geometry = geometry or hexagonal_array()
    if response.n_detectors < geometry.n_detectors:
        raise ValueError("response table does not cover every detector")
    rng = stream_rng(seed, "counts")
    s = config.sensors
    sub = max(int(round(s.count_bin * s.counts_hz)), 1)
    raw_dt = s.count_bin / sub
    n_bins = int(np.floor(config.duration / s.count_bin + 1e-9))
    t0 = np.arange(n_bins) * s.count_bin
    t_raw = (np.arange(n_bins * sub) + 0.5) * raw_dt
    rate, _ = source_rate(truth, t_raw, response, attenuation, geometry)
    src_mean = (rate * raw_dt).reshape(n_bins, sub, -1).sum(axis=1).T  # (det, bins)
    _, r_center = source_rate(truth, t0 + 0.5 * s.count_bin, response, attenuation, geometry)
    roi = anomaly.get_roi(config.source.roi)
    peak = anomaly.photopeak_shape(config.source.roi, roi)
    bkg = anomaly.background_shape(config.background.shape, roi)
    b = np.asarray(config.background.roi_rate, dtype=float)
    lam = src_mean[:, :, None] * peak + (b[:, None, None] * s.count_bin) * bkg
    spectra = rng.poisson(lam)
    roi_counts = spectra[..., roi.channels].sum(axis=-1)
    expected = src_mean + b[:, None] * s.count_bin
    return CountSeries(t0, s.count_bin, roi_counts, spectra, config.source.roi, expected, r_center.T)


def background_run(duration: float, roi_rate=(60.0,) * 6, seed: int = 0, count_bin: float = 0.25,
                   shape: str = "smooth", isotope: str = "cs137") -> CountSeries:
    """Source-free counts for background calibration."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    roi = anomaly.get_roi(isotope)
    n_bins = int(np.floor(duration / count_bin + 1e-9))
    b = np.asarray(roi_rate, dtype=float)
    lam = (b[:, None, None] * count_bin) * anomaly.background_shape(shape, roi)[None, None, :]
    spectra = rng.poisson(np.broadcast_to(lam, (len(b), n_bins, anomaly.N_CHANNELS)))
    t0 = np.arange(n_bins) * count_bin
    expected = np.broadcast_to(b[:, None] * count_bin, (len(b), n_bins)).copy()
    return CountSeries(t0, count_bin, spectra[..., roi.channels].sum(-1), spectra, isotope, expected)


def carrier_profile(config: ScenarioConfig) -> AttenuationProfile:
    """Attenuation profile of the source carrier including its shielding."""
    from .response import build_attenuation_profile

    src = config.source
    return build_attenuation_profile(config.object(src.carrier).label, src.shielding_specs(), src.placement)
