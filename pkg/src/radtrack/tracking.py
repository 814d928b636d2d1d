"""Multi-object tracking with Gaussian detections.

Detections become multivariate normals in a world-fixed frame: the box
centre is the mean and the scaled box dimensions give the principal-axis
standard deviations, rotated by the box heading when the sensor reports one.
Tracks are constant-velocity Kalman filters whose process noise depends on
the object class.  Detections are matched to tracks by linear assignment on
the Hellinger distance between the detection and each track's predicted
detection distribution.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .response import VEHICLE_CLASSES, wrap_angle
from .scene import NONE_ID, PoseEstimate, SyntheticDetection

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    association_gate: float = 0.8
    consolidation_gate: float = 0.6
    vehicle_velocity_var: float = 4.44
    pedestrian_velocity_var: float = 0.28
    extent_scale: dict = field(default_factory=lambda: {"lidar": 0.25, "video": 0.25})
    video_radial_frac: float = 0.05
    min_sigma: float = 0.2
    max_misses: int = 8
    min_hits: int = 2
    init_velocity_var: dict = field(default_factory=lambda: {"vehicle": 25.0, "pedestrian": 4.0})
    frame_period: float = 1.0 / 15.0
    eig_floor: float = 1e-9

    def __post_init__(self):
        for g in (self.association_gate, self.consolidation_gate):
            if not 0.0 < g < 1.0:
                raise ValueError("gates must lie in (0, 1)")
        if self.vehicle_velocity_var <= 0 or self.pedestrian_velocity_var <= 0:
            raise ValueError("velocity variances must be positive")

    def velocity_var(self, label: str) -> float:
        return self.vehicle_velocity_var if label in VEHICLE_CLASSES else self.pedestrian_velocity_var

    def initial_velocity_var(self, label: str) -> float:
        return self.init_velocity_var["vehicle" if label in VEHICLE_CLASSES else "pedestrian"]


@dataclass
class DetectionMVN:
    t: float
    mean: np.ndarray
    cov: np.ndarray
    label: str
    confidence: float
    heading: float | None = None
    sensor: str = "lidar"
    truth_id: int = NONE_ID  # bookkeeping for evaluation only


def _rot(yaw, pitch=0.0, roll=0.0):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def to_mvn(det: SyntheticDetection, pose: PoseEstimate, config: TrackerConfig | None = None) -> DetectionMVN:
    """World-frame MVN for a platform-frame detection."""
    config = config or TrackerConfig()
    if np.any(np.asarray(det.extent) <= 0):
        raise ValueError("detection extent must be positive")
    if abs(pose.t - det.t) > config.frame_period + 1e-9:
        raise ValueError(f"stale pose: pose at {pose.t:.3f} s for detection at {det.t:.3f} s")
    sd = np.maximum(config.extent_scale[det.sensor] * np.asarray(det.extent, dtype=float), config.min_sigma)
    cov = np.diag(sd**2)
    if det.heading is not None:
        r = _rot(det.heading)
        cov = r @ cov @ r.T
    if det.sensor == "video":
        c = np.asarray(det.center, dtype=float)
        rng = np.hypot(c[0], c[1])
        if rng > 0:
            u = np.array([c[0] / rng, c[1] / rng, 0.0])
            cov = cov + (config.video_radial_frac * rng) ** 2 * np.outer(u, u)
    r = _rot(pose.yaw, pose.pitch, pose.roll)
    mean = np.asarray(pose.position, dtype=float) + r @ np.asarray(det.center, dtype=float)
    cov = r @ cov @ r.T
    cov = 0.5 * (cov + cov.T)
    heading = None if det.heading is None else float(wrap_angle(det.heading + pose.yaw))
    return DetectionMVN(det.t, mean, cov, det.label, det.confidence, heading, det.sensor, det.truth_id)


def _mean_cov(x):
    if isinstance(x, tuple):
        return np.asarray(x[0], float), np.asarray(x[1], float)
    return np.asarray(x.mean, float), np.asarray(x.cov, float)


def hellinger(a, b) -> float:
    """Hellinger distance between two multivariate normals.

    ``a`` and ``b`` are ``(mean, cov)`` tuples or objects with ``mean`` and
    ``cov`` attributes.
    """
    ma, ca = _mean_cov(a)
    mb, cb = _mean_cov(b)
    cm = (ca + cb) / 2.0
    sa, lda = np.linalg.slogdet(np.atleast_2d(ca))
    sb, ldb = np.linalg.slogdet(np.atleast_2d(cb))
    sm, ldm = np.linalg.slogdet(np.atleast_2d(cm))
    if sm <= 0 or sa <= 0 or sb <= 0:
        raise np.linalg.LinAlgError("covariances must be positive definite")
    d = np.atleast_1d(ma - mb)
    maha = float(d @ np.linalg.solve(np.atleast_2d(cm), d))
    log_bc = 0.25 * lda + 0.25 * ldb - 0.5 * ldm - 0.125 * maha
    return float(np.sqrt(max(0.0, -np.expm1(min(log_bc, 0.0)))))


def hellinger_matrix(means_a, covs_a, means_b, covs_b) -> np.ndarray:
    """Pairwise Hellinger distances, (len(a), len(b))."""
    ma = np.asarray(means_a, float)[:, None, :]
    mb = np.asarray(means_b, float)[None, :, :]
    ca = np.asarray(covs_a, float)[:, None, :, :]
    cb = np.asarray(covs_b, float)[None, :, :, :]
    cm = (ca + cb) / 2.0
    lda = np.linalg.slogdet(ca)[1]
    ldb = np.linalg.slogdet(cb)[1]
    ldm = np.linalg.slogdet(cm)[1]
    d = ma - mb
    maha = np.einsum("...i,...i->...", d, np.linalg.solve(cm, d[..., None])[..., 0])
    log_bc = 0.25 * lda + 0.25 * ldb - 0.5 * ldm - 0.125 * maha
    return np.sqrt(np.maximum(0.0, -np.expm1(np.minimum(log_bc, 0.0))))


def consolidate(detections: list[DetectionMVN], gate: float = 0.6) -> list[DetectionMVN]:
    """Greedily merge the closest pair below ``gate`` until no such pair is left.

    A merge takes the confidence-weighted mean and the covariance, label and
    heading of the more confident member.
    """
    dets = list(detections)
    while len(dets) > 1:
        hd = hellinger_matrix([d.mean for d in dets], [d.cov for d in dets],
                              [d.mean for d in dets], [d.cov for d in dets])
        np.fill_diagonal(hd, np.inf)
        i, j = np.unravel_index(np.argmin(hd), hd.shape)
        if hd[i, j] >= gate:
            break
        i, j = min(i, j), max(i, j)
        a, b = dets[i], dets[j]
        hi = a if a.confidence >= b.confidence else b
        wa, wb = a.confidence, b.confidence
        mean = (wa * a.mean + wb * b.mean) / (wa + wb) if wa + wb > 0 else 0.5 * (a.mean + b.mean)
        merged = DetectionMVN(hi.t, mean, hi.cov.copy(), hi.label, max(wa, wb), hi.heading, hi.sensor,
                              hi.truth_id)
        dets = [d for k, d in enumerate(dets) if k not in (i, j)]
        dets.insert(i, merged)
    return dets


@dataclass
class Track:
    id: int
    x: np.ndarray  # (x, y, z, vx, vy, vz)
    P: np.ndarray
    label: str
    t: float
    meas_cov: np.ndarray
    history: list = field(default_factory=list)  # (t, pos, pos_cov, vel, heading, updated)
    hits: int = 1
    hit_streak: int = 1
    misses: int = 0
    confirmed: bool = False
    heading: float | None = None
    n_updates: int = 1
    truth_votes: Counter = field(default_factory=Counter)

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    def position_mvn(self) -> tuple[np.ndarray, np.ndarray]:
        """Predicted detection distribution: position covariance plus measurement covariance."""
        return self.x[:3].copy(), self.P[:3, :3] + self.meas_cov

    def majority_truth(self) -> int:
        if not self.truth_votes:
            return NONE_ID
        return max(sorted(self.truth_votes), key=lambda k: self.truth_votes[k])

    def record(self, updated: bool) -> None:
        entry = (self.t, self.x[:3].copy(), self.P[:3, :3].copy(), self.x[3:].copy(), self.heading, updated)
        if self.history and self.t <= self.history[-1][0]:
            self.history[-1] = entry
        else:
            self.history.append(entry)


def _repair_spd(P: np.ndarray, floor: float) -> np.ndarray:
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(P)
        log.warning("covariance lost positive definiteness; flooring eigenvalues")
        return (v * np.maximum(w, floor)) @ v.T


def new_track(track_id: int, det: DetectionMVN, config: TrackerConfig) -> Track:
    P = np.zeros((6, 6))
    P[:3, :3] = det.cov
    P[3:, 3:] = np.eye(3) * config.initial_velocity_var(det.label)
    x = np.concatenate([det.mean, np.zeros(3)])
    trk = Track(track_id, x, P, det.label, det.t, det.cov.copy(), heading=det.heading)
    trk.truth_votes[det.truth_id] += 1
    trk.record(True)
    return trk


def predict(track: Track, dt: float, config: TrackerConfig | None = None) -> Track:
    """Constant-velocity prediction, in place; returns the track."""
    config = config or TrackerConfig()
    if dt < 0:
        raise ValueError("cannot predict backwards in time")
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    Q = np.zeros((6, 6))
    Q[3:, 3:] = config.velocity_var(track.label) * dt * np.eye(3)
    track.x = F @ track.x
    track.P = _repair_spd(F @ track.P @ F.T + Q, config.eig_floor)
    track.t += dt
    return track


def update(track: Track, det: DetectionMVN, config: TrackerConfig | None = None) -> Track:
    """Kalman update of the position block with the detection as measurement, in place."""
    config = config or TrackerConfig()
    z = np.asarray(det.mean, float)
    R = np.asarray(det.cov, float)
    if track.n_updates == 1 and not track.confirmed and det.t > track.history[0][0]:
        # two-point initiation: the second detection fixes the velocity
        first_t, first_pos = track.history[0][0], track.history[0][1]
        track.x[3:] = (z - first_pos) / (det.t - first_t)
    H = np.zeros((3, 6))
    H[:, :3] = np.eye(3)
    S = H @ track.P @ H.T + R
    K = np.linalg.solve(S, H @ track.P).T
    track.x = track.x + K @ (z - H @ track.x)
    IKH = np.eye(6) - K @ H
    track.P = _repair_spd(IKH @ track.P @ IKH.T + K @ R @ K.T, config.eig_floor)
    track.meas_cov = R.copy()
    track.hits += 1
    track.hit_streak += 1
    track.n_updates += 1
    track.misses = 0
    if det.heading is not None:
        track.heading = det.heading
    track.truth_votes[det.truth_id] += 1
    return track


def assign(cost: np.ndarray, gate: float):
    """Optimal assignment on a D x T cost matrix with gating.

    The matrix is padded to square with ``gate`` so leaving a row or column
    unmatched costs the gate.  Returns ``(pairs, unmatched_rows, unmatched_cols)``.
    """
    cost = np.asarray(cost, dtype=float)
    D, T = cost.shape
    n = max(D, T)
    padded = np.full((n, n), gate)
    padded[:D, :T] = cost
    rows, cols = linear_sum_assignment(padded)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if r < D and c < T and cost[r, c] < gate]
    mr = {r for r, _ in pairs}
    mc = {c for _, c in pairs}
    return pairs, [r for r in range(D) if r not in mr], [c for c in range(T) if c not in mc]


def associate(detections: list[DetectionMVN], tracks: list[Track], gate: float = 0.8):
    """Match detections to tracks by Hellinger distance."""
    if not detections or not tracks:
        return [], list(range(len(detections))), list(range(len(tracks)))
    tm = [t.position_mvn() for t in tracks]
    cost = hellinger_matrix([d.mean for d in detections], [d.cov for d in detections],
                            [m for m, _ in tm], [c for _, c in tm])
    return assign(cost, gate)


@dataclass
class TrackerState:
    config: TrackerConfig = field(default_factory=TrackerConfig)
    tracks: list = field(default_factory=list)
    finished: list = field(default_factory=list)
    t: float = -np.inf
    next_id: int = 1

    def all_tracks(self, confirmed_only: bool = True) -> list[Track]:
        out = self.finished + self.tracks
        if confirmed_only:
            out = [t for t in out if t.confirmed]
        return sorted(out, key=lambda t: t.id)


def _retire(track: Track) -> Track:
    # drop trailing coasted samples
    while track.history and not track.history[-1][5]:
        track.history.pop()
    return track


def step(state: TrackerState, frame: list[SyntheticDetection], pose: PoseEstimate, t: float) -> TrackerState:
    """Advance the tracker by one frame, in place."""
    cfg = state.config
    if t < state.t:
        raise ValueError(f"frame at {t:.3f} s is older than the tracker clock {state.t:.3f} s")
    dets = [to_mvn(d, pose, cfg) for d in frame]
    dets = consolidate(dets, cfg.consolidation_gate)
    for trk in state.tracks:
        predict(trk, t - trk.t, cfg)
    pairs, free_dets, free_tracks = associate(dets, state.tracks, cfg.association_gate)
    for di, ti in pairs:
        trk = update(state.tracks[ti], dets[di], cfg)
        if trk.hit_streak >= cfg.min_hits:
            trk.confirmed = True
        trk.record(True)
    for ti in free_tracks:
        trk = state.tracks[ti]
        trk.misses += 1
        trk.hit_streak = 0
        trk.record(False)
    alive = []
    for trk in state.tracks:
        if trk.misses >= cfg.max_misses or (not trk.confirmed and trk.misses > 0):
            if trk.confirmed:
                state.finished.append(_retire(trk))
        else:
            alive.append(trk)
    for di in free_dets:
        alive.append(new_track(state.next_id, dets[di], cfg))
        state.next_id += 1
    state.tracks = alive
    state.t = t
    return state


def run_tracker(frames, poses, times, config: TrackerConfig | None = None) -> TrackerState:
    """Run the tracker over a detection stream using interpolated pose estimates."""
    state = TrackerState(config or TrackerConfig())
    for frame, t in zip(frames, times):
        step(state, frame, poses.estimate(t), float(t))
    for trk in state.tracks:
        if trk.confirmed:
            _retire(trk)
    return state
