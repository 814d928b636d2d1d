"""Line-delimited text formats for every pipeline stage.

Each file starts with a ``# radtrack-<kind> v1`` header and a ``#`` column
line, followed by one whitespace-separated record per line.  Floats are
written with the shortest representation that round-trips exactly, so a
read-write cycle reproduces the in-memory values bit for bit and reruns on
the same inputs produce identical files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anomaly import AlarmEvent, BackgroundModel, get_roi
from .scene import NONE_ID, CountSeries, PoseSeries, SyntheticDetection

COLUMNS = {
    "detections": "t sensor label confidence cx cy cz ex ey ez heading truth_id",
    "counts": "detector t0 dt roi_counts ch0..ch127",
    "pose": "t x y z yaw pitch roll mode",
    "truth": "t object_id label x y z heading",
    "tracks": "t track_id label x y z vx vy vz det_count var_x var_y var_z heading updated truth_id",
    "alarms": "detector start stop isotope peak_value",
    "adjudication": "encounter_id start stop track_id label truth_id S p offset_s offset_m alpha "
                    "se_alpha background_preferred outside_alarm_frac attributed",
    "comparison": "encounter_id method anomaly_value duration_s detectors_used",
    "background": "detector threshold window_s ch0..ch127 (counts/s)",
}


class FormatError(ValueError):
    """A stage file does not match its expected layout."""


def fmt(x) -> str:
    if x is None:
        return "nan"
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _header(kind: str) -> list[str]:
    return [f"# radtrack-{kind} v1", f"# {COLUMNS[kind]}"]


def write_lines(path, kind: str, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _header(kind) + [" ".join(fmt(v) if not isinstance(v, str) else v for v in row) for row in rows]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read_rows(path, kind: str) -> list[list[str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# radtrack-{kind} v1":
        raise FormatError(f"{path}: not a radtrack {kind} file")
    return [ln.split() for ln in lines[1:] if ln.strip() and not ln.startswith("#")]


def _opt(v: str):
    f = float(v)
    return None if np.isnan(f) else f


# -- streams -----------------------------------------------------------------------


def write_detections(path, frames, times) -> None:
    rows = []
    for t, frame in zip(times, frames):
        for d in frame:
            rows.append([d.t, d.sensor, d.label, d.confidence, *d.center, *d.extent, d.heading, d.truth_id])
    write_lines(path, "detections", rows)


def read_detections(path, times) -> list[list[SyntheticDetection]]:
    """Detections grouped into frames at ``times`` (matched by timestamp)."""
    index = {fmt(float(t)): i for i, t in enumerate(times)}
    frames = [[] for _ in times]
    for r in read_rows(path, "detections"):
        if len(r) != 12:
            raise FormatError(f"{path}: detection record needs 12 fields")
        det = SyntheticDetection(float(r[0]), r[1], r[2], float(r[3]), np.array(r[4:7], float),
                                 np.array(r[7:10], float), _opt(r[10]), int(r[11]))
        key = fmt(det.t)
        if key not in index:
            raise FormatError(f"{path}: detection time {key} is not a frame time")
        frames[index[key]].append(det)
    return frames


def write_counts(path, counts: CountSeries) -> None:
    rows = []
    for i in range(counts.n_bins):
        for d in range(counts.roi.shape[0]):
            rows.append([d, counts.t0[i], counts.dt, int(counts.roi[d, i]), *counts.spectra[d, i].tolist()])
    write_lines(path, "counts", rows)


def read_counts(path, isotope: str = "cs137") -> CountSeries:
    rows = read_rows(path, "counts")
    if not rows:
        raise FormatError(f"{path}: no count records")
    det = np.array([int(r[0]) for r in rows])
    nd = det.max() + 1
    t0 = np.array([float(r[1]) for r in rows])[det == 0]
    dt = float(rows[0][2])
    roi = np.array([int(r[3]) for r in rows]).reshape(len(t0), nd).T
    spectra = np.array([[int(v) for v in r[4:]] for r in rows]).reshape(len(t0), nd, -1).transpose(1, 0, 2)
    check = spectra[..., get_roi(isotope).channels].sum(-1)
    if not np.array_equal(check, roi):
        raise FormatError(f"{path}: ROI counts disagree with the spectra")
    return CountSeries(t0, dt, roi, spectra, isotope)


def write_pose(path, poses: PoseSeries) -> None:
    rows = [[p.t, *p.position, p.yaw, p.pitch, p.roll, p.mode] for p in poses]
    write_lines(path, "pose", rows)


def read_pose(path) -> PoseSeries:
    rows = read_rows(path, "pose")
    if not rows:
        raise FormatError(f"{path}: no pose records")
    a = np.array([[float(v) for v in r[:7]] for r in rows])
    return PoseSeries(a[:, 0], a[:, 1:4], a[:, 4], rows[0][7], a[:, 5], a[:, 6])


def write_truth(path, truth, times) -> None:
    rows = []
    ppos, _, pyaw = truth.platform.state(times)
    for k, t in enumerate(times):
        rows.append([t, 0, "platform", *ppos[k], pyaw[k]])
    for oid, obj in sorted(truth.objects.items()):
        pos, _, hd = obj.state(times)
        for k, t in enumerate(times):
            rows.append([t, oid, obj.label, *pos[k], hd[k]])
    write_lines(path, "truth", rows)


# -- tracks ------------------------------------------------------------------------


@dataclass
class LoggedTrack:
    """A track rebuilt from its log: enough for attribution and windowing."""

    id: int
    label: str
    history: list
    truth_id: int = NONE_ID

    def majority_truth(self) -> int:
        return self.truth_id


def write_tracks(path, tracks) -> None:
    rows = []
    for trk in sorted(tracks, key=lambda k: k.id):
        truth = trk.majority_truth()
        n = 0
        for t, pos, cov, vel, heading, updated in trk.history:
            n += int(updated)
            rows.append([t, trk.id, trk.label, *pos, *vel, n, *np.diag(cov), heading, bool(updated), truth])
    write_lines(path, "tracks", rows)


def read_tracks(path) -> list[LoggedTrack]:
    tracks: dict[int, LoggedTrack] = {}
    for r in read_rows(path, "tracks"):
        if len(r) != 16:
            raise FormatError(f"{path}: track record needs 16 fields")
        tid = int(r[1])
        v = [float(x) for x in r[3:13]]
        entry = (float(r[0]), np.array(v[0:3]), np.diag(v[7:10]), np.array(v[3:6]), _opt(r[13]), r[14] == "1")
        trk = tracks.setdefault(tid, LoggedTrack(tid, r[2], [], int(r[15])))
        trk.history.append(entry)
    return [tracks[k] for k in sorted(tracks)]


def as_logged(track) -> LoggedTrack:
    """Reduce a live track to what its log preserves (diagonal covariance)."""
    hist = [(t, p.copy(), np.diag(np.diag(c)), v.copy(), h, u) for t, p, c, v, h, u in track.history]
    return LoggedTrack(track.id, track.label, hist, track.majority_truth())


# -- alarms, background, reports -------------------------------------------------------


def write_alarms(path, events) -> None:
    write_lines(path, "alarms", [[e.detector, e.start, e.stop, e.isotope, e.peak_value] for e in events])


def read_alarms(path) -> list[AlarmEvent]:
    return [AlarmEvent(int(r[0]), float(r[1]), float(r[2]), r[3], float(r[4])) for r in read_rows(path, "alarms")]


def write_background(path, bg: BackgroundModel, threshold: float, window: float) -> None:
    rows = [[d, threshold, window, *bg.spectrum_rate[d]] for d in range(bg.spectrum_rate.shape[0])]
    write_lines(path, "background", rows)


def read_background(path, isotope: str = "cs137"):
    rows = read_rows(path, "background")
    if not rows:
        raise FormatError(f"{path}: empty background file")
    rate = np.array([[float(v) for v in r[3:]] for r in rows])
    return BackgroundModel(rate, get_roi(isotope)), float(rows[0][1]), float(rows[0][2])


def adjudication_rows(enc_id: int, report, truth_of: dict) -> list[list]:
    rows = []
    for f in report.fits:
        rows.append([enc_id, report.start, report.stop, f.track_id, f.label, truth_of.get(f.track_id, NONE_ID),
                     f.S, f.p, f.offset, f.offset_m, f.alpha, f.se_alpha, f.background_preferred,
                     f.outside_alarm_frac, report.attributed == f.track_id])
    return rows


def read_adjudication(path) -> list[dict]:
    out = []
    for r in read_rows(path, "adjudication"):
        out.append(dict(encounter=int(r[0]), start=float(r[1]), stop=float(r[2]), track_id=int(r[3]), label=r[4],
                        truth_id=int(r[5]), S=float(r[6]), p=float(r[7]), offset=float(r[8]),
                        offset_m=float(r[9]), alpha=float(r[10]), se_alpha=float(r[11]),
                        background_preferred=r[12] == "1", outside_alarm_frac=float(r[13]), attributed=r[14] == "1"))
    return out


def comparison_rows(enc_id: int, rows) -> list[list]:
    return [[enc_id, r.method, r.anomaly_value, r.duration_s, ",".join(str(d) for d in r.detectors_used) or "-"]
            for r in rows]


def read_comparison(path) -> list[dict]:
    return [dict(encounter=int(r[0]), method=r[1], anomaly_value=float(r[2]), duration_s=float(r[3]),
                 detectors_used=r[4]) for r in read_rows(path, "comparison")]


# -- checksums -----------------------------------------------------------------------

INDEX_NAME = "index.sha256"


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_index(run_dir) -> None:
    """Checksum every regular file in ``run_dir`` except the index itself."""
    run_dir = Path(run_dir)
    files = sorted(p for p in run_dir.iterdir() if p.is_file() and p.name != INDEX_NAME)
    (run_dir / INDEX_NAME).write_text("".join(f"{sha256(p)}  {p.name}\n" for p in files))


