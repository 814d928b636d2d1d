"""Plot-data export for a run directory.

Writes CSV files only; plotting is left to the reader:

* ``trajectories.csv``: truth and track positions per seed;
* ``overlay-seedNNNN-encK-detD.csv``: counts, best-fit model and background
  for the attributed track, one file per detector;
* ``scatter.csv``: one row per (seed, encounter, track) with S and flags;
* ``anomaly_bars.csv``: anomaly value per window method.

A run without any adjudicated encounter gets a ``NO_ENCOUNTERS`` marker.
"""

from __future__ import annotations

import csv
from pathlib import Path

from . import attribution, io, pipeline
from .scene import load_scenario

MARKER = "NO_ENCOUNTERS"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([io.fmt(v) if not isinstance(v, str) else v for v in r])


def build_report(run_dir, dest) -> int:
    """Export every seed of ``run_dir`` into ``dest``; returns the number of encounters."""
    run_dir, dest = Path(run_dir), Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for old in dest.glob("*"):
        if old.is_file():
            old.unlink()
    scen = run_dir / "scenario.yaml"
    cfg = load_scenario(scen) if scen.exists() else None
    seeds = sorted(int(p.name[5:]) for p in run_dir.glob("seed-*") if p.is_dir())
    traj, scatter, bars = [], [], []
    n_enc = 0
    for seed in seeds:
        d = run_dir / f"seed-{seed:04d}"
        if (d / "truth.txt").exists():
            for r in io.read_rows(d / "truth.txt", "truth"):
                traj.append([seed, "truth", int(r[1]), r[2], float(r[0]), float(r[3]), float(r[4])])
        tracks = io.read_tracks(d / "tracks.txt") if (d / "tracks.txt").exists() else []
        for trk in tracks:
            for h in trk.history:
                traj.append([seed, "track", trk.id, trk.label, h[0], float(h[1][0]), float(h[1][1])])
        if not (d / "adjudication.txt").exists():
            continue
        rows = io.read_adjudication(d / "adjudication.txt")
        n_enc += len({r["encounter"] for r in rows})
        for r in rows:
            flagged = r["background_preferred"] or r["outside_alarm_frac"] > attribution.OUTSIDE_ALARM_LIMIT
            scatter.append([seed, r["encounter"], r["track_id"], r["label"], r["truth_id"], r["S"],
                            r["offset"], r["offset_m"], flagged, r["attributed"]])
        if (d / "comparison.txt").exists():
            for r in io.read_comparison(d / "comparison.txt"):
                bars.append([seed, r["encounter"], r["method"], r["anomaly_value"], r["duration_s"],
                             r["detectors_used"]])
        if cfg is not None:
            _overlays(cfg, d, seed, rows, tracks, dest)
    _write_csv(dest / "trajectories.csv", ["seed", "kind", "id", "label", "t", "x", "y"], traj)
    _write_csv(dest / "scatter.csv", ["seed", "encounter", "track_id", "label", "truth_id", "S", "offset_s",
                                      "offset_m", "flagged", "attributed"], scatter)
    _write_csv(dest / "anomaly_bars.csv", ["seed", "encounter", "method", "anomaly_value", "duration_s",
                                           "detectors_used"], bars)
    if n_enc == 0:
        (dest / MARKER).write_text("no encounters\n")
    return n_enc


def _overlays(cfg, d: Path, seed: int, rows, tracks, dest: Path) -> None:
    counts = io.read_counts(d / "counts.txt")
    poses = io.read_pose(d / "pose.txt")
    response = pipeline.response_table(cfg.source.roi)
    profiles = pipeline.model_profiles(cfg)
    for r in rows:
        if not r["attributed"]:
            continue
        w = attribution.make_window(counts, r["start"], r["stop"], tracks)
        trk = next(t for t in tracks if t.id == r["track_id"])
        _, model, fit = attribution.fit_track(trk, w, response, profiles, poses, offset=r["offset"])
        lam = fit.expected(model)
        c = w.counts
        for det in range(c.roi.shape[0]):
            out = [[c.t0[i], c.dt, int(c.roi[det, i]), lam[det, i], fit.b[det] * c.dt] for i in range(c.n_bins)]
            _write_csv(dest / f"overlay-seed{seed:04d}-enc{r['encounter']}-det{det}.csv",
                       ["t0", "dt", "counts", "model", "background"], out)
