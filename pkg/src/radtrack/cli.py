"""Command-line front end.

A run directory holds the scenario, the background calibration and one
``seed-NNNN`` directory per seed.  Each verb reads the files written by the
previous stage and fails with exit code 3 when they are missing::

    radtrack calibrate-background --scenario intersection-10mph --out run
    radtrack simulate --scenario intersection-10mph --seeds 0-9 --sensor lidar --pose-mode slam --out run
    radtrack track --out run
    radtrack adjudicate --out run
    radtrack optimize --out run
    radtrack report --out run
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import anomaly, attribution, io, pipeline, snr_window
from .mcmc import McmcConfig
from .scene import ScenarioError, dump_scenario, load_scenario

log = logging.getLogger("radtrack")

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
SCENARIO_FILE = "scenario.yaml"
BACKGROUND_FILE = "background.txt"
STREAMS = ("detections.txt", "pose.txt", "counts.txt", "truth.txt")


class MissingStage(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing {path}; run `radtrack {stage}` first")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("radtrack.presets").iterdir() if p.name.endswith(".yaml"))


def resolve_scenario(name: str):
    path = Path(name)
    if path.exists():
        return load_scenario(path)
    if name in preset_names():
        with resources.as_file(resources.files("radtrack.presets") / f"{name}.yaml") as p:
            return load_scenario(p)
    raise ScenarioError(f"scenario {name!r} is neither a file nor a preset ({', '.join(preset_names())})")


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            if int(b) < int(a):
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds or min(seeds) < 0:
        raise ValueError("seeds must be a non-empty list of non-negative integers")
    return sorted(set(seeds))


def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed-{seed:04d}"


def run_seeds(out: Path) -> list[int]:
    seeds = sorted(int(p.name[5:]) for p in out.glob("seed-*") if p.is_dir())
    if not seeds:
        raise MissingStage("simulate", out / "seed-*")
    return seeds


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStage(stage, path)
    return path


def run_scenario(out: Path, args=None):
    if args is not None and getattr(args, "scenario", None):
        return resolve_scenario(args.scenario)
    return load_scenario(require(out / SCENARIO_FILE, "simulate"))


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# -- stages ---------------------------------------------------------------------------


def cmd_calibrate_background(args) -> int:
    cfg = resolve_scenario(args.scenario)
    out = Path(args.out)
    bg, thr = pipeline.calibrate(cfg, args.threshold_far)
    io.write_background(out / BACKGROUND_FILE, bg, thr, pipeline.ALARM_WINDOW)
    print(f"threshold {thr:.6g} for {args.threshold_far:.6g} false alarms/s")
    return EXIT_OK


def _simulate_one(task):
    cfg, seed, sensor, pose_mode, out = task
    s = pipeline.simulate(cfg, seed, sensor, pose_mode)
    d = seed_dir(out, seed)
    d.mkdir(parents=True, exist_ok=True)
    io.write_detections(d / "detections.txt", s.frames, s.times)
    io.write_pose(d / "pose.txt", s.poses)
    io.write_counts(d / "counts.txt", s.counts)
    io.write_truth(d / "truth.txt", s.truth, s.times)
    io.write_index(d)
    return seed


def cmd_simulate(args) -> int:
    cfg = resolve_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_scenario(cfg, out / SCENARIO_FILE)
    seeds = parse_seeds(args.seeds)
    _map(_simulate_one, [(cfg, s, args.sensor, args.pose_mode, out) for s in seeds], args.jobs)
    print(f"simulated {len(seeds)} seed(s) into {out}")
    return EXIT_OK


def _frame_times(cfg):
    from .scene import _frame_times

    return _frame_times(cfg.sensors.detection_hz, cfg.duration)


def _track_one(task):
    out, seed = task
    cfg = run_scenario(out)
    d = seed_dir(out, seed)
    times = _frame_times(cfg)
    frames = io.read_detections(require(d / "detections.txt", "simulate"), times)
    poses = io.read_pose(require(d / "pose.txt", "simulate"))
    tracks = pipeline.track(frames, poses, times)
    io.write_tracks(d / "tracks.txt", tracks)
    io.write_index(d)
    return len(tracks)


def cmd_track(args) -> int:
    out = Path(args.out)
    run_scenario(out)
    seeds = run_seeds(out)
    n = _map(_track_one, [(out, s) for s in seeds], args.jobs)
    print(f"tracked {len(seeds)} seed(s), {sum(n)} confirmed tracks")
    return EXIT_OK


def _load_seed(out: Path, seed: int):
    d = seed_dir(out, seed)
    counts = io.read_counts(require(d / "counts.txt", "simulate"))
    poses = io.read_pose(require(d / "pose.txt", "simulate"))
    tracks = io.read_tracks(require(d / "tracks.txt", "track"))
    return d, counts, poses, tracks


def _adjudicate_one(task):
    out, seed = task
    cfg = run_scenario(out)
    bg, thr, window = io.read_background(require(out / BACKGROUND_FILE, "calibrate-background"))
    d, counts, poses, tracks = _load_seed(out, seed)
    response = pipeline.response_table(cfg.source.roi)
    profiles = pipeline.model_profiles(cfg)
    events, encounters = pipeline.adjudicate(counts, tracks, poses, bg, thr, response, profiles, window)
    io.write_alarms(d / "alarms.txt", events)
    truth_of = {t.id: t.majority_truth() for t in tracks}
    rows = []
    for e in encounters:
        if e.report is not None:
            rows += io.adjudication_rows(e.id, e.report, truth_of)
    io.write_lines(d / "adjudication.txt", "adjudication", rows)
    io.write_index(d)
    carrier = cfg.source.carrier
    t_ca = _closest_approach_from_truth(d, carrier)
    enc = pipeline.carrier_encounter(encounters, t_ca)
    others = [i for i in pipeline.moving_vehicles(cfg) if i != carrier]
    return pipeline.evaluate(enc, tracks, carrier, others).attributed, len(encounters)


def _closest_approach_from_truth(d: Path, object_id: int) -> float:
    rows = io.read_rows(require(d / "truth.txt", "simulate"), "truth")
    plat = {r[0]: np.array(r[3:5], float) for r in rows if r[1] == "0"}
    best = min(((np.linalg.norm(np.array(r[3:5], float) - plat[r[0]]), float(r[0]))
                for r in rows if r[1] == str(object_id)), default=(0.0, 0.0))
    return best[1]


def cmd_adjudicate(args) -> int:
    out = Path(args.out)
    run_scenario(out)
    require(out / BACKGROUND_FILE, "calibrate-background")
    seeds = run_seeds(out)
    for s in seeds:
        require(seed_dir(out, s) / "tracks.txt", "track")
    res = _map(_adjudicate_one, [(out, s) for s in seeds], args.jobs)
    ok = sum(1 for a, _ in res if a)
    lines = [f"seed {s} encounters {n} carrier_attributed {int(a)}" for s, (a, n) in zip(seeds, res)]
    lines.append(f"attributed {ok}/{len(seeds)}")
    (out / "adjudication-summary.txt").write_text("\n".join(lines) + "\n")
    print(lines[-1])
    return EXIT_OK


def _attributed_rows(d: Path) -> dict:
    rows = io.read_adjudication(require(d / "adjudication.txt", "adjudicate"))
    return {r["encounter"]: r for r in rows if r["attributed"]}, rows


def _encounter_spans(d: Path) -> dict:
    rows = io.read_adjudication(d / "adjudication.txt")
    return {r["encounter"]: (r["start"], r["stop"]) for r in rows}


def _optimize_one(task):
    out, seed, use_mcmc = task
    cfg = run_scenario(out)
    bg, _, _ = io.read_background(require(out / BACKGROUND_FILE, "calibrate-background"))
    d, counts, poses, tracks = _load_seed(out, seed)
    attributed, _ = _attributed_rows(d)
    spans = _encounter_spans(d)
    response = pipeline.response_table(cfg.source.roi)
    profiles = pipeline.model_profiles(cfg)
    rows = []
    for enc_id, row in sorted(attributed.items()):
        start, stop = spans[enc_id]
        w = attribution.make_window(counts, start, stop, tracks)
        trk = next(t for t in tracks if t.id == row["track_id"])
        res, model, fit = attribution.fit_track(trk, w, response, profiles, poses, offset=row["offset"])
        optimal = None
        if use_mcmc:
            optimal = snr_window.mcmc_refine(trk, w, response, profiles, poses, fit.alpha, fit.b,
                                             McmcConfig(seed=seed), offset=row["offset"]).window
        rows += io.comparison_rows(enc_id, snr_window.compare_windows(w, model, bg, optimal))
    io.write_lines(d / "comparison.txt", "comparison", rows)
    io.write_index(d)
    return rows


def cmd_optimize(args) -> int:
    out = Path(args.out)
    run_scenario(out)
    seeds = run_seeds(out)
    for s in seeds:
        require(seed_dir(out, s) / "adjudication.txt", "adjudicate")
    res = _map(_optimize_one, [(out, s, args.mcmc) for s in seeds], args.jobs)
    wins: dict[str, int] = {}
    n_enc = 0
    for rows in res:
        by_enc: dict = {}
        for r in rows:
            by_enc.setdefault(r[0], []).append(r)
        for enc_rows in by_enc.values():
            n_enc += 1
            best = max(enc_rows, key=lambda r: r[2])
            wins[best[1]] = wins.get(best[1], 0) + 1
    lines = [f"encounters {n_enc}"] + [f"wins {m} {wins.get(m, 0)}" for m in _method_names()]
    (out / "optimize-summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _method_names() -> list[str]:
    return ["optimal-config", "summed-array"] + [f"fixed-{L:g}s" for L in snr_window.FIXED_WINDOWS]


def cmd_report(args) -> int:
    from .report import build_report

    out = Path(args.out)
    n = build_report(out, out / "report")
    print(f"report written to {out / 'report'} ({n} encounter(s))")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radtrack", description="Track-informed radiation source attribution.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, scenario=False, seeds=False, modes=False, far=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--jobs", type=int, default=1, help="seeds processed concurrently")
        if scenario:
            sp.add_argument("--scenario", required=name != "track",
                            help="scenario file or preset name (" + ", ".join(preset_names()) + ")")
        if seeds:
            sp.add_argument("--seeds", default="0", help="e.g. 0-49 or 1,4,7")
        if modes:
            sp.add_argument("--sensor", choices=("video", "lidar"), default="lidar")
            sp.add_argument("--pose-mode", choices=("slam", "ins"), default="slam")
        if far:
            sp.add_argument("--threshold-far", type=float, default=pipeline.DEFAULT_FAR,
                            help="false alarms per second on background-only data")
        sp.set_defaults(func=fn)
        return sp

    add("calibrate-background", cmd_calibrate_background, "background spectra and alarm threshold",
        scenario=True, far=True)
    add("simulate", cmd_simulate, "synthesize detection, pose and count streams",
        scenario=True, seeds=True, modes=True)
    add("track", cmd_track, "run the multi-object tracker")
    add("adjudicate", cmd_adjudicate, "alarm detection and source attribution")
    opt = add("optimize", cmd_optimize, "compare integration windows for attributed tracks")
    opt.add_argument("--mcmc", action="store_true", help="refine the optimal configuration by trajectory sampling")
    add("report", cmd_report, "export plot-data CSV bundles")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except MissingStage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ScenarioError, io.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
