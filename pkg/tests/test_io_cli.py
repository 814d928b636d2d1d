import shutil

import numpy as np
import pytest

from radtrack import io, pipeline
from radtrack.cli import main, parse_seeds, resolve_scenario
from radtrack.report import MARKER
from radtrack.scene import ScenarioError, dump_scenario, intersection_scenario

SEEDS = "0-1"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["calibrate-background", "--scenario", "intersection-10mph", "--out", str(out)]) == 0
    assert main(["simulate", "--scenario", "intersection-10mph", "--seeds", SEEDS, "--sensor", "lidar",
                 "--pose-mode", "slam", "--out", str(out)]) == 0
    assert main(["track", "--out", str(out)]) == 0
    assert main(["adjudicate", "--out", str(out)]) == 0
    assert main(["optimize", "--out", str(out)]) == 0
    assert main(["report", "--out", str(out)]) == 0
    return out


def seed_dir(run, s=0):
    return run / f"seed-{s:04d}"


# -- stream files ------------------------------------------------------------------------


def test_stream_files_and_index(run):
    d = seed_dir(run)
    for name in ("detections.txt", "pose.txt", "counts.txt", "truth.txt", "tracks.txt", "alarms.txt",
                 "adjudication.txt", "comparison.txt"):
        assert (d / name).exists(), name
    index = dict(line.split()[::-1] for line in (d / "index.sha256").read_text().splitlines())
    for name, digest in index.items():
        assert io.sha256(d / name) == digest
    assert (d / "detections.txt").read_text().splitlines()[1] == \
        "# t sensor label confidence cx cy cz ex ey ez heading truth_id"


def test_counts_round_trip(run):
    cfg = resolve_scenario("intersection-10mph")
    s = pipeline.simulate(cfg, 0, "lidar", "slam")
    c = io.read_counts(seed_dir(run) / "counts.txt")
    assert np.array_equal(c.roi, s.counts.roi)
    assert np.array_equal(c.spectra, s.counts.spectra)
    assert np.array_equal(c.t0, s.counts.t0)
    p = io.read_pose(seed_dir(run) / "pose.txt")
    assert np.array_equal(p.position, s.poses.position)
    assert np.array_equal(p.yaw, s.poses.yaw)


def test_tracks_round_trip(run, tmp_path):
    tracks = io.read_tracks(seed_dir(run) / "tracks.txt")
    io.write_tracks(tmp_path / "t.txt", tracks)
    assert (tmp_path / "t.txt").read_bytes() == (seed_dir(run) / "tracks.txt").read_bytes()


def test_counts_checked_on_read(run, tmp_path):
    lines = (seed_dir(run) / "counts.txt").read_text().splitlines()
    fields = lines[2].split()
    fields[3] = str(int(fields[3]) + 1)
    lines[2] = " ".join(fields)
    (tmp_path / "c.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(io.FormatError):
        io.read_counts(tmp_path / "c.txt")


def test_wrong_header_rejected(tmp_path):
    (tmp_path / "x.txt").write_text("# radtrack-pose v1\n")
    with pytest.raises(io.FormatError):
        io.read_counts(tmp_path / "x.txt")


# -- summaries and reports ---------------------------------------------------------------


def test_adjudication_summary(run):
    last = (run / "adjudication-summary.txt").read_text().splitlines()[-1]
    assert last.startswith("attributed ") and last.endswith("/2")


def test_comparison_has_six_methods(run):
    rows = io.read_comparison(seed_dir(run) / "comparison.txt")
    by_enc = {}
    for r in rows:
        by_enc.setdefault(r["encounter"], []).append(r["method"])
    assert by_enc
    for methods in by_enc.values():
        assert methods == ["optimal-config", "summed-array", "fixed-1s", "fixed-2s", "fixed-3s", "fixed-4s"]


def test_report_bundle(run):
    rep = run / "report"
    adj = sum(len(io.read_adjudication(seed_dir(run, s) / "adjudication.txt")) for s in (0, 1))
    scatter = (rep / "scatter.csv").read_text().splitlines()
    assert len(scatter) - 1 == adj
    overlays = sorted(rep.glob("overlay-seed0000-enc*-det*.csv"))
    n_attr = sum(r["attributed"] for r in io.read_adjudication(seed_dir(run) / "adjudication.txt"))
    assert len(overlays) == 6 * n_attr and n_attr >= 1
    assert (rep / "trajectories.csv").exists() and (rep / "anomaly_bars.csv").exists()
    assert not (rep / MARKER).exists()


def test_empty_run_gets_marker(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report" / MARKER).exists()


# -- exit codes and determinism ------------------------------------------------------------


def test_missing_stage_exit_code(tmp_path):
    assert main(["track", "--out", str(tmp_path)]) == 3
    assert main(["adjudicate", "--out", str(tmp_path)]) == 3


def test_missing_background_exit_code(run, tmp_path):
    dest = tmp_path / "copy"
    shutil.copytree(run, dest)
    (dest / "background.txt").unlink()
    assert main(["adjudicate", "--out", str(dest)]) == 3


def test_validation_exit_code(tmp_path):
    cfg = intersection_scenario(10)
    text = dump_scenario(cfg).replace("speed: 4.4704", "speed: -1", 1)
    (tmp_path / "bad.yaml").write_text(text)
    assert main(["simulate", "--scenario", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--scenario", "no-such-preset", "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--scenario", "intersection-10mph", "--seeds", "5-2",
                 "--out", str(tmp_path / "o")]) == 2


def test_parse_seeds():
    assert parse_seeds("0-3,7") == [0, 1, 2, 3, 7]
    assert parse_seeds("4,1,4") == [1, 4]
    with pytest.raises(ValueError):
        parse_seeds("")


def test_presets_resolve():
    assert resolve_scenario("intersection-10mph").name == "intersection-10mph"
    assert resolve_scenario("intersection-20mph").object(1).speed == pytest.approx(2 * 4.4704)
    with pytest.raises(ScenarioError):
        resolve_scenario("nope")


def test_stage_rerun_byte_identical(run, tmp_path):
    dest = tmp_path / "again"
    shutil.copytree(run, dest)
    before = {p.relative_to(dest): p.read_bytes() for p in dest.rglob("*.txt")}
    for verb in ("track", "adjudicate", "optimize"):
        assert main([verb, "--out", str(dest)]) == 0
    after = {p.relative_to(dest): p.read_bytes() for p in dest.rglob("*.txt")}
    assert before == after
