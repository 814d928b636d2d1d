import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_window
from radtrack import pipeline
from radtrack.anomaly import BackgroundModel, get_roi
from radtrack.attribution import TrackModel, make_window, model_counts
from radtrack.io import LoggedTrack
from radtrack.mcmc import McmcConfig
from radtrack.response import isotropic_profiles
from radtrack.scene import PoseSeries, generate_truth, intersection_scenario, synthesize_counts
from radtrack.snr_window import (
    OptimalWindow,
    SegmentSeries,
    best_subset,
    compare_windows,
    fixed_window,
    mcmc_refine,
    neg_log_like,
    optimize_array,
    optimize_array_weights,
    optimize_window,
    sensitivity,
    spectrum_for_window,
    summed_array_window,
)


def series(w, dt=1.0, det=0):
    w = np.asarray(w, float)
    return SegmentSeries(det, np.arange(len(w)), dt, w)


# -- sensitivity ---------------------------------------------------------------------


def test_sensitivity_examples():
    assert sensitivity(series([4.0]), [0]) == pytest.approx(4.0)
    assert sensitivity(series([3.0, 3.0]), [0, 1]) == pytest.approx(6 / np.sqrt(2))
    assert sensitivity(series([0.0, 0.0, 0.0]), [0, 2]) == 0.0
    assert sensitivity(series([1.0]), []) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=10), st.floats(0.01, 100.0))
def test_sensitivity_scale_equivariant(w, kappa):
    s = series(w)
    ow = optimize_window(s)
    scaled = series(np.asarray(w) * kappa)
    ow2 = optimize_window(scaled)
    assert ow2.value == pytest.approx(kappa * ow.value, rel=1e-9)
    assert np.array_equal(ow.selection[0], ow2.selection[0])


# -- optimiser -----------------------------------------------------------------------


def test_optimize_examples():
    ow = optimize_window(series([4.0, 1.0, 0.5]))
    assert list(ow.selection[0]) == [0] and ow.value == pytest.approx(4.0)
    assert sensitivity(series([4.0, 1.0, 0.5]), [0, 1]) == pytest.approx(3.536, abs=1e-3)
    assert sensitivity(series([4.0, 1.0, 0.5]), [0, 1, 2]) == pytest.approx(3.175, abs=1e-3)
    ow = optimize_window(series([3.0, 3.0, 0.1]))
    assert list(ow.selection[0]) == [0, 1] and ow.value == pytest.approx(4.243, abs=1e-3)


def test_equal_weights_take_everything():
    ow = optimize_window(series([2.0] * 7, dt=0.25))
    assert len(ow.selection[0]) == 7
    assert ow.value == pytest.approx(2.0 * np.sqrt(7 * 0.25))


def test_all_zero_weights_empty():
    ow = optimize_window(series([0.0] * 5))
    assert len(ow.selection[0]) == 0 and ow.value == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    w = rng.exponential(1.0, n) * (rng.random(n) < 0.8)
    if rng.random() < 0.3:
        w = np.round(w)  # encourage ties
    dt = rng.choice([0.25, 0.5, 1.0], n) if rng.random() < 0.5 else np.full(n, 0.25)
    T, val = best_subset(w, dt)
    T_ref, val_ref = brute_force_window(w, dt)
    assert T == T_ref
    assert val == pytest.approx(val_ref, rel=1e-12, abs=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_optimum_beats_contiguous_windows(seed):
    rng = np.random.default_rng(seed)
    s = series(rng.exponential(1.0, 16), dt=0.25)
    best = optimize_window(s).value
    for a in range(16):
        for b in range(a + 1, 17):
            assert sensitivity(s, range(a, b)) <= best * (1 + 1e-12)


def test_array_dominant_detector():
    w = np.array([[1.0, 2.0, 20.0, 20.0], [0.1, 0.2, 2.0, 2.0], [0.1, 0.2, 2.0, 2.0]])
    ow = optimize_array([series(w[d], det=d) for d in range(3)])
    assert list(ow.selection[0]) == [2, 3]
    assert len(ow.selection[1]) == 0 and len(ow.selection[2]) == 0
    flat_T, _ = brute_force_window(w.ravel(), np.ones(12))
    assert flat_T == (2, 3)


def test_array_identical_detectors():
    w = np.array([0.5, 3.0, 4.0, 1.0])
    ow = optimize_array([series(w, det=d) for d in range(3)])
    assert all(np.array_equal(ow.selection[0], ow.selection[d]) for d in range(3))
    assert ow.detectors_used == (0, 1, 2)


def test_array_weights_agrees_with_series(rng):
    g = rng.exponential(1.0, (6, 15))
    a = optimize_array_weights(g, 0.25)
    b = optimize_array([series(g[d], 0.25, d) for d in range(6)])
    assert a.value == pytest.approx(b.value)
    assert all(np.array_equal(a.selection[d], b.selection[d]) for d in range(6))


def test_array_requires_shared_grid():
    with pytest.raises(ValueError):
        optimize_array([series([1.0, 2.0]), series([1.0], det=1)])


def test_segment_validation():
    with pytest.raises(ValueError):
        series([-1.0])
    with pytest.raises(ValueError):
        SegmentSeries(0, [0.0], 0.0, [1.0])


# -- likelihood and spectra -----------------------------------------------------------


def test_neg_log_like_examples():
    assert neg_log_like([1.0], [1.0]) == pytest.approx(1.0)
    assert neg_log_like([2.0], [1.0]) == pytest.approx(1.0 + np.log(2.0))
    x = np.array([0.0, 3.0, 7.0])
    base = neg_log_like(x, np.maximum(x, 1e-300))
    for eps in (0.9, 1.1):
        assert neg_log_like(x, np.maximum(x * eps, 1e-300)) >= base


def test_neg_log_like_rejects_invalid():
    with pytest.raises(ValueError):
        neg_log_like([1.0], [0.0])
    with pytest.raises(ValueError):
        neg_log_like([1.0], [-1.0])


def test_spectrum_for_window_bookkeeping(rng):
    spectra = rng.poisson(2.0, (6, 10, 128))
    single = OptimalWindow({3: np.array([4])}, 1.0)
    assert np.array_equal(spectrum_for_window(spectra, single), spectra[3, 4])
    a = OptimalWindow({0: np.array([1, 2]), 5: np.array([0])}, 1.0)
    b = OptimalWindow({0: np.array([7]), 2: np.array([3, 4])}, 1.0)
    ab = OptimalWindow({0: np.array([1, 2, 7]), 2: np.array([3, 4]), 5: np.array([0])}, 1.0)
    assert np.array_equal(spectrum_for_window(spectra, a) + spectrum_for_window(spectra, b),
                          spectrum_for_window(spectra, ab))
    full = OptimalWindow({d: np.arange(10) for d in range(6)}, 1.0)
    assert np.array_equal(spectrum_for_window(spectra, full), spectra.sum(axis=(0, 1)))
    roi = get_roi("cs137").channels
    assert spectrum_for_window(spectra, a)[roi].sum() == spectra[0, [1, 2]][:, roi].sum() + spectra[5, 0, roi].sum()


# -- windows on a simulated encounter ---------------------------------------------------


@pytest.fixture(scope="module")
def encounter(response):
    cfg = intersection_scenario(10)
    truth = generate_truth(cfg)
    profiles = isotropic_profiles(cfg.source.shielding_specs())
    obj = truth.objects[1]
    pos, vel, hd = obj.state(obj.t)
    trk = LoggedTrack(1, "car", [(float(obj.t[k]), pos[k], 0.04 * np.eye(3), vel[k], float(hd[k]), True)
                                 for k in range(len(obj.t))], 1)
    poses = PoseSeries(truth.platform.t, truth.platform.position, truth.platform.yaw, "SLAM")
    counts = synthesize_counts(truth, response, profiles["car"], cfg, 0)
    t_ca = pipeline.closest_approach(truth, 1)
    w = make_window(counts, t_ca - 2, t_ca + 2, [trk])
    model = model_counts(trk, response, profiles, w, poses, offset=0.3)
    bg = BackgroundModel.from_rates(cfg.background.roi_rate, get_roi("cs137"))
    return cfg, trk, poses, w, model, bg, profiles


def test_compare_windows_rows(encounter):
    _, _, _, w, model, bg, _ = encounter
    rows = compare_windows(w, model, bg)
    assert [r.method for r in rows] == ["optimal-config", "summed-array", "fixed-1s", "fixed-2s",
                                        "fixed-3s", "fixed-4s"]
    assert [r.duration_s for r in rows[2:]] == [1.0, 2.0, 3.0, 4.0]
    assert all(r.anomaly_value >= 0 for r in rows)


def test_source_side_detectors_selected(encounter, geometry):
    cfg, _, _, w, model, _, _ = encounter
    ow = optimize_array_weights(model.g, w.counts.dt)
    used = ow.detectors_used
    # the carrier passes on the +y side of the platform
    assert all(geometry.normals[d, 1] > 0 for d in used)


def test_fixed_window_centred_on_peak(encounter):
    _, _, _, _, model, _, _ = encounter
    peak = int(np.argmax(model.g.sum(axis=0)))
    fw = fixed_window(model, 2.0)
    idx = fw.selection[0]
    assert len(idx) == 8 and idx[0] <= peak <= idx[-1]


def test_summed_window_same_bins_everywhere(encounter):
    _, _, _, w, model, _, _ = encounter
    sw = summed_array_window(model, w.counts.centers)
    assert all(np.array_equal(sw.selection[0], sw.selection[d]) for d in range(6))


def test_mcmc_degenerate_prior_matches_deterministic(encounter, response):
    _, trk, poses, w, model, _, profiles = encounter
    tight = LoggedTrack(trk.id, trk.label, [(h[0], h[1], 1e-16 * np.eye(3), *h[3:]) for h in trk.history])
    cfg = McmcConfig(walkers=200, iterations=30, burn_in=10, subset=50, seed=1)
    res = mcmc_refine(tight, w, response, profiles, poses, 5e7, np.full(6, 60.0), cfg, offset=0.3)
    from radtrack.snr_window import TrajectoryLikelihood, trajectory_prior

    prior = trajectory_prior(tight, w.counts.centers, 0.3)
    like = TrajectoryLikelihood(tight, w, response, profiles, poses, 5e7, np.full(6, 60.0), prior, offset=0.3)
    ref = optimize_array_weights(like.g(prior.mean.ravel())[0], w.counts.dt)
    assert all(np.array_equal(res.window.selection[d], ref.selection[d]) for d in range(6))
