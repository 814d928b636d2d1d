import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radtrack.attribution import (
    MLEFit,
    TrackModel,
    adjudicate,
    bic_reject,
    deviance,
    fit_mle,
    fit_track,
    make_window,
    model_counts,
    offset_grid,
    offset_scan,
    outside_alarm_fraction,
    poisson_loglike,
    score,
)
from radtrack.io import LoggedTrack
from radtrack.response import MU_662, isotropic_profiles, lookup_eps, source_geometry
from radtrack.scene import (
    CountSeries,
    PoseSeries,
    generate_truth,
    intersection_scenario,
    synthesize_counts,
)
from radtrack import pipeline


def truth_track(obj, tid=None, times=None):
    """A perfect track following a ground-truth object."""
    t = obj.t if times is None else times
    pos, vel, hd = obj.state(t)
    hist = [(float(t[k]), pos[k], 0.01 * np.eye(3), vel[k], float(hd[k]), True) for k in range(len(t))]
    return LoggedTrack(obj.id if tid is None else tid, obj.label, hist, obj.id)


def truth_poses(truth):
    p = truth.platform
    return PoseSeries(p.t, p.position, p.yaw, "SLAM")


@pytest.fixture(scope="module")
def scene10():
    cfg = intersection_scenario(10)
    truth = generate_truth(cfg)
    profiles = isotropic_profiles(cfg.source.shielding_specs())
    t_ca = pipeline.closest_approach(truth, cfg.source.carrier)
    return cfg, truth, profiles, t_ca


def static_window(n_bins=40, dt=0.25):
    t0 = np.arange(n_bins) * dt
    roi = np.zeros((6, n_bins), int)
    spectra = np.zeros((6, n_bins, 128), int)
    return CountSeries(t0, dt, roi, spectra)


def static_poses(duration=20.0):
    t = np.arange(0.0, duration, 0.05)
    return PoseSeries(t, np.zeros((len(t), 3)), np.zeros(len(t)), "SLAM")


def static_track(pos, t_end=20.0, tid=1, label="car"):
    t = np.arange(0.0, t_end, 1 / 15)
    hist = [(float(tt), np.asarray(pos, float), 0.01 * np.eye(3), np.zeros(3), 0.0, True) for tt in t]
    return LoggedTrack(tid, label, hist)


# -- geometric factor -------------------------------------------------------------------


def test_stationary_track_constant_g(response, geometry):
    counts = static_window()
    trk = static_track([10.0, 0.0, geometry.elevation])
    w = make_window(counts, 3.0, 7.0, [trk], pad=3.0)
    m = model_counts(trk, response, {}, w, static_poses())
    assert np.allclose(m.g, m.g[:, :1], rtol=1e-12)
    r, az, el = source_geometry(np.array([[10.0, 0.0, geometry.elevation]]), np.zeros((1, 3)), np.zeros(1),
                                geometry)
    eps = lookup_eps(response, az[0], el[0], np.arange(6))
    expected = eps * np.exp(-MU_662["air"] * r[0]) / (4 * np.pi * r[0] ** 2)
    assert np.allclose(m.g[:, 0], expected, rtol=1e-12)


def test_passing_track_unimodal_at_closest_approach(response, scene10):
    cfg, truth, profiles, t_ca = scene10
    trk = truth_track(truth.objects[cfg.source.carrier])
    counts = synthesize_counts(truth, response, profiles["car"], cfg, 0)
    w = make_window(counts, t_ca - 3, t_ca + 3, [trk])
    m = model_counts(trk, response, profiles, w, truth_poses(truth))
    total = m.g.sum(axis=0)
    k = int(np.argmax(total))
    assert np.all(np.diff(total[:k + 1]) > 0)
    assert np.all(np.diff(total[k:]) < 0)
    assert abs(w.counts.centers[k] - t_ca) <= w.counts.dt


def test_track_outside_span_gives_zero(response):
    counts = static_window()
    trk = static_track([10.0, 0.0, 1.0], t_end=20.0)
    late = LoggedTrack(2, "car", [(h[0] + 100.0, *h[1:]) for h in trk.history])
    w = make_window(counts, 3.0, 7.0, [trk], pad=3.0)
    m = model_counts(late, response, {}, w, static_poses(200.0))
    assert np.all(m.g == 0.0)


# -- ML fit -----------------------------------------------------------------------------


def toy_model(rng, n=60):
    g = rng.uniform(0.5, 20.0, (6, n))
    return TrackModel(1, g, np.full(n, 0.25))


def test_noiseless_fit_recovers_parameters(rng):
    m = toy_model(rng)
    x = 2.0 * m.exposure + 3.0 * m.dt[None, :]
    fit = fit_mle(m, x)
    assert fit.alpha == pytest.approx(2.0, rel=1e-6)
    assert np.allclose(fit.b, 3.0, rtol=1e-6)


def test_zero_model_is_background_fit(rng):
    m = TrackModel(1, np.zeros((6, 40)), np.full(40, 0.25))
    x = rng.poisson(5.0, (6, 40))
    fit = fit_mle(m, x)
    assert fit.alpha == 0.0 and fit.degenerate
    assert np.allclose(fit.b, x.sum(axis=1) / 10.0)


def test_em_loglike_never_decreases(rng):
    m = toy_model(rng)
    x = rng.poisson(1.5 * m.exposure + 4.0 * m.dt[None, :])
    fit = fit_mle(m, x, keep_trace=True)
    assert np.all(np.diff(fit.trace) >= -1e-9 * abs(fit.trace[-1]))


def test_fit_preserves_nonnegativity(rng):
    m = toy_model(rng)
    x = rng.poisson(np.broadcast_to(3.0 * m.dt[None, :], m.g.shape))
    fit = fit_mle(m, x)
    assert fit.alpha >= 0 and np.all(fit.b >= 0)


def test_misaligned_counts_rejected(rng):
    with pytest.raises(ValueError):
        fit_mle(toy_model(rng), np.ones((6, 3)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_scale_equivariance(kappa, seed):
    rng = np.random.default_rng(seed)
    m = toy_model(rng)
    x = rng.poisson(1.0 * m.exposure + 4.0 * m.dt[None, :])
    a = fit_mle(m, x)
    scaled = TrackModel(1, kappa * m.g, m.dt)
    b = fit_mle(scaled, x)
    assert b.alpha * kappa == pytest.approx(a.alpha, rel=1e-6, abs=1e-9)
    la, lb = a.expected(m), b.expected(scaled)
    assert np.allclose(la, lb, rtol=1e-6)
    dof = x.size - 7
    assert score(deviance(x, la), dof)[1] == pytest.approx(score(deviance(x, lb), dof)[1], rel=1e-5, abs=1e-6)


# -- deviance and score -------------------------------------------------------------------


def test_deviance_examples():
    assert deviance([5.0, 2.0], [5.0, 2.0]) == 0.0
    assert deviance([4.0], [2.0]) == pytest.approx(1.545, abs=1e-3)
    assert deviance([1.0], [0.0]) == np.inf


def test_deviance_chi_square_limit():
    rng = np.random.default_rng(2)
    lam = np.full(2000, 50.0)
    d = deviance(rng.poisson(lam), lam)
    assert abs(d - 2000) < 3 * np.sqrt(2 * 2000)


def test_score_examples():
    assert score(0.0, 10) == (1.0, 0.0)
    p, s = score(100.0, 100)
    assert p == pytest.approx(0.481, abs=1e-3)
    assert s == pytest.approx(1.06, abs=1e-2)
    # reference tail value from a 50-digit regularised incomplete gamma evaluation
    p, s = score(300.0, 100)
    assert p == pytest.approx(7.4121008573e-22, rel=1e-8)
    assert s == pytest.approx(70.192535575, abs=1e-8)


def test_score_rejects_bad_dof():
    with pytest.raises(ValueError):
        score(1.0, 0)


def test_score_infinite_deviance():
    assert score(np.inf, 5) == (0.0, np.inf)


def test_s_ordering_matches_log_p_ordering():
    rng = np.random.default_rng(4)
    devs = rng.uniform(50, 400, 30)
    s = [score(d, 100)[1] for d in devs]
    from scipy import stats

    assert int(np.argmin(s)) == int(np.argmax(stats.chi2.logsf(devs, 100)))
    assert np.array_equal(np.argsort(s, kind="stable"), np.argsort(devs, kind="stable"))


# -- BIC ------------------------------------------------------------------------------------


def test_zero_alpha_prefers_background(rng):
    m = toy_model(rng)
    x = rng.poisson(np.broadcast_to(3.0 * m.dt[None, :], m.g.shape))
    b0 = x.sum(axis=1) / m.dt.sum()
    fit = MLEFit(0.0, b0, poisson_loglike(x, b0[:, None] * m.dt[None, :]), 1)
    pref, bic_s, bic_b = bic_reject(m, x, fit)
    assert pref and bic_b < bic_s


def test_background_only_counts_reject_track(response, scene10):
    cfg, truth, profiles, t_ca = scene10
    trk = truth_track(truth.objects[2])
    poses = truth_poses(truth)
    quiet = cfg.__class__(**{**cfg.__dict__, "source": cfg.source.__class__(carrier=1, activity=0.0)})
    quiet_truth = generate_truth(quiet)
    rejected = 0
    for seed in range(100):
        counts = synthesize_counts(quiet_truth, response, profiles["car"], quiet, seed)
        w = make_window(counts, t_ca - 2, t_ca + 2, [trk])
        res, _, _ = fit_track(trk, w, response, profiles, poses)
        rejected += res.background_preferred
    assert rejected >= 90


def test_strong_source_not_rejected(response, scene10):
    cfg, truth, profiles, t_ca = scene10
    trk = truth_track(truth.objects[1])
    counts = synthesize_counts(truth, response, profiles["car"], cfg, 1)
    w = make_window(counts, t_ca - 2, t_ca + 2, [trk])
    res, _, _ = fit_track(trk, w, response, profiles, truth_poses(truth))
    assert not res.background_preferred


# -- offset scan and adjudication ----------------------------------------------------------


def test_offset_grid():
    g = offset_grid()
    assert len(g) == 11 and g[0] == -0.5 and g[5] == 0.0 and g[-1] == 0.5


def noiseless_window(cfg, truth, profiles, response, t_ca, tracks):
    counts = synthesize_counts(truth, response, profiles["car"], cfg, 0)
    counts.roi = counts.expected.copy()
    return make_window(counts, t_ca - 2, t_ca + 2, tracks)


@pytest.mark.parametrize("src_offset,expected", [(0.0, 0.0), (-1.3, 0.3)])
def test_offset_scan_locates_source(response, scene10, src_offset, expected):
    cfg, truth, profiles, t_ca = scene10
    cfg2 = cfg.__class__(**{**cfg.__dict__, "source": cfg.source.__class__(
        **{**cfg.source.__dict__, "offset": src_offset})})
    truth2 = generate_truth(cfg2)
    trk = truth_track(truth2.objects[1])
    w = noiseless_window(cfg2, truth2, profiles, response, t_ca, [trk])
    best = offset_scan(trk, w, response, profiles, truth_poses(truth2))
    assert best.offset == pytest.approx(expected)
    assert best.offset_m == pytest.approx(expected * cfg.object(1).speed, rel=1e-6)


def test_offset_scan_tie_takes_first(response):
    counts = static_window()
    counts.roi = np.full((6, 40), 3)
    trk = static_track([10.0, 0.0, 1.0])
    w = make_window(counts, 3.0, 7.0, [trk], pad=3.0)
    best = offset_scan(trk, w, response, {}, static_poses())
    assert best.offset == -0.5


def test_adjudicate_ranks_carrier_first(response, scene10):
    cfg, truth, profiles, t_ca = scene10
    tracks = [truth_track(truth.objects[i]) for i in (1, 2, 4, 6)]
    counts = synthesize_counts(truth, response, profiles["car"], cfg, 3)
    w = make_window(counts, t_ca - 2, t_ca + 2, tracks)
    rep = adjudicate(w, response, profiles, truth_poses(truth))
    assert rep.attributed == 1
    assert rep.ranking[0] == 1
    s = [rep.fit(i).S for i in rep.ranking]
    assert s == sorted(s)


def test_far_stationary_track_flagged(response, scene10):
    cfg, truth, profiles, t_ca = scene10
    # a far object off the source bearing at closest approach
    far = static_track([60.0, 60.0, 0.75], t_end=cfg.duration, tid=9)
    flagged = 0
    for seed in range(20):
        counts = synthesize_counts(truth, response, profiles["car"], cfg, seed)
        w = make_window(counts, t_ca - 2, t_ca + 2, [far])
        flagged += offset_scan(far, w, response, profiles, truth_poses(truth)).flagged
    assert flagged >= 18


def test_adjudicate_requires_tracks():
    counts = static_window()
    w = make_window(counts, 3.0, 7.0, [], pad=3.0)
    with pytest.raises(ValueError):
        adjudicate(w, None, {}, static_poses())


def test_outside_alarm_fraction():
    counts = static_window()
    trk = static_track([10.0, 0.0, 1.0])
    w = make_window(counts, 3.0, 7.0, [trk], pad=3.0)
    frac = outside_alarm_fraction(trk, w)
    assert frac == pytest.approx(6.0 / 10.0, abs=0.02)
