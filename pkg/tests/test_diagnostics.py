import numpy as np
import pytest
from scipy import stats

from histsde.core import RngStream, TimeRescaling
from histsde.diagnostics import (
    diagnose,
    expected_surprisal,
    local_irreversibility,
    normalized_surprisal,
    path_irreversibility,
    pooled_acf,
    residual_acf,
    series_acf,
    surprisal,
    tail_probability,
)
from histsde.errors import DegenerateSeriesError, InsufficientDataError
from histsde.likelihood import ONE_STEP, TransitionMethod, path_logprob
from histsde.simulate import LinearSde, simulate_path
from histsde.statespace import LatentPanel

METHODS = [ONE_STEP, TransitionMethod("composed_gaussian", n_sub=5), TransitionMethod("simulated_kde", n_sub=3, S=500)]


def test_zero_drift_is_reversible():
    model = LinearSde.constant([0.0, 0.0], 0.3)
    for method in METHODS[:2]:
        assert local_irreversibility(model, [0.1, 0.2], [-0.5, 0.9], 0.4, method) == pytest.approx(0, abs=1e-12)


def test_constant_drift_closed_form():
    F, D, dt = 0.8, 0.3, 0.25
    model = LinearSde.constant([F], D)
    for dx in (-0.4, 0.0, 0.2, 1.3):
        got = local_irreversibility(model, [1.0], [1.0 + dx], dt, ONE_STEP)
        assert got == pytest.approx(F * dx / D, abs=1e-12)


@pytest.mark.parametrize("method", METHODS, ids=lambda m: m.variant)
def test_antisymmetry_exact(method):
    model = LinearSde([[-1.0, 0.5], [-0.5, -1.0]], 0.4 * np.eye(2))
    x, y = np.array([0.3, -0.2]), np.array([-0.1, 0.6])
    a = local_irreversibility(model, x, y, 0.5, method)
    b = local_irreversibility(model, y, x, 0.5, method)
    assert a == -b


def test_path_constant_drift_and_reversal():
    F, D, dt, L = 0.6, 0.25, 0.1, 15
    model = LinearSde.constant([F], D)
    x = (F * dt * np.arange(L + 1))[:, None]
    t = dt * np.arange(L + 1)
    Sigma, sigma = path_irreversibility(model, x, t, ONE_STEP)
    assert Sigma == pytest.approx(L * F**2 * dt / D, rel=1e-12)
    assert len(sigma) == L
    back, _ = path_irreversibility(model, x[::-1], t, ONE_STEP)
    assert back == -Sigma


def test_sigma_matches_path_logprob_difference():
    model = LinearSde([[-1.0, 0.8], [-0.8, -1.0]], 0.5 * np.eye(2))
    t, x = simulate_path(model, [1.0, 0.0], 3.0, TimeRescaling(0.1, 1), RngStream(2))
    method = TransitionMethod("composed_gaussian", n_sub=4)
    Sigma, _ = path_irreversibility(model, x, t, method)
    rev_t = t[-1] - t[::-1]
    diff = path_logprob(model, x, t, method) - path_logprob(model, x[::-1], rev_t, method)
    assert Sigma == pytest.approx(diff, abs=1e-9)


def test_rotational_drift_positive_on_average():
    model = LinearSde([[-0.5, 2.0], [-2.0, -0.5]], 0.2 * np.eye(2))
    t, x = simulate_path(model, [0.0, 0.0], 200.0, TimeRescaling(0.05, 1), RngStream(6))
    _, sigma = path_irreversibility(model, x, t, ONE_STEP)
    assert sigma.mean() > 3 * sigma.std(ddof=1) / np.sqrt(len(sigma))


def test_surprisal_mode_and_monotone():
    model = LinearSde.constant([0.4], 0.5)
    assert surprisal(model, [0.0], [0.4], 1.0, ONE_STEP) == pytest.approx(0.91893853, abs=1e-8)
    vals = [surprisal(model, [0.0], [0.4 + r], 1.0, ONE_STEP) for r in (0, 0.5, 1.0, 2.0)]
    assert np.all(np.diff(vals) > 0)


def test_expected_surprisal_closed_form():
    model = LinearSde.ou(D=0.5)
    assert expected_surprisal(model, [0.3], 1.0, ONE_STEP) == pytest.approx(1.41893853, abs=1e-8)
    model2 = LinearSde.ou(D=1.0, dim=2)
    model1 = LinearSde.ou(D=0.5, dim=2)
    gap = expected_surprisal(model2, [0, 0], 0.3, ONE_STEP) - expected_surprisal(model1, [0, 0], 0.3, ONE_STEP)
    assert gap == pytest.approx(2 * 0.5 * np.log(2), abs=1e-12)


def test_expected_surprisal_monte_carlo_consistent():
    model = LinearSde.ou()
    closed = expected_surprisal(model, [0.7], 0.5, ONE_STEP)
    # composed with one sub-step is the same Gaussian, estimated by simulation
    mc = expected_surprisal(model, [0.7], 0.5, TransitionMethod("composed_gaussian", n_sub=1), S=10_000, full=True)
    assert mc.S == 10_000
    assert abs(mc.value - closed) < 3 * mc.stderr


def test_normalized_surprisal_closed_form():
    F, D, dt = 0.3, 0.5, 1.0
    model = LinearSde.constant([F], D)
    assert normalized_surprisal(model, [0.0], [F * dt], dt, ONE_STEP) == pytest.approx(-0.5, abs=1e-12)
    sd = np.sqrt(2 * D * dt)
    assert normalized_surprisal(model, [0.0], [F * dt + 3 * sd], dt, ONE_STEP) == pytest.approx(4.0, abs=1e-12)


def test_tail_probability_extremes():
    model = LinearSde.ou()
    x0, dt = np.array([0.5]), 0.2
    mode = x0 - x0 * dt
    assert tail_probability(model, x0, mode, dt, ONE_STEP, S=10_000) > 0.99
    out = mode + 6 * np.sqrt(2 * 0.5 * dt)
    assert tail_probability(model, x0, out, dt, ONE_STEP, S=10_000) < 0.001


def test_tail_probability_uniform_under_model():
    model = LinearSde.ou()
    t, x = simulate_path(model, [0.0], 300.0, TimeRescaling(0.5, 1), RngStream(12))
    tails = [tail_probability(model, x[i], x[i + 1], 0.5, ONE_STEP, S=2000, rng=RngStream(1, i)) for i in range(600)]
    assert stats.kstest(tails, "uniform").pvalue > 0.01


def test_series_acf():
    with pytest.raises(DegenerateSeriesError):
        series_acf(np.ones(50))
    white = RngStream(3).standard_normal(10_000)
    acf = series_acf(white, 5)
    assert acf[0] == 1.0 and abs(acf[1]) < 0.02
    e = RngStream(4).standard_normal(20_000)
    ar = np.empty_like(e)
    ar[0] = e[0] / np.sqrt(1 - 0.81)
    for i in range(1, len(e)):
        ar[i] = 0.9 * ar[i - 1] + e[i]
    acf = series_acf(ar, 5)
    np.testing.assert_allclose(acf, 0.9 ** np.arange(6), atol=0.06)


def _ou_panel(n_units=20, n_obs=60, dt=0.2, seed=0):
    model = LinearSde.ou()
    data = {}
    for u in range(n_units):
        _, x = simulate_path(model, [0.0], dt * n_obs, TimeRescaling(dt, 2), RngStream(seed, u))
        data[f"u{u}"] = (np.arange(len(x), dtype=float), x)
    return model, LatentPanel.from_arrays(data, rescaling=TimeRescaling(dt, 2))


def test_residual_acf_model_data():
    model, panel = _ou_panel()
    res = residual_acf(model, panel, max_lag=20)
    assert res.acf[0, 0] == pytest.approx(1.0)
    assert res.n == 20 * 60
    assert res.markovian


def test_residual_acf_ar1_flagged():
    e = RngStream(7).standard_normal((30, 100, 1))
    r = np.empty_like(e)
    r[:, 0] = e[:, 0]
    for i in range(1, e.shape[1]):
        r[:, i] = 0.6 * r[:, i - 1] + np.sqrt(1 - 0.36) * e[:, i]
    res = pooled_acf(list(r), max_lag=20)
    assert res.acf[0, 1] == pytest.approx(0.6, abs=0.05)
    assert abs(res.acf[0, 1]) > res.band
    assert not res.markovian


def test_residual_acf_insufficient():
    model, panel = _ou_panel(n_units=1, n_obs=10)
    with pytest.raises(InsufficientDataError):
        residual_acf(model, panel, max_lag=20)


def test_diagnose_report():
    model, panel = _ou_panel(n_units=3, n_obs=8)
    rep = diagnose(model, panel, ONE_STEP, S=1000, seed=5)
    assert len(rep.records) == 24
    for uid, total in rep.unit_sigma.items():
        rows = [r for r in rep.records if r.unit_id == uid]
        assert total == pytest.approx(sum(r.sigma for r in rows), abs=1e-9)
        assert rows[-1].sigma_cum == total
    assert all(0 <= r.tail_prob <= 1 for r in rep.records)
    again = diagnose(model, panel, ONE_STEP, S=1000, seed=5)
    assert rep.to_csv("x") == again.to_csv("x")
    assert rep.summary()["n_transitions"] == 24


@pytest.mark.parametrize("method", METHODS[1:])
def test_diagnose_agrees_with_standalone_functions(method):
    model, panel = _ou_panel(n_units=2, n_obs=4)
    rep = diagnose(model, panel, method, S=1000, seed=2)
    for i, (_, _, dt, xf, xt) in enumerate(panel.transitions()):
        rng, r = RngStream(2).child(i), rep.records[i]
        assert r.sigma == pytest.approx(local_irreversibility(model, xf, xt, dt, method, rng), rel=1e-12, abs=1e-12)
        assert r.s == pytest.approx(surprisal(model, xf, xt, dt, method, rng), rel=1e-12)
        assert r.s_tilde == pytest.approx(normalized_surprisal(model, xf, xt, dt, method, 1000, rng), rel=1e-9, abs=1e-12)
        assert r.tail_prob == tail_probability(model, xf, xt, dt, method, 1000, rng)
