import numpy as np
import pytest

from histsde.core import RngStream, TimeRescaling
from histsde.errors import InputError
from histsde.npsde import (
    NpsdeConfig,
    NpsdeModel,
    ParamLayout,
    SqExpKernel,
    build_schedule,
    fit_npsde,
    gp_interp_diffusion,
    gp_interp_drift,
    inducing_grid,
    mc_loglik,
    model_to_theta,
    objective,
    sensitivity_step,
    theta_to_model,
)
from histsde.statespace import LatentPanel


def small_model(d=1, M=5, seed=0, R=0.05):
    Z = inducing_grid(np.array([[-2.0] * d, [2.0] * d]), M)
    r = RngStream(seed)
    U_F = r.standard_normal((len(Z), d))
    U_b = 0.8 + 0.2 * r.uniform(len(Z))
    return NpsdeModel(Z, U_F, U_b, SqExpKernel(1.0, (1.0,) * d), SqExpKernel(0.5, (1.5,) * d), [R] * d)


def random_panel(d=1, n_units=6, n_obs=6, seed=1):
    data = {}
    for u in range(n_units):
        r = RngStream(seed, u)
        t = np.cumsum(np.r_[0.0, 0.2 + 0.6 * r.uniform(n_obs - 1)])
        data[f"u{u}"] = (t, r.standard_normal((n_obs, d)))
    return LatentPanel.from_arrays(data, TimeRescaling(1.0, 5))


def test_interpolation_identity():
    m = small_model()
    np.testing.assert_allclose(m.drift(m.Z), m.U_F, atol=1e-5)
    D = gp_interp_diffusion(m, m.Z)
    np.testing.assert_allclose(D[:, 0, 0], 0.5 * m.U_b**2, atol=1e-5)


def test_zero_values_and_far_field():
    m = small_model()
    zero = NpsdeModel(m.Z, np.zeros_like(m.U_F), m.U_b, m.kernel_F, m.kernel_b, m.R)
    assert np.all(gp_interp_drift(zero, np.linspace(-3, 3, 7)[:, None]) == 0)
    far = m.drift(np.array([[2.2 + 10.0]]))
    assert np.linalg.norm(far) < 1e-8 * np.linalg.norm(m.U_F)


def test_diffusion_isotropic():
    m = small_model(d=3, M=27)
    x = RngStream(2).standard_normal((500, 3))
    D = m.diffusion(x)
    off = D - np.eye(3) * D[:, :1, :1]
    assert np.all(off == 0)
    assert np.all(D[:, 0, 0] >= 0)


def test_noise_factor_matches_diffusion():
    m = small_model()
    x = np.linspace(-2, 2, 9)[:, None]
    g = m.noise_factor(x)
    np.testing.assert_allclose(g @ g, 2 * m.diffusion(x), rtol=1e-12)


def test_sensitivity_one_step_closed_form():
    m = small_model()
    lay = ParamLayout(m.M, 1, True)
    x0, h = np.array([0.3]), 0.05
    _, J = sensitivity_step(m, x0, np.zeros((1, lay.size)), h, np.zeros(1), lay)
    kK = m.kernel_F(x0[None], m.Z) @ m.field_F.Kinv
    np.testing.assert_allclose(J[0, lay.uF], kK[0] * h, rtol=1e-12)


def test_sensitivity_shape_error():
    m = small_model()
    with pytest.raises(InputError):
        sensitivity_step(m, np.zeros((2, 1)), np.zeros((2, 1, 3)), 0.1, np.zeros((2, 1)))


def test_zero_diffusion_sensitivity_is_euler_flow():
    m = small_model()
    lay = ParamLayout(m.M, 1, True)
    th = model_to_theta(m, lay)
    th[lay.ub] = 0.0
    noise = RngStream(4).standard_normal((20, 1))

    def flow(theta):
        mod = theta_to_model(theta, lay, m.Z)
        x, J = np.array([[0.4]]), np.zeros((1, 1, lay.size))
        for k in range(20):
            x, J = sensitivity_step(mod, x, J, 0.05, noise[k : k + 1], lay)
        return x[0, 0], J[0, 0]

    _, J = flow(th)
    for i in list(range(lay.uF.stop)) + list(range(lay.hF.start, lay.hF.stop)):
        e = np.zeros_like(th)
        e[i] = 1e-6
        fd = (flow(th + e)[0] - flow(th - e)[0]) / 2e-6
        assert J[i] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_full_gradient_matches_finite_differences():
    panel = random_panel(d=2)
    sched = build_schedule(panel)
    Z = inducing_grid(np.concatenate([s.y for s in sched.units]), 9)
    lay = ParamLayout(len(Z), 2, True)
    th = 0.3 * RngStream(5).standard_normal(lay.size)
    th[lay.ub] += 1.0
    _, g = objective(th, lay, Z, sched, 8, RngStream(3))
    f = lambda t: objective(t, lay, Z, sched, 8, RngStream(3), want_grad=False)[0]
    idx = RngStream(6).generator.choice(lay.size, 20, replace=False)
    for i in idx:
        e = np.zeros_like(th)
        e[i] = 1e-5
        fd = (-f(th + 2 * e) + 8 * f(th + e) - 8 * f(th - e) + f(th - 2 * e)) / 12e-5
        assert abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6) < 1e-4


def test_pinned_path_data_term():
    # zero amplitude, data generated by the model's own Euler flow
    m = small_model()
    m0 = NpsdeModel(m.Z, m.U_F, np.zeros(m.M), m.kernel_F, m.kernel_b, [0.01])
    t = np.array([0.0, 0.5, 1.0, 1.5])
    x = [np.array([0.7])]
    for _ in range(3):
        xi = x[-1]
        for _ in range(10):
            xi = xi + m0.drift(xi[None])[0] * 0.05
        x.append(xi)
    panel = LatentPanel.from_arrays({"a": (t, np.array(x))}, TimeRescaling(1.0, 10))
    data = mc_loglik(m0, panel, S=1, include_prior=False)
    assert data == pytest.approx(3 * -0.5 * np.log(2 * np.pi * 0.01), rel=1e-9)


def test_R_monotonicity():
    m = small_model(R=0.05)
    panel = random_panel()
    base = mc_loglik(m, panel, S=16, include_prior=False)
    bigger = NpsdeModel(m.Z, m.U_F, m.U_b, m.kernel_F, m.kernel_b, [0.5])
    assert mc_loglik(bigger, panel, S=16, include_prior=False) > base  # residuals here are large


def test_mc_loglik_stability():
    m = small_model(R=0.05)
    panel = random_panel(n_units=10)
    vals = [mc_loglik(m, panel, S=512, rng=RngStream(s)) for s in range(5)]
    assert np.std(vals) < 0.02 * abs(np.mean(vals))


def test_unit_order_invariance():
    m = small_model()
    panel = random_panel()
    a = mc_loglik(m, panel, S=16, rng=RngStream(7))
    panel.units = panel.units[::-1]
    b = mc_loglik(m, panel, S=16, rng=RngStream(7))
    assert abs(a - b) < 1e-10


def test_schedule_restart():
    t = np.array([0.0, 0.5, 1.0, 40.0, 40.5])
    panel = LatentPanel.from_arrays({"a": (t, np.zeros((5, 1)))}, TimeRescaling(1.0, 10))
    s = build_schedule(panel)
    assert s.dt_nominal == pytest.approx(0.05)
    u = s.units[0]
    assert u.restart.sum() == 1
    assert u.obs_at[np.flatnonzero(u.restart)[0]] == 2


def test_inducing_grid():
    Z = inducing_grid(np.array([[0.0, -1.0], [1.0, 1.0]]))
    assert Z.shape == (25, 2)
    np.testing.assert_allclose(Z.min(axis=0), [-0.1, -1.2])
    np.testing.assert_allclose(Z.max(axis=0), [1.1, 1.2])


def test_json_roundtrip():
    m = small_model(d=2, M=9)
    c = NpsdeModel.from_dict(m.to_dict())
    x = RngStream(0).standard_normal((4, 2))
    assert np.array_equal(m.drift(x), c.drift(x))
    assert np.array_equal(m.diffusion(x), c.diffusion(x))


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="finite-S log-mean-exp bias of the simulated likelihood favours wide path clouds: "
    "outward drift at the edges of the data and inflated amplitude (|F| 0.41, 0.25, 0.16 at S=32, 128, 512)",
)
def test_null_drift_fit():
    data = {}
    for u in range(100):
        r = RngStream(11, u)
        gaps = 0.2 + 0.6 * r.uniform(9)
        x = np.cumsum(np.r_[-1.5 + 3 * r.uniform(), np.sqrt(gaps) * r.standard_normal(9)])  # b = 1, F = 0
        data[f"u{u}"] = (np.r_[0.0, np.cumsum(gaps)], x[:, None])
    panel = LatentPanel.from_arrays(data, TimeRescaling(1.0, 10))
    m = fit_npsde(panel, NpsdeConfig(S=32, iterations=300, fit_R=False, R_init=0.01), seed=0)
    allx = np.concatenate([u.states for u in panel.units])
    g = np.linspace(np.quantile(allx, 0.05), np.quantile(allx, 0.95), 9)[:, None]
    assert np.max(np.abs(m.drift(g))) < 0.1
    np.testing.assert_allclose(m.amplitude(g), 1.0, rtol=0.15)
