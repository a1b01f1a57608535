import numpy as np
import pytest

from histsde.core import RngStream
from histsde.errors import DegenerateKdeError, InputError
from histsde.likelihood import (
    ONE_STEP,
    TransitionMethod,
    path_logprob,
    transition_logdensity,
)
from histsde.simulate import FunctionSde, LinearSde


def ou_exact_logpdf(x_from, x_to, dt, theta=1.0, D=0.5):
    mean = x_from * np.exp(-theta * dt)
    var = D / theta * (1 - np.exp(-2 * theta * dt))
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (x_to - mean) ** 2 / var


def test_one_step_normalization_value():
    model = LinearSde.constant([0.0], 0.5)
    v = transition_logdensity(model, [0.3], [0.3], 1.0, ONE_STEP)
    assert v == pytest.approx(-0.91893853, abs=1e-8)


def test_one_step_mode():
    model = LinearSde.constant([0.7], 0.2)
    x0 = np.array([0.1])
    mode = transition_logdensity(model, x0, x0 + 0.7 * 0.5, 0.5, ONE_STEP)
    for dx in np.linspace(-1, 1, 21):
        if abs(dx - 0.35) > 1e-9:
            assert transition_logdensity(model, x0, x0 + dx, 0.5, ONE_STEP) < mode


def test_composed_matches_exact_ou():
    model = LinearSde.ou()
    method = TransitionMethod("composed_gaussian", n_sub=100)
    sd = np.sqrt(0.5 * (1 - np.exp(-2.0)))
    # starts in the stationary bulk, endpoints within 2 sd of the exact mean
    for x0 in (-1.5, 0.0, 0.8, 1.5):
        for x1 in x0 * np.exp(-1.0) + sd * np.linspace(-2, 2, 9):
            got = transition_logdensity(model, [x0], [x1], 1.0, method)
            assert abs(got - ou_exact_logpdf(x0, x1, 1.0)) < 0.02


def test_composed_with_one_substep_equals_one_step():
    model = LinearSde.ou(dim=2)
    m1 = TransitionMethod("composed_gaussian", n_sub=1)
    a = transition_logdensity(model, [0.2, -0.4], [0.1, 0.3], 0.3, m1)
    b = transition_logdensity(model, [0.2, -0.4], [0.1, 0.3], 0.3, ONE_STEP)
    assert a == pytest.approx(b, abs=1e-12)


def test_kde_converges_to_composed():
    model = LinearSde.ou()
    kde = TransitionMethod("simulated_kde", n_sub=20, S=100_000, seed=3)
    comp = TransitionMethod("composed_gaussian", n_sub=20)
    for x1 in (-0.5, 0.3, 1.0):
        a = transition_logdensity(model, [1.0], [x1], 1.0, kde)
        b = transition_logdensity(model, [1.0], [x1], 1.0, comp)
        assert abs(a - b) < 0.05


def test_kde_degenerate():
    frozen = FunctionSde(lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape + (1,)), 1)
    frozen.noise_factor = lambda x: np.zeros(np.shape(x) + (1,))
    with pytest.raises(DegenerateKdeError):
        transition_logdensity(frozen, [0.0], [0.0], 1.0, TransitionMethod("simulated_kde", S=200))


def test_sign_flip_invariance_ou():
    model = LinearSde.ou()
    for method in (ONE_STEP, TransitionMethod("composed_gaussian", n_sub=7)):
        a = transition_logdensity(model, [0.4], [-0.9], 0.6, method)
        b = transition_logdensity(model, [-0.4], [0.9], 0.6, method)
        assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.parametrize(
    "method",
    [ONE_STEP, TransitionMethod("composed_gaussian", n_sub=25), TransitionMethod("simulated_kde", n_sub=5, S=2000)],
    ids=lambda m: m.variant,
)
def test_density_normalizes(method):
    model = LinearSde.ou()
    grid = np.linspace(-6, 6, 2401)
    dens = np.exp(transition_logdensity(model, np.array([[0.7]]), grid[:, None], 0.8, method, RngStream(1)))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, rel=0.01)


def test_path_logprob_two_points():
    model = LinearSde.ou()
    a = path_logprob(model, [[0.1], [0.5]], [0.0, 0.2], ONE_STEP)
    b = transition_logdensity(model, [0.1], [0.5], 0.2, ONE_STEP)
    assert a == pytest.approx(b)


def test_path_logprob_constant_drift_at_mode():
    F, D, dt, L = 0.6, 0.25, 0.1, 12
    model = LinearSde.constant([F], D)
    x = (F * dt * np.arange(L + 1))[:, None]
    t = dt * np.arange(L + 1)
    per_step = -0.5 * np.log(2 * np.pi * 2 * D * dt)
    assert path_logprob(model, x, t, ONE_STEP) == pytest.approx(L * per_step, rel=1e-12)


def test_path_logprob_errors():
    with pytest.raises(InputError):
        path_logprob(LinearSde.ou(), [[0.0]], [0.0])
    with pytest.raises(InputError):
        transition_logdensity(LinearSde.ou(), [0.0], [0.0], 0.0)
