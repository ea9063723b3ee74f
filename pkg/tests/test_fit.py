import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvarrays.fit import CurveModel, FitError, FitOptions, Model, bootstrap_errors, least_squares, numerical_jacobian


def _line_problem(seed=0, n=25, sigma=0.2):
    x = np.linspace(0, 5, n)
    y = 1.5 + 0.8 * x + np.random.default_rng(seed).normal(0, sigma, n)
    return CurveModel(lambda x, p: p[0] + p[1] * x, x, y, sigma,
                      lambda x, p: np.column_stack([np.ones_like(x), x]))


def _exp_model(seed=0):
    x = np.linspace(0, 3, 30)
    y = 2.0 * np.exp(-1.3 * x) + np.random.default_rng(seed).normal(0, 0.01, x.size)
    return CurveModel(lambda x, p: p[0] * np.exp(-p[1] * x), x, y, 0.01,
                      lambda x, p: np.column_stack([np.exp(-p[1] * x), -p[0] * x * np.exp(-p[1] * x)]))


def test_linear_fit_matches_weighted_normal_equations():
    m = _line_problem()
    out = least_squares(m.as_model(2), [0.0, 0.0])
    X = np.column_stack([np.ones_like(m.x), m.x]) / m.sigma[:, None]
    beta, res, *_ = np.linalg.lstsq(X, m.y / m.sigma, rcond=None)
    np.testing.assert_allclose(out.params, beta, rtol=1e-10)
    assert out.iterations <= 2 and out.converged
    chi2_red = float(res[0]) / (len(m.x) - 2)
    np.testing.assert_allclose(out.covariance, np.linalg.inv(X.T @ X) * chi2_red, rtol=1e-8)


def test_unscaled_covariance_option():
    m = _line_problem()
    out = least_squares(m.as_model(2), [0.0, 0.0], FitOptions(scale_covariance=False))
    X = np.column_stack([np.ones_like(m.x), m.x]) / m.sigma[:, None]
    np.testing.assert_allclose(out.covariance, np.linalg.inv(X.T @ X), rtol=1e-8)


def test_numerical_jacobian_matches_analytic():
    m = _exp_model().as_model(2)
    p = np.array([1.7, 0.9])
    np.testing.assert_allclose(numerical_jacobian(m.r, p), m.jac(p), rtol=1e-6, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(a0=st.floats(0.2, 6.0), k0=st.floats(0.2, 4.0))
def test_accepted_steps_never_increase_the_objective(a0, k0):
    out = least_squares(_exp_model().as_model(2), [a0, k0])
    assert np.all(np.diff(out.cost_history) <= 0)
    assert out.converged
    np.testing.assert_allclose(out.params, [2.0, 1.3], rtol=0.02)


def test_fd_jacobian_path_converges_like_analytic():
    m = _exp_model()
    analytic = least_squares(m.as_model(2), [1.0, 1.0])
    no_jac = CurveModel(m.func, m.x, m.y, m.sigma)
    fd = least_squares(no_jac.as_model(2), [1.0, 1.0])
    np.testing.assert_allclose(fd.params, analytic.params, rtol=1e-6)


def test_rosenbrock_valley():
    model = Model(lambda p, _: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), 2)
    out = least_squares(model, [-1.2, 1.0])
    np.testing.assert_allclose(out.params, [1.0, 1.0], atol=1e-6)


def test_fit_errors_on_bad_start():
    m = _exp_model().as_model(2)
    with pytest.raises(FitError):
        least_squares(m, [np.nan, 1.0])
    with pytest.raises(FitError):
        least_squares(m, [1.0, 1.0, 1.0])
    with pytest.raises(FitError):
        least_squares(Model(lambda p, _: np.array([np.inf, 1.0]), 1), [0.0])


def test_curve_model_rejects_non_positive_sigma():
    with pytest.raises(ValueError):
        CurveModel(lambda x, p: x, np.zeros(3), np.zeros(3), [1.0, 0.0, 1.0])


def test_max_iterations_reported():
    out = least_squares(_exp_model().as_model(2), [0.1, 5.0], FitOptions(max_iterations=1))
    assert not out.converged and out.message == "maximum iterations reached"


def test_bootstrap_agrees_with_covariance_on_linear_model():
    m = _line_problem(seed=3, n=60)
    out = least_squares(m.as_model(2), [0.0, 0.0])
    boot = bootstrap_errors(m, out, 400, np.random.default_rng(5))
    assert not boot.flagged and boot.n_failed == 0
    np.testing.assert_allclose(boot.std, out.stderr, rtol=0.15)


def test_bootstrap_preconditions():
    m = _line_problem()
    out = least_squares(m.as_model(2), [0.0, 0.0])
    with pytest.raises(ValueError):
        bootstrap_errors(m, out, 50, np.random.default_rng(0))
    unconverged = least_squares(_exp_model().as_model(2), [0.1, 5.0], FitOptions(max_iterations=1))
    with pytest.raises(ValueError):
        bootstrap_errors(_exp_model(), unconverged, 100, np.random.default_rng(0))
