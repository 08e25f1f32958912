import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import marginal_likelihood_by_integration, mp_kriging, reference_prior_q_form
from refprior.asymptotics import expansion_report, fit_tail_slope
from refprior.bayes import (
    QuadratureOptions,
    build_posterior_curve,
    evaluate_node,
    kriging_moments,
    log_integrated_likelihood,
    log_lik_constant,
    log_reference_prior,
    map_theta,
    precise_kriging_moments,
    precise_state,
    predict,
    prior_bracket_from_matrices,
    refined_log_normalizer,
    sample_conditional,
    trapezoid_log_normalizer,
)
from refprior.errors import DegenerateObservationError, InputError
from refprior.gp import DesignSet, RegressionBasis, build_model, correlation_state
from refprior.kernels import KernelSpec, eval_kernel, eval_kernel_dtheta

SE = KernelSpec.squared_exponential()
KERNELS = [
    SE,
    KernelSpec.rational_quadratic(0.5),
    KernelSpec.rational_quadratic(2.0),
    KernelSpec.matern(1.0),
    KernelSpec.matern(1.5),
    KernelSpec.matern(2.5),
]


def make(seed, n=5, r=1, basis="constant", kernel=SE):
    rng = np.random.default_rng(seed)
    d = DesignSet(rng.uniform(size=(n, r)))
    return build_model(d, RegressionBasis.from_keyword(basis, r), kernel), rng.standard_normal(n)


# --- reference prior ----------------------------------------------------------


def test_two_point_prior_closed_form():
    # n=2, p=0: bracket = 2 c'^2 / (1 - c^2)^2, so pi = sqrt(2) |c'| / (1 - c^2)
    m = build_model(DesignSet([[0.0], [0.8]]), RegressionBasis.none(), KernelSpec.matern(1.5))
    for theta in (0.1, 0.5, 2.0, 10.0):
        c = eval_kernel(m.kernel, 0.8, theta)
        dc = eval_kernel_dtheta(m.kernel, 0.8, theta)
        want = math.log(math.sqrt(2) * abs(dc) / (1 - c * c))
        assert log_reference_prior(m, correlation_state(m, theta)) == pytest.approx(want, rel=1e-12)


def test_prior_vanishes_when_derivative_is_sigma():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    S = A @ A.T + 4 * np.eye(4)
    assert prior_bracket_from_matrices(S, S) <= 1e-28
    assert prior_bracket_from_matrices(2.5 * S, S) <= 1e-26


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.label())
def test_prior_forms_against_dense_oracle(kernel):
    for seed in range(3):
        m, _ = make(seed, n=6, r=2, basis="linear", kernel=kernel)
        for theta in (0.1, 0.7, 3.0):
            s = correlation_state(m, theta)
            oracle = reference_prior_q_form(s.sigma, s.dsigma, m.H)
            assert log_reference_prior(m, s, "W") == pytest.approx(oracle, rel=1e-8, abs=1e-8)
            assert log_reference_prior(m, s, "Q") == pytest.approx(oracle, rel=1e-8, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), logt=st.floats(-2.0, 4.0), k=st.integers(0, len(KERNELS) - 1),
       basis=st.sampled_from(["none", "constant", "linear"]))
def test_property_prior_forms_agree(seed, logt, k, basis):
    m, _ = make(seed, n=6, r=2, basis=basis, kernel=KERNELS[k])
    s, _ = precise_state(m, m.design.max_distance() * 10.0 ** logt, full=True)
    lw = log_reference_prior(m, s, "W")
    lq = log_reference_prior(m, s, "Q")
    assert abs(math.expm1(lq - lw)) <= 1e-8


def test_prior_needs_two_residual_dimensions():
    m = build_model(DesignSet([[0.0], [1.0]]), RegressionBasis.constant(1), SE)
    with pytest.raises(InputError):
        log_reference_prior(m, correlation_state(m, 1.0))


def test_matern_prior_large_theta_slope():
    m, _ = make(7, n=6, r=2, basis="none", kernel=KernelSpec.matern(1.5))
    th = 1e3 * np.geomspace(1, 100, 11)
    lp = [evaluate_node(m, t).log_prior for t in th]
    assert fit_tail_slope(th, lp).slope <= -1 + 0.15


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.label())
def test_scale_equivariance(kernel):
    m, y = make(3, n=6, r=2, basis="linear", kernel=kernel)
    s = 7.5
    m2 = build_model(DesignSet(m.design.points * s), m.basis, kernel)
    for theta in (0.1, 1.0):
        a = evaluate_node(m, theta, y)
        b = evaluate_node(m2, theta * s, y)
        assert b.log_prior + math.log(theta * s) == pytest.approx(a.log_prior + math.log(theta), abs=1e-8)
        # the linear basis is rescaled too: |H'H| changes, so compare against an explicit correction
        corr = 0.5 * (m2.logdet_HtH() - m.logdet_HtH())
        assert b.log_lik + corr == pytest.approx(a.log_lik, abs=1e-8)


@pytest.mark.parametrize("kernel", [KernelSpec.rational_quadratic(v) for v in (0.5, 1.0, 2.0)], ids=lambda k: k.label())
def test_rq_prior_small_theta_slope(kernel):
    m, _ = make(11, n=6, r=2, kernel=kernel)
    th = np.geomspace(1e-4, 1e-2, 9)
    slope = fit_tail_slope(th, [evaluate_node(m, t).log_prior for t in th]).slope
    assert slope >= kernel.nu - 1 - 0.15


@pytest.mark.parametrize("kernel", [SE, KernelSpec.matern(1.0), KernelSpec.matern(2.5)], ids=lambda k: k.label())
def test_prior_vanishes_at_small_theta(kernel):
    m, _ = make(11, n=6, r=2, kernel=kernel)
    lo = evaluate_node(m, 1e-6).log_prior
    assert math.isfinite(lo)
    assert lo - evaluate_node(m, 1.0).log_prior < math.log(1e-3)


# --- integrated likelihood ----------------------------------------------------


def test_likelihood_identity_sigma_no_basis():
    m, y = make(0, n=5, basis="none")
    s = correlation_state(m, 1e-8)
    want = math.lgamma(2.5) - 2.5 * math.log(math.pi) - 2.5 * math.log(y @ y)
    assert log_integrated_likelihood(m, s, y) == pytest.approx(want, rel=1e-12)


def test_likelihood_two_points_constant_basis():
    # W'y = (y1 - y2)/sqrt 2, W'SW = 1 - c, |H'H| = 2: L = 2^{-1/2} / |W'y|, free of theta
    m = build_model(DesignSet([[0.0], [1.0]]), RegressionBasis.constant(1), SE)
    y = np.array([0.3, -1.1])
    wy = (y[0] - y[1]) / math.sqrt(2)
    for theta in (0.2, 1.0, 5.0):
        got = log_integrated_likelihood(m, correlation_state(m, theta), y)
        assert got == pytest.approx(-0.5 * math.log(2) - math.log(abs(wy)), rel=1e-12)


@pytest.mark.parametrize("basis", ["none", "constant", "linear"])
def test_likelihood_matches_numerical_marginalisation(basis):
    m, y = make(4, n=7, r=2, basis=basis, kernel=KernelSpec.matern(2.5))
    for theta in (0.2, 1.5):
        s = correlation_state(m, theta)
        got = log_integrated_likelihood(m, s, y)
        assert got == pytest.approx(marginal_likelihood_by_integration(s.sigma, m.H, y), abs=1e-9)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.label())
def test_likelihood_forms_agree(kernel):
    m, y = make(8, n=7, r=2, basis="linear", kernel=kernel)
    for theta in (0.05, 0.5, 5.0):
        s, _ = precise_state(m, theta * m.design.max_distance(), full=True)
        assert log_integrated_likelihood(m, s, y, "W") == pytest.approx(
            log_integrated_likelihood(m, s, y, "Q"), rel=1e-8)


def test_constant_observations_are_degenerate():
    m, _ = make(0, n=5)
    with pytest.raises(DegenerateObservationError):
        log_integrated_likelihood(m, correlation_state(m, 1.0), np.full(5, 2.0))


def test_likelihood_constant():
    assert log_lik_constant(4) == pytest.approx(math.log(1 / math.pi ** 2), rel=1e-14)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.label())
def test_likelihood_bounded_at_large_theta(kernel):
    m, y = make(12, n=6, r=2, kernel=kernel)
    th = m.design.max_distance() * np.geomspace(1e2, 1e5, 10)
    ll = [evaluate_node(m, t, y, 1e-8).log_lik for t in th]
    assert fit_tail_slope(th, ll).slope <= 0.05


# --- posterior curve -----------------------------------------------------------


def test_se_posterior_refinement_and_trapezoid():
    m, y = make(21, n=5, r=1, kernel=SE)
    curve = build_posterior_curve(m, y)
    z = curve.log_normalizer
    assert math.isfinite(z)
    assert curve.quadrature_diag["estimated_rel_error"] < 1e-6
    assert abs(math.expm1(refined_log_normalizer(m, y, curve) - z)) < 1e-6
    lo, hi = curve.quadrature_diag["bracket"]
    assert abs(math.expm1(trapezoid_log_normalizer(m, y, lo, hi, npts=2001) - z)) < 1e-4


@pytest.mark.slow
def test_se_posterior_trapezoid_ten_thousand_points():
    m, y = make(21, n=5, r=1, kernel=SE)
    curve = build_posterior_curve(m, y)
    lo, hi = curve.quadrature_diag["bracket"]
    assert abs(math.expm1(trapezoid_log_normalizer(m, y, lo, hi, npts=10_000) - curve.log_normalizer)) < 1e-4


def test_posterior_mass_is_one():
    m, y = make(22, n=6, r=2, kernel=KernelSpec.matern(2.5))
    curve = build_posterior_curve(m, y)
    d = curve.quadrature_diag
    total = curve.node_masses().sum() * math.exp(0) + d["left_closure_mass"] + d["right_closure_mass"]
    assert total == pytest.approx(1.0, rel=1e-5)
    assert np.all(np.diff(curve.theta_grid) > 0)


def test_matern_posterior_tail_slope():
    m, y = make(21, n=5, r=1, kernel=KernelSpec.matern(2.5))
    curve = build_posterior_curve(m, y)
    assert math.isfinite(curve.log_normalizer)
    rep = expansion_report(m)
    th = m.design.max_distance() * np.geomspace(1e2, 1e4, 13)
    lpost = [evaluate_node(m, t, y, 1e-8).log_post for t in th]
    assert fit_tail_slope(th, lpost).slope <= -(1 + rep.l) + 0.15


def test_forced_degenerate_curve_is_flagged():
    m, _ = make(0, n=5)
    curve = build_posterior_curve(m, np.ones(5), QuadratureOptions(force=True))
    assert curve.quadrature_diag["suspected_impropriety"]
    assert math.isinf(curve.log_normalizer)
    with pytest.raises(DegenerateObservationError):
        build_posterior_curve(m, np.ones(5))


def test_threads_do_not_change_the_curve():
    m, y = make(3, n=6, r=2, kernel=KernelSpec.rational_quadratic(1.0))
    a = build_posterior_curve(m, y)
    b = build_posterior_curve(m, y, QuadratureOptions(threads=3))
    assert np.array_equal(a.theta_grid, b.theta_grid)
    assert np.array_equal(a.log_post_unnorm, b.log_post_unnorm)
    assert a.log_normalizer == b.log_normalizer


# --- conditional draws -----------------------------------------------------------


def test_conditional_beta_mean_is_sample_mean_for_identity_sigma():
    m, y = make(5, n=6, basis="constant")
    s = correlation_state(m, 1e-8)
    rng = np.random.default_rng(0)
    betas = np.array([sample_conditional(m, s, y, rng).beta[0] for _ in range(20000)])
    # mean of the draws: y_bar, spread sigma2/n
    assert betas.mean() == pytest.approx(y.mean(), abs=4 * betas.std() / math.sqrt(len(betas)))


def test_conditional_sigma2_moment():
    m, y = make(6, n=8, r=2, basis="linear", kernel=KernelSpec.matern(1.5))
    s = correlation_state(m, 0.4)
    rng = np.random.default_rng(1)
    draws = np.array([sample_conditional(m, s, y, rng).sigma2 for _ in range(100_000)])
    shape = m.m / 2
    Si = np.linalg.inv(s.sigma)
    Q = np.eye(m.n) - m.H @ np.linalg.solve(m.H.T @ Si @ m.H, m.H.T @ Si)
    scale = y @ Si @ Q @ y / 2
    mean = scale / (shape - 1)
    se = draws.std() / math.sqrt(len(draws))
    assert abs(draws.mean() - mean) < 3 * se
    assert np.all(draws > 0)


def test_conditional_without_basis():
    m, y = make(6, n=5, basis="none")
    d = sample_conditional(m, correlation_state(m, 0.3), y, np.random.default_rng(2))
    assert d.beta.shape == (0,)
    assert d.sigma2 > 0


# --- MAP ---------------------------------------------------------------------------


def test_map_matches_grid_argmax():
    m, y = make(30, n=6, r=2, kernel=KernelSpec.matern(2.5))
    res = map_theta(m, y)
    assert not res.on_boundary
    lo, hi = res.bounds
    us = np.linspace(math.log(lo), math.log(hi), 161)
    vals = [evaluate_node(m, math.exp(u), y).log_post for u in us]
    cell = us[1] - us[0]
    assert abs(math.log(res.theta) - us[int(np.argmax(vals))]) <= cell
    assert res.theta_direct == pytest.approx(res.theta, rel=1e-6)


def test_map_scales_with_design():
    m, y = make(31, n=6, r=2, kernel=SE)
    a = map_theta(m, y)
    s = 3.0
    m2 = build_model(DesignSet(m.design.points * s), m.basis, SE)
    b = map_theta(m2, y)
    assert b.theta == pytest.approx(s * a.theta, rel=1e-6)


def test_map_flat_data_without_basis():
    m, _ = make(32, n=5, basis="none")
    res = map_theta(m, np.ones(5))
    assert math.isfinite(res.theta) and res.theta > 0


# --- prediction -----------------------------------------------------------------


def test_prediction_interpolates_design_points():
    m, y = make(40, n=5, r=1, kernel=SE)
    curve = build_posterior_curve(m, y)
    pred = predict(m, y, curve, m.design.points[[1, 3]])
    assert np.allclose(pred.mean, y[[1, 3]], rtol=0, atol=1e-12)
    assert np.all(pred.lo95 == pred.mean) and np.all(pred.hi95 == pred.mean)


def test_prediction_far_away_without_basis():
    m, y = make(41, n=5, r=1, basis="none", kernel=KernelSpec.matern(2.5))
    s = correlation_state(m, 0.3)
    mean, scale, dof = kriging_moments(m, s, y, [[1e4]])
    assert abs(mean[0]) < 1e-12
    # marginal level: scale^2 -> s / m, the conditional estimate of sigma^2
    Si = np.linalg.inv(s.sigma)
    assert scale[0] ** 2 == pytest.approx(y @ Si @ y / m.m, rel=1e-10)


@pytest.mark.parametrize("theta", [0.3, 5.0, 2e5])
@pytest.mark.parametrize("kernel", [SE, KernelSpec.matern(1.5)], ids=lambda k: k.label())
def test_kriging_moments_against_extended_precision(kernel, theta):
    rng = np.random.default_rng(43)
    d = DesignSet(rng.uniform(size=(6, 2)))
    m = build_model(d, RegressionBasis.constant(2), kernel)
    y = np.sin(3 * d.points[:, 0]) + d.points[:, 1]
    x = np.array([[0.5, 0.5], [0.1, 0.9]])
    mean, scale, dof = precise_kriging_moments(m, theta, y, x, rtol=1e-9)
    mu, v, s = mp_kriging(kernel, d.points, m.H, m.basis.evaluate(x), y, x, theta)
    assert np.allclose(mean, mu, rtol=0, atol=1e-8)
    assert np.allclose(scale, np.sqrt(s / m.m * v), rtol=1e-6)
    assert dof == m.m


def test_mixture_mean_near_map_kriging_mean():
    m, y = make(42, n=5, r=1, kernel=SE)
    curve = build_posterior_curve(m, y)
    x = np.array([[0.25], [0.6]])
    pred = predict(m, y, curve, x)
    star = map_theta(m, y).theta
    mu, _, _ = kriging_moments(m, correlation_state(m, star), y, x)
    assert np.all(np.abs(pred.mean - mu) <= pred.sd)
    assert np.all(pred.lo95 < pred.mean) and np.all(pred.mean < pred.hi95)
