import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mp_fd_dtheta, mp_kernel
from refprior.errors import ParameterDomainError, UnsupportedKernelError
from refprior.kernels import (
    Family,
    KernelSpec,
    _mp_besselk,
    _mp_besselk_pair,
    bessel_knu,
    eval_kernel,
    eval_kernel_dtheta,
    kernel_and_derivative,
    log_companion_matrix,
    roughness_info,
    rq_coefficient_shifted,
    series_coefficients,
)

ALL_KERNELS = [
    KernelSpec.squared_exponential(),
    KernelSpec.power_exponential(0.7),
    KernelSpec.power_exponential(1.5),
    KernelSpec.rational_quadratic(0.5),
    KernelSpec.rational_quadratic(2.0),
    KernelSpec.matern(0.5),
    KernelSpec.matern(1.0),
    KernelSpec.matern(1.5),
    KernelSpec.matern(2.0),
    KernelSpec.matern(2.5),
    KernelSpec.matern(3.7),
    KernelSpec.matern(1.5, "BDOS"),
    KernelSpec.spherical(),
]


def fd_dtheta(spec, d, theta, rel=1e-6):
    h = rel * theta
    return (eval_kernel(spec, d, theta + h) - eval_kernel(spec, d, theta - h)) / (2 * h)


# --- closed forms ---------------------------------------------------------


def test_simple_values():
    assert eval_kernel(KernelSpec.squared_exponential(), 2.0, 2.0) == pytest.approx(0.3678794412, rel=1e-10)
    assert eval_kernel(KernelSpec.rational_quadratic(1.0), 3.0, 3.0) == pytest.approx(0.5, rel=1e-15)
    sph = KernelSpec.spherical()
    assert eval_kernel(sph, 1.0, 1.0) == 0.0
    assert eval_kernel(sph, 2.0, 1.0) == 0.0
    for k in ALL_KERNELS:
        assert eval_kernel(k, 0.0, 0.7) == 1.0
        assert eval_kernel_dtheta(k, 0.0, 0.7) == 0.0


def test_matern_half_is_exponential():
    # K_{1/2}(z) = sqrt(pi/(2z)) e^{-z}  =>  2^{1/2}/Gamma(1/2) z^{1/2} K_{1/2}(z) = e^{-z}, z = sqrt(2) d/theta
    d = np.linspace(0.0, 5.0, 41)
    for theta in (0.1, 1.0, 7.0):
        got = eval_kernel(KernelSpec.matern(0.5), d, theta)
        assert np.max(np.abs(got - np.exp(-math.sqrt(2.0) * d / theta))) < 1e-12


def test_matern_three_halves_and_five_halves():
    x = np.linspace(0.01, 4.0, 50)
    z = math.sqrt(6.0) * x
    assert np.allclose(eval_kernel(KernelSpec.matern(1.5), x, 1.0), (1 + z) * np.exp(-z), rtol=1e-12, atol=0)
    z = math.sqrt(10.0) * x
    assert np.allclose(eval_kernel(KernelSpec.matern(2.5), x, 1.0), (1 + z + z * z / 3) * np.exp(-z),
                       rtol=1e-12, atol=0)
    # BDOS takes the Bessel argument as d/theta directly
    assert np.allclose(eval_kernel(KernelSpec.matern(1.5, "BDOS"), x, 1.0), (1 + x) * np.exp(-x),
                       rtol=1e-12, atol=0)


def test_power_exponential_two_is_squared_exponential():
    d = np.linspace(0, 3, 31)
    a = eval_kernel(KernelSpec.power_exponential(2.0), d, 1.3)
    b = eval_kernel(KernelSpec.squared_exponential(), d, 1.3)
    assert np.max(np.abs(a - b)) <= 1e-15


def test_se_derivative_closed_form():
    assert eval_kernel_dtheta(KernelSpec.squared_exponential(), 1.0, 1.0) == pytest.approx(2 * math.exp(-1), rel=1e-14)


def test_matern_derivative_against_fd():
    k = KernelSpec.matern(1.5)
    assert eval_kernel_dtheta(k, 1.0, 2.0) == pytest.approx(fd_dtheta(k, 1.0, 2.0), rel=1e-6)


# --- Bessel K ----------------------------------------------------------------


def test_bessel_half_integer():
    assert bessel_knu(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-14)
    assert bessel_knu(0.5, 1.0) == pytest.approx(0.4610685044, rel=1e-9)
    z = 2.0
    assert bessel_knu(1.5, z) == pytest.approx(math.sqrt(math.pi / (2 * z)) * math.exp(-z) * (1 + 1 / z), rel=1e-14)


def test_bessel_small_argument_limit():
    for z in (1e-6, 1e-8):
        assert z * bessel_knu(1.0, z) == pytest.approx(1.0, rel=1e-10)


def test_bessel_against_mpmath():
    mp = mpmath.MPContext()
    mp.dps = 30
    worst = 0.0
    for nu in (0.3, 0.5, 1.0, 1.5, 2.0, 2.5, 3.7):
        for z in np.geomspace(1e-8, 7e2, 25):
            ref = mp.besselk(nu, mp.mpf(float(z)))
            if ref < mp.mpf("1e-300"):
                continue
            worst = max(worst, abs(bessel_knu(nu, z) / float(ref) - 1))
    assert worst < 1e-12


def test_bessel_domain():
    with pytest.raises(ParameterDomainError):
        bessel_knu(1.0, 0.0)
    with pytest.raises(ParameterDomainError):
        bessel_knu(1.0, -2.0)
    with pytest.raises(ParameterDomainError):
        bessel_knu(0.0, 1.0)


def test_extended_precision_bessel_matches_mpmath():
    mp = mpmath.MPContext()
    mp.dps = 40
    for order in (0.0, 1.0, 2.0, 3.0, 0.5, 1.5, 2.5, 1.3):
        for z in ("1e-12", "0.05", "1", "2", "5"):
            ours = _mp_besselk(mp, order, mp.mpf(z))
            with mp.workdps(60):
                ref = mp.besselk(order, mp.mpf(z))
            assert abs(ours / ref - 1) < mp.mpf("1e-35")


def test_extended_precision_bessel_pair_matches_mpmath():
    mp = mpmath.MPContext()
    mp.dps = 40
    for nu in (1.0, 2.0, 3.0, 5.0, 1.5, 2.5, 1.3):
        for z in ("1e-30", "1e-5", "0.7", "1.99", "2", "3.5"):
            k_nu, k_lower = _mp_besselk_pair(mp, nu, mp.mpf(z))
            with mp.workdps(80):
                assert abs(k_nu / mp.besselk(nu, mp.mpf(z)) - 1) < mp.mpf("1e-38")
                assert abs(k_lower / mp.besselk(abs(nu - 1), mp.mpf(z)) - 1) < mp.mpf("1e-38")


# --- parameter domain and serialisation -----------------------------------


def test_invalid_parameters():
    for bad in (
        lambda: KernelSpec.matern(0.0),
        lambda: KernelSpec.matern(-1.0),
        lambda: KernelSpec.rational_quadratic(0.0),
        lambda: KernelSpec.power_exponential(0.0),
        lambda: KernelSpec.power_exponential(2.5),
    ):
        with pytest.raises(ParameterDomainError):
            bad()
    with pytest.raises(ParameterDomainError):
        eval_kernel(KernelSpec.squared_exponential(), 1.0, 0.0)
    with pytest.raises(ParameterDomainError):
        eval_kernel_dtheta(KernelSpec.squared_exponential(), 1.0, -1.0)
    with pytest.raises(ParameterDomainError):
        eval_kernel(KernelSpec.squared_exponential(), -1.0, 1.0)


def test_json_round_trip():
    for k in ALL_KERNELS:
        obj = json.loads(k.to_json())
        assert set(obj) <= {"family", "q", "nu", "parametrization"}
        assert KernelSpec.from_json(k.to_json()) == k
        assert KernelSpec.from_dict(obj) == k


# --- derivatives vs finite differences --------------------------------------


@pytest.mark.parametrize("spec", ALL_KERNELS, ids=lambda k: k.label())
def test_dtheta_matches_central_differences(spec):
    rng = np.random.default_rng(5)
    for d, theta in rng.uniform(0.01, 10.0, size=(50, 2)):
        if spec.family is Family.SPHERICAL and abs(d / theta - 1) < 1e-3:
            continue  # kink at d = theta
        exact = eval_kernel_dtheta(spec, d, theta)
        assert exact == pytest.approx(mp_fd_dtheta(spec, d, theta), rel=1e-6, abs=1e-300)


@pytest.mark.parametrize("spec", ALL_KERNELS, ids=lambda k: k.label())
def test_extended_precision_agrees_with_float(spec):
    d = np.array([0.0, 0.03, 0.4, 1.0, 2.7])
    mp = mpmath.MPContext()
    mp.dps = 30
    K, dK = kernel_and_derivative(spec, d, 0.9, mp)
    assert np.allclose(np.array(K, dtype=float), eval_kernel(spec, d, 0.9), rtol=1e-13, atol=1e-300)
    assert np.allclose(np.array(dK, dtype=float), eval_kernel_dtheta(spec, d, 0.9), rtol=1e-12, atol=1e-300)


@settings(max_examples=60, deadline=None)
@given(
    d=st.floats(0.01, 10.0),
    theta=st.floats(0.01, 10.0),
    idx=st.integers(0, len(ALL_KERNELS) - 2),  # spherical excluded: kink
)
def test_property_dtheta_fd(d, theta, idx):
    spec = ALL_KERNELS[idx]
    exact = eval_kernel_dtheta(spec, d, theta)
    assert exact == pytest.approx(mp_fd_dtheta(spec, d, theta), rel=1e-6, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(d=st.floats(0.0, 50.0), theta=st.floats(1e-3, 1e3), idx=st.integers(0, len(ALL_KERNELS) - 1))
def test_property_kernel_range(d, theta, idx):
    v = eval_kernel(ALL_KERNELS[idx], d, theta)
    assert 0.0 <= v <= 1.0


# --- small-argument series -----------------------------------------------


def test_series_simple_coefficients():
    se = series_coefficients(KernelSpec.squared_exponential(), 3)
    assert np.allclose(se.coefficients, [1, -1, 0.5, -1 / 6], rtol=1e-15)
    rq = series_coefficients(KernelSpec.rational_quadratic(1.0), 3)
    assert np.allclose(rq.coefficients, [1, -1, 1, -1], rtol=1e-15)
    m = series_coefficients(KernelSpec.matern(1.5))
    assert m.coefficients[0] == pytest.approx(1.0)
    assert m.coefficients[1] == pytest.approx(-math.gamma(0.5) * 1.5 / math.gamma(1.5), rel=1e-14)
    assert m.coefficients[1] == pytest.approx(-3.0, rel=1e-14)
    assert m.frac_exponent == 3.0


def taylor_coefficients_mp(fun, k_max):
    """Taylor coefficients of fun(s) at s = 0 via mpmath's numerical differentiation."""
    mp = mpmath.MPContext()
    mp.dps = 40
    return [float(c) for c in mp.taylor(fun, 0, k_max)]


@pytest.mark.parametrize("nu", [0.5, 1.0, 2.0, 3.3])
def test_rq_series_matches_taylor_oracle(nu):
    # K(x) = (1 + s)^(-nu), s = x^2
    oracle = taylor_coefficients_mp(lambda s: (1 + s) ** (-nu), 6)
    got = series_coefficients(KernelSpec.rational_quadratic(nu), 6).coefficients
    assert np.allclose(got, oracle, rtol=1e-12, atol=1e-14)
    shifted = [rq_coefficient_shifted(nu, k) for k in range(7)]
    assert not np.allclose(shifted[1:], oracle[1:], rtol=1e-3)


def mp_partial_sum(ser, x, mp):
    """Series value from the stored float coefficients, summed in extended precision.

    Returns the value and the rounding budget carried by the stored
    coefficients (``eps * |term|`` for every term past the constant).
    """
    x = mp.mpf(x)
    terms = [mp.mpf(a) * x ** (2 * k) for k, a in enumerate(ser.coefficients)]
    if ser.frac_exponent is not None:
        terms.append(mp.mpf(ser.frac_coefficient) * x ** mp.mpf(ser.frac_exponent))
    if ser.log_coefficient is not None:
        m = len(ser.coefficients)
        terms.append(mp.mpf(ser.log_coefficient) * x ** (2 * m) * (-mp.log(x) + ser.log_constant))
    budget = 4 * 2.2e-16 * sum(float(abs(t)) for t in terms[1:])
    return sum(terms), budget


@pytest.mark.parametrize("spec", [KernelSpec.squared_exponential()] + [KernelSpec.rational_quadratic(v) for v in (0.5, 1.0, 2.0, 3.3)],
                         ids=lambda k: k.label())
def test_alternating_series_remainder_below_first_omitted_term(spec):
    mp = mpmath.MPContext()
    mp.dps = 40
    for k_max in (1, 2, 3, 4):
        ser = series_coefficients(spec, k_max)
        nxt = series_coefficients(spec, k_max + 1).coefficients[-1]
        for x in np.linspace(0.005, 0.1, 20):
            val, budget = mp_partial_sum(ser, x, mp)
            rem = float(abs(mp_kernel(spec, x, mp) - val))
            assert rem <= abs(nxt) * x ** (2 * k_max + 2) + budget


@pytest.mark.parametrize("nu", [1.0, 1.5, 2.0, 2.5, 3.0, 3.7])
def test_matern_series_remainder_order(nu):
    """Remainder after the retained terms is O(x^{2 floor(nu) + 2}), times log(x) for integer nu."""
    spec = KernelSpec.matern(nu)
    ser = series_coefficients(spec)
    mp = mpmath.MPContext()
    mp.dps = 50
    # lower end kept where the remainder still dominates the coefficients' rounding
    xs = np.geomspace(5e-3, 5e-2, 9)
    rem = [float(abs(mp_kernel(spec, x, mp) - mp_partial_sum(ser, x, mp)[0])) for x in xs]
    y = np.log(rem)
    if float(nu).is_integer():
        y = y - np.log(np.abs(np.log(xs)))
    slope = np.polyfit(np.log(xs), y, 1)[0]
    assert slope >= 2 * math.floor(nu) + 2 - 0.15

@pytest.mark.parametrize("nu", [1, 2, 3])
def test_matern_integer_log_term_oracle(nu):
    """The x^{2nu} log term must account for the whole remainder at small x.

    The uncorrected constants do not; the corrected ones do to better than
    1e-6 relative at x = 1e-4.
    """
    spec = KernelSpec.matern(float(nu))
    mp = mpmath.MPContext()
    mp.dps = 50
    x = 1e-4
    z = 2 * mp.sqrt(nu) * mp.mpf(x)
    exact = 2 ** (1 - mp.mpf(nu)) / mp.gamma(nu) * z ** nu * mp.besselk(nu, z)
    for uncorrected, ok in ((False, True), (True, False)):
        ser = series_coefficients(spec, uncorrected_log_term=uncorrected)
        poly = sum(mp.mpf(a) * mp.mpf(x) ** (2 * k) for k, a in enumerate(ser.coefficients))
        true_rem = exact - poly
        log_term = mp.mpf(ser.log_coefficient) * mp.mpf(x) ** (2 * nu) * (-mp.log(x) + ser.log_constant)
        ratio = float(log_term / true_rem)
        assert (abs(ratio - 1) < 1e-6) is ok


def test_log_companion_matrix():
    spec = KernelSpec.matern(2.0)
    ser = series_coefficients(spec)
    dist = np.array([[0.0, 0.5], [0.5, 0.0]])
    out = log_companion_matrix(dist, ser, 2)
    assert out[0, 0] == 0.0
    assert out[0, 1] == pytest.approx(0.5 ** 4 * (-math.log(0.5) + ser.log_constant), rel=1e-14)


@pytest.mark.parametrize("spec", [k for k in ALL_KERNELS if k.is_smooth], ids=lambda k: k.label())
def test_series_reproduces_kernel_at_large_theta(spec):
    """At theta = 1e3 on pairwise distances: error below twice the first omitted term.

    Compared in extended precision; at this theta the omitted terms sit far
    below double precision, so the float coefficients' own rounding is the
    only other allowance.
    """
    rng = np.random.default_rng(2)
    pts = rng.uniform(size=(6, 2))
    d = np.array([np.linalg.norm(a - b) for i, a in enumerate(pts) for b in pts[i + 1:]])
    mp = mpmath.MPContext()
    mp.dps = 60
    ser = series_coefficients(spec)
    k_next = len(ser.coefficients)
    for x in d / 1e3:
        val, budget = mp_partial_sum(ser, x, mp)
        rem = float(abs(mp_kernel(spec, x, mp) - val))
        if spec.family is Family.MATERN:
            if float(spec.nu).is_integer():
                # next term of the logarithmic part
                c = spec.nu
                omitted = abs(ser.log_coefficient) * c / (spec.nu + 1) * x ** (2 * k_next + 2) \
                    * (abs(math.log(x)) + abs(ser.log_constant) + 2)
            else:
                c, k = spec.nu, k_next
                omitted = abs(math.gamma(spec.nu - k) * c ** k / (math.factorial(k) * math.gamma(spec.nu))) \
                    * x ** (2 * k)
        else:
            omitted = abs(series_coefficients(spec, k_next).coefficients[-1]) * x ** (2 * k_next)
        assert rem <= 2 * omitted + budget

def test_series_unsupported():
    for spec in (KernelSpec.spherical(), KernelSpec.power_exponential(1.0)):
        with pytest.raises(UnsupportedKernelError):
            series_coefficients(spec)
    with pytest.raises(ParameterDomainError):
        series_coefficients(KernelSpec.squared_exponential(), 13)


@pytest.mark.parametrize("nu", [1.0, 1.5, 2.5])
def test_matern_smoothness_exponent(nu):
    # 1 - K(s) ~ s^2 (possibly times log) for nu >= 1: measured exponent >= 2 - small
    s = np.geomspace(1e-5, 1e-3, 9)
    y = 1 - eval_kernel(KernelSpec.matern(nu), s, 1.0)
    slope = np.polyfit(np.log(s), np.log(y), 1)[0]
    assert slope >= 2 - 0.15
    assert roughness_info(KernelSpec.matern(nu)).q == 2.0


def test_roughness_table():
    assert roughness_info(KernelSpec.spherical()).q == 1.0
    assert roughness_info(KernelSpec.power_exponential(0.5)).d_nonsingular
    assert not roughness_info(KernelSpec.squared_exponential()).d_nonsingular
    assert roughness_info(KernelSpec.matern(0.7)).q == pytest.approx(1.4)
