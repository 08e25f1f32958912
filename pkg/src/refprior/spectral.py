"""Spectral representation of isotropic correlation matrices.

For a stationary isotropic kernel ``K`` with ``r``-dimensional Fourier
transform ``Khat`` (normalised so that ``K(0) = integral of Khat``),

    xi^T Sigma_theta xi = integral Khat_theta(s) |sum_j xi_j exp(i <s, x_j>)|^2 ds
                        = M_r * theta^r * I_theta(xi),

where ``M_r`` is a family constant and ``I_theta`` integrates the unnormalised
spectral density in the frequency variable ``s``. This module evaluates the
right-hand side independently of the kernel routines and compares it with the
direct quadratic form. It also checks the matrix ``F_theta = r/theta Sigma -
dSigma/dtheta`` that controls the reference prior for large ``theta``.

Densities (``a`` is the Matérn Bessel-argument scale, ``2 sqrt(nu)`` in the
default parametrisation):

=========  =====================================================  =========================================
family     ``M_r``                                                 ``I_theta`` integrand
=========  =====================================================  =========================================
Matérn     ``Gamma(nu + r/2) a^(2 nu) / (pi^(r/2) Gamma(nu))``     ``(a^2 + theta^2 |s|^2)^(-r/2 - nu)``
RQ         ``2^(1 - nu) / ((2 pi)^(r/2) Gamma(nu))``               ``(theta |s|)^(nu - r/2) K_(nu - r/2)(theta |s|)``
SE         ``(2 sqrt(pi))^(-r)``                                   ``exp(-theta^2 |s|^2 / 4)``
=========  =====================================================  =========================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from . import _linalg as la
from .errors import (
    LemmaViolation,
    NotPositiveDefiniteError,
    ParameterDomainError,
    QuadratureError,
    UnsupportedKernelError,
)
from .gp import DesignSet, GpModel, make_context
from .kernels import Family, KernelSpec, _matern_scale, eval_kernel, kernel_and_derivative

_SPECTRAL_FAMILIES = (Family.MATERN, Family.RATIONAL_QUADRATIC, Family.SQUARED_EXPONENTIAL)


def _check_family(kernel: KernelSpec) -> None:
    if kernel.family is Family.POWER_EXPONENTIAL and kernel.q == 2.0:
        return
    if kernel.family not in _SPECTRAL_FAMILIES:
        raise UnsupportedKernelError(
            f"spectral checks cover Matérn, rational quadratic and squared exponential kernels, not {kernel.label()}"
        )


def _family(kernel: KernelSpec) -> Family:
    if kernel.family is Family.POWER_EXPONENTIAL:
        return Family.SQUARED_EXPONENTIAL
    return kernel.family


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def spectral_constant(kernel: KernelSpec, r: int) -> float:
    """The family constant ``M_r``."""
    _check_family(kernel)
    fam = _family(kernel)
    nu = kernel.nu
    if fam is Family.SQUARED_EXPONENTIAL:
        return (2.0 * math.sqrt(math.pi)) ** (-r)
    if fam is Family.RATIONAL_QUADRATIC:
        return math.exp((1.0 - nu) * math.log(2.0) - 0.5 * r * math.log(2.0 * math.pi) - math.lgamma(nu))
    a = _matern_scale(kernel)
    return math.exp(math.lgamma(nu + r / 2) + 2 * nu * math.log(a) - 0.5 * r * math.log(math.pi) - math.lgamma(nu))


def spectral_integrand(kernel: KernelSpec, s, theta: float, r: int) -> np.ndarray:
    """Unnormalised density ``g_theta(|s|)`` entering ``I_theta``."""
    _check_family(kernel)
    fam = _family(kernel)
    s = np.abs(np.asarray(s, dtype=float))
    x = theta * s
    if fam is Family.SQUARED_EXPONENTIAL:
        return np.exp(-x * x / 4.0)
    if fam is Family.MATERN:
        a = _matern_scale(kernel)
        return (a * a + x * x) ** (-r / 2 - kernel.nu)
    mu = kernel.nu - r / 2
    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
        out = np.exp(mu * np.log(x) + np.log(special.kve(abs(mu), x)) - x)
    if mu > 0:
        out = np.where(x == 0, 2.0 ** (mu - 1) * math.gamma(mu), out)
    return out


def _tail_mass(kernel: KernelSpec, S: float, theta: float) -> float:
    """Upper bound of ``integral_S^inf g_theta(s) ds`` for ``r = 1``."""
    fam = _family(kernel)
    if fam is Family.SQUARED_EXPONENTIAL:
        return math.sqrt(math.pi) / theta * math.erfc(theta * S / 2.0)
    if fam is Family.MATERN:
        # (a^2 + t^2)^(-1/2 - nu) <= t^(-1 - 2 nu)
        return theta ** (-1 - 2 * kernel.nu) * S ** (-2 * kernel.nu) / (2 * kernel.nu)
    # the RQ density is positive and decreasing beyond S: integrate it
    val, _ = integrate.quad(lambda t: float(spectral_integrand(kernel, t, theta, 1)), S, np.inf, limit=200)
    return val


# ---------------------------------------------------------------------------
# quadratic form
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralReport:
    """Direct versus spectral evaluation of ``xi^T Sigma_theta xi``.

    ``nodes`` counts integrand evaluations for the deterministic rule; for
    Monte Carlo runs it is the number of frequency samples and
    ``std_error`` is the standard error of ``quadratic_form_spectral``.
    """

    theta: float
    xi: np.ndarray
    quadratic_form_direct: float
    quadratic_form_spectral: float
    rel_error: float
    nodes: int
    M_r: float
    I_theta: float
    truncation: float = math.inf
    tail_bound: float = 0.0
    std_error: float = 0.0
    method: str = "quadrature"

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "xi": [float(v) for v in self.xi],
            "quadratic_form_direct": self.quadratic_form_direct,
            "quadratic_form_spectral": self.quadratic_form_spectral,
            "rel_error": self.rel_error,
            "nodes": self.nodes,
            "M_r": self.M_r,
            "I_theta": self.I_theta,
            "truncation": self.truncation,
            "tail_bound": self.tail_bound,
            "std_error": self.std_error,
            "method": self.method,
        }


def _cos_integral(fn, d: float, S: float, limit: int, s0: float) -> tuple[float, int]:
    """``integral_0^S fn(s) cos(d s) ds`` and the number of evaluations.

    ``[0, s0]`` uses a rule that never evaluates the endpoints (the RQ
    density is singular at the origin for ``nu <= r/2``); the remainder uses
    the cosine-weighted rule.
    """
    s0 = min(s0, S)
    val, _, info = integrate.quad(lambda t: fn(t) * math.cos(d * t), 0.0, s0, limit=limit, full_output=1)[:3]
    neval = int(info["neval"])
    if S > s0:
        if d == 0.0:
            v2, _, info = integrate.quad(fn, s0, S, limit=limit, full_output=1)[:3]
        else:
            kw = {"limlst": 200} if math.isinf(S) else {"limit": limit}
            v2, _, info = integrate.quad(fn, s0, S, weight="cos", wvar=d, full_output=1, **kw)[:3]
        val += v2
        neval += int(info["neval"])
    return val, neval


def spectral_quadratic_form(kernel: KernelSpec, design: DesignSet, xi, theta: float,
                            tail_rtol: float = 1e-8, limit: int = 2000,
                            mc_samples: int = 1_000_000, seed: int = 0) -> SpectralReport:
    """Compare ``xi^T Sigma_theta xi`` with its spectral representation.

    For ``r = 1`` the frequency integral is evaluated by adaptive quadrature
    on ``[0, S]`` after expanding ``|sum_j xi_j e^{i s x_j}|^2`` into a real
    cosine double sum. ``S`` is doubled until the analytic tail bound,
    weighted by ``(sum |xi_j|)^2``, is below ``tail_rtol`` times the estimate.
    For ``r >= 2`` the expectation is estimated by Monte Carlo with
    ``mc_samples`` draws from the normalised spectral density.

    Raises
    ------
    QuadratureError
        If the truncation cannot be pushed far enough.
    """
    _check_family(kernel)
    if not (theta > 0 and math.isfinite(theta)):
        raise ParameterDomainError(f"theta must be positive and finite, got {theta!r}")
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (design.n,):
        raise ParameterDomainError(f"xi must have length {design.n}")
    direct = float(xi @ eval_kernel(kernel, design.distances, theta) @ xi)
    r = design.r
    M = spectral_constant(kernel, r)
    if r >= 2:
        return _monte_carlo(kernel, design, xi, theta, direct, M, mc_samples, seed)

    x = design.points[:, 0]
    # sum_{j,k} xi_j xi_k cos(s (x_j - x_k)) = sum_d c_d cos(s d)
    coef: dict[float, float] = {}
    for j in range(design.n):
        for k in range(design.n):
            dd = abs(float(x[j] - x[k]))
            coef[dd] = coef.get(dd, 0.0) + xi[j] * xi[k]
    g = lambda t: float(spectral_integrand(kernel, t, theta, 1))  # noqa: E731
    weight = float(np.sum(np.abs(xi))) ** 2
    if _family(kernel) is Family.MATERN:
        # algebraic decay: truncation would need S ~ tol^(-1/(2 nu)); the
        # Fourier-integral rule on [s0, inf) handles the tail directly
        total, nodes = 0.0, 0
        for dd, c in coef.items():
            v, ne = _cos_integral(g, dd, math.inf, limit, 1.0 / theta)
            total += c * v
            nodes += ne
        I = 2.0 * total
        if not math.isfinite(I):
            raise QuadratureError(f"non-finite frequency integral after {nodes} evaluations",
                                  diagnostics={"nodes": nodes})
        spec = M * theta * I
        return SpectralReport(theta, xi, direct, spec, abs(spec - direct) / abs(direct), nodes, M, I)
    S = 8.0 / theta
    nodes = 0
    for _ in range(16):
        total = 0.0
        for dd, c in coef.items():
            v, ne = _cos_integral(g, dd, S, limit, 1.0 / theta)
            total += c * v
            nodes += ne
        I = 2.0 * total  # even integrand over the real line
        if not math.isfinite(I):
            raise QuadratureError(f"non-finite frequency integral after {nodes} evaluations",
                                  diagnostics={"nodes": nodes, "truncation": S})
        tail = 2.0 * weight * _tail_mass(kernel, S, theta)
        if tail <= tail_rtol * abs(I):
            break
        S *= 4.0
    else:
        raise QuadratureError(f"frequency truncation did not converge after {nodes} evaluations",
                              diagnostics={"nodes": nodes, "truncation": S})
    spec = M * theta * I
    rel = abs(spec - direct) / abs(direct)
    return SpectralReport(theta, xi, direct, spec, rel, nodes, M, I, S, M * theta * tail)


def _sample_frequencies(kernel: KernelSpec, theta: float, r: int, size: int, rng) -> np.ndarray:
    """Draws from the normalised spectral density of ``K(./theta)``."""
    fam = _family(kernel)
    g = rng.standard_normal((size, r))
    if fam is Family.SQUARED_EXPONENTIAL:
        return g * (math.sqrt(2.0) / theta)
    if fam is Family.RATIONAL_QUADRATIC:
        # (1 + t)^(-nu) is the Laplace transform of Gamma(nu, 1)
        tau = rng.gamma(kernel.nu, 1.0, size)
        return g * (np.sqrt(2.0 * tau) / theta)[:, None]
    a = _matern_scale(kernel) / theta
    chi = rng.chisquare(2.0 * kernel.nu, size)
    return g * (a / np.sqrt(chi))[:, None]


def _monte_carlo(kernel, design, xi, theta, direct, M, samples, seed) -> SpectralReport:
    rng = np.random.default_rng(seed)
    r = design.r
    chunk = 100_000
    acc = acc2 = 0.0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        s = _sample_frequencies(kernel, theta, r, k, rng)
        phase = s @ design.points.T
        val = (np.cos(phase) @ xi) ** 2 + (np.sin(phase) @ xi) ** 2
        acc += float(val.sum())
        acc2 += float((val * val).sum())
        done += k
    mean = acc / samples
    se = math.sqrt(max(acc2 / samples - mean * mean, 0.0) / samples)
    scale = M * theta ** r
    return SpectralReport(theta, xi, direct, mean, abs(mean - direct) / abs(direct), samples,
                          M, mean / scale, std_error=se, method="monte-carlo")


# ---------------------------------------------------------------------------
# F_theta
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FMatrixReport:
    """Spectrum of ``F_theta = r/theta Sigma - dSigma/dtheta``.

    ``t2`` is the largest generalised eigenvalue of ``(F_theta, Sigma_theta)``
    and ``bound`` the family ceiling on it; ``bound`` is ``None`` when the
    ceiling only applies for larger ``theta`` than requested.
    """

    theta: float
    min_eigenvalue: float
    norm: float
    t2: float
    t_min: float
    bound: float | None
    psd_ok: bool
    bound_ok: bool
    dps: int | None = None
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.psd_ok and self.bound_ok

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "min_eigenvalue": self.min_eigenvalue,
            "norm": self.norm,
            "t2": self.t2,
            "t_min": self.t_min,
            "bound": self.bound,
            "psd_ok": self.psd_ok,
            "bound_ok": self.bound_ok,
            "dps": self.dps,
        }


def f_bound(kernel: KernelSpec, theta: float, r: int) -> float:
    """Family ceiling on ``t2``: ``(2 nu + r)/theta``, ``r + 2`` or ``theta``."""
    fam = _family(kernel)
    if fam is Family.MATERN:
        return (2.0 * kernel.nu + r) / theta
    if fam is Family.RATIONAL_QUADRATIC:
        return r + 2.0
    return theta


def _generalized_extremes(F, Sig, ctx):
    """Extreme eigenvalues of ``L^-1 F L^-T`` with ``Sigma = L L^T``."""
    L = la.cholesky(Sig, ctx)
    G = la.solve_lower(L, la.solve_lower(L, F).T)
    G = (G + G.T) / 2
    ev = la.eigvalsh(G, ctx)
    return float(ev[-1]), float(ev[0]), L


def f_matrix_check(model: GpModel | DesignSet, kernel: KernelSpec | None, theta: float,
                   large_theta_factor: float = 10.0, rtol: float = 1e-8,
                   psd_rtol: float = 1e-10) -> FMatrixReport:
    """Check positive semi-definiteness of ``F_theta`` and its family bound.

    Parameters
    ----------
    model : GpModel or DesignSet
        Only the design is used.
    kernel : KernelSpec, optional
        Defaults to ``model.kernel``.
    theta : float
    large_theta_factor : float
        The RQ and SE ceilings are asserted only for
        ``theta >= large_theta_factor * max_distance``.
    rtol : float
        Relative slack on the ceiling.

    The generalised eigenvalues are recomputed in extended precision when
    ``Sigma_theta`` is too ill-conditioned for double precision.
    """
    design = model if isinstance(model, DesignSet) else model.design
    kernel = kernel if kernel is not None else model.kernel
    _check_family(kernel)
    r = design.r
    K, dK = kernel_and_derivative(kernel, design.distances, theta)
    K = np.asarray(K, dtype=float)
    F = r / theta * K - np.asarray(dK, dtype=float)
    F = (F + F.T) / 2
    ev = np.linalg.eigvalsh(F)
    norm = float(np.max(np.abs(ev)))
    min_ev = float(ev[0])
    psd_ok = min_ev >= -psd_rtol * norm
    dps = None
    try:
        L = np.linalg.cholesky(K)
        linv = np.linalg.norm(np.linalg.inv(L)) ** 2
        reliable = linv * norm * 1e-16 * design.n < rtol * 1e-2
    except np.linalg.LinAlgError:
        reliable = False
    if reliable:
        t2, tmin, _ = _generalized_extremes(F, K, None)
    else:
        dps = 40
        while True:
            ctx = make_context(dps)
            dist = design.distances_mp(ctx)
            Km, dKm = kernel_and_derivative(kernel, dist, theta, ctx)
            Fm = Km * (ctx.mpf(r) / ctx.mpf(theta)) - dKm
            try:
                t2, tmin, Lm = _generalized_extremes(Fm, Km, ctx)
                linv = float(la.frob2(la.solve_lower(Lm, la.eye(design.n, ctx))))
                if linv * norm * 10.0 ** (-dps) * design.n < rtol * 1e-2:
                    break
            except NotPositiveDefiniteError:
                pass
            if dps >= 640:
                raise LemmaViolation(f"could not resolve the spectrum of F at theta={theta} with {dps} digits")
            dps *= 2
    bound = f_bound(kernel, theta, r)
    if _family(kernel) is not Family.MATERN and theta < large_theta_factor * design.max_distance():
        bound_ok = True
        notes = ["theta below the large-theta regime; ceiling not asserted"]
        bound_val = None
    else:
        bound_ok = t2 <= bound * (1.0 + rtol) + rtol
        notes = []
        bound_val = bound
    return FMatrixReport(theta, min_ev, norm, t2, tmin, bound_val, psd_ok, bound_ok, dps, notes)


def prior_ceiling_check(model: GpModel, theta: float) -> tuple[float, float]:
    """``(log pi(theta), log ceiling)`` with the ceiling built from ``F_theta``.

    The eigenvalues of ``(W^T dSigma W, W^T Sigma W)`` interlace with those of
    ``(dSigma, Sigma)``, which equal ``r/theta - t`` for the generalised
    eigenvalues ``t`` of ``(F_theta, Sigma)``. Hence the reference prior is at
    most ``sqrt(n - p) * max(|r/theta - t2|, |r/theta - t_min|)``.
    """
    from .bayes import log_reference_prior, precise_state

    rep = f_matrix_check(model, model.kernel, theta)
    state, _ = precise_state(model, theta)
    lp = log_reference_prior(model, state)
    r = model.design.r
    lam = max(abs(r / theta - rep.t2), abs(r / theta - rep.t_min))
    return lp, 0.5 * math.log(model.m) + math.log(lam)
