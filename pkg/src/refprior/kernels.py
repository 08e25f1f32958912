"""Isotropic correlation kernels, their length-scale derivatives and their
small-argument series.

All kernels are written as ``K_theta(d) = K(d / theta)`` with ``K(0) = 1``.
Float evaluation is vectorised over ``d``. Passing an ``mpmath`` context as
``ctx`` switches to extended precision and returns object arrays of ``mpf``;
that path is used by the large-``theta`` diagnostics where the correlation
matrix is too close to ``11^T`` for double precision.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special

from .errors import ParameterDomainError, UnsupportedKernelError

EULER_GAMMA = 0.57721566490153286060651209008240243


class Family(str, enum.Enum):
    SPHERICAL = "spherical"
    POWER_EXPONENTIAL = "power_exponential"
    SQUARED_EXPONENTIAL = "squared_exponential"
    RATIONAL_QUADRATIC = "rational_quadratic"
    MATERN = "matern"


class Parametrization(str, enum.Enum):
    HW94 = "HW94"  # argument 2 sqrt(nu) d / theta
    BDOS = "BDOS"  # argument d / theta


_ALIASES = {
    "se": Family.SQUARED_EXPONENTIAL,
    "gauss": Family.SQUARED_EXPONENTIAL,
    "squared_exponential": Family.SQUARED_EXPONENTIAL,
    "rq": Family.RATIONAL_QUADRATIC,
    "rational_quadratic": Family.RATIONAL_QUADRATIC,
    "matern": Family.MATERN,
    "pe": Family.POWER_EXPONENTIAL,
    "power_exponential": Family.POWER_EXPONENTIAL,
    "spherical": Family.SPHERICAL,
    "sph": Family.SPHERICAL,
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its shape parameter.

    ``q`` is used by the power exponential family only, ``nu`` by the
    rational quadratic and Matérn families. ``parametrization`` only matters
    for Matérn.
    """

    family: Family
    q: float | None = None
    nu: float | None = None
    parametrization: Parametrization = Parametrization.HW94

    def __post_init__(self):
        fam = self.family
        if not isinstance(fam, Family):
            object.__setattr__(self, "family", parse_family(fam))
        if not isinstance(self.parametrization, Parametrization):
            object.__setattr__(self, "parametrization", Parametrization(self.parametrization))
        fam = self.family
        if fam is Family.POWER_EXPONENTIAL:
            if self.q is None or not (0.0 < self.q <= 2.0):
                raise ParameterDomainError(f"power exponential needs q in (0, 2], got {self.q!r}")
        elif self.q is not None:
            raise ParameterDomainError(f"q is only meaningful for power_exponential, not {fam.value}")
        if fam in (Family.RATIONAL_QUADRATIC, Family.MATERN):
            if self.nu is None or not (self.nu > 0.0) or not math.isfinite(self.nu):
                raise ParameterDomainError(f"{fam.value} needs nu > 0, got {self.nu!r}")
        elif self.nu is not None:
            raise ParameterDomainError(f"nu is not a parameter of {fam.value}")

    # constructors -----------------------------------------------------------
    @classmethod
    def squared_exponential(cls) -> "KernelSpec":
        return cls(Family.SQUARED_EXPONENTIAL)

    @classmethod
    def rational_quadratic(cls, nu: float) -> "KernelSpec":
        return cls(Family.RATIONAL_QUADRATIC, nu=float(nu))

    @classmethod
    def matern(cls, nu: float, parametrization="HW94") -> "KernelSpec":
        return cls(Family.MATERN, nu=float(nu), parametrization=Parametrization(parametrization))

    @classmethod
    def power_exponential(cls, q: float) -> "KernelSpec":
        return cls(Family.POWER_EXPONENTIAL, q=float(q))

    @classmethod
    def spherical(cls) -> "KernelSpec":
        return cls(Family.SPHERICAL)

    # serialisation ----------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family.value}
        if self.q is not None:
            out["q"] = self.q
        if self.nu is not None:
            out["nu"] = self.nu
        if self.family is Family.MATERN:
            out["parametrization"] = self.parametrization.value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "KernelSpec":
        unknown = set(obj) - {"family", "q", "nu", "parametrization"}
        if unknown:
            raise ParameterDomainError(f"unknown kernel fields: {sorted(unknown)}")
        if "family" not in obj:
            raise ParameterDomainError("kernel object needs a 'family' field")
        q = obj.get("q")
        nu = obj.get("nu")
        return cls(
            parse_family(obj["family"]),
            q=None if q is None else float(q),
            nu=None if nu is None else float(nu),
            parametrization=Parametrization(obj.get("parametrization", "HW94")),
        )

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        return cls.from_dict(json.loads(text))

    # convenience ------------------------------------------------------------
    @property
    def is_smooth(self) -> bool:
        """True for the families whose propriety needs the smooth-kernel analysis."""
        if self.family in (Family.SQUARED_EXPONENTIAL, Family.RATIONAL_QUADRATIC):
            return True
        if self.family is Family.POWER_EXPONENTIAL:
            return self.q == 2.0
        if self.family is Family.MATERN:
            return self.nu >= 1.0
        return False

    @property
    def integer_nu(self) -> bool:
        return self.nu is not None and float(self.nu).is_integer()

    def label(self) -> str:
        if self.family is Family.MATERN:
            return f"matern(nu={self.nu:g})"
        if self.family is Family.RATIONAL_QUADRATIC:
            return f"rq(nu={self.nu:g})"
        if self.family is Family.POWER_EXPONENTIAL:
            return f"pe(q={self.q:g})"
        return self.family.value


def parse_family(name) -> Family:
    if isinstance(name, Family):
        return name
    key = str(name).strip().lower().replace("-", "_")
    if key in _ALIASES:
        return _ALIASES[key]
    raise ParameterDomainError(f"unknown kernel family {name!r}")


def _matern_scale(spec: KernelSpec) -> float:
    """Factor multiplying d/theta inside the Bessel function."""
    if spec.parametrization is Parametrization.HW94:
        return 2.0 * math.sqrt(spec.nu)
    return 1.0


def _check_theta(theta):
    if not (theta > 0) or not math.isfinite(float(theta)):
        raise ParameterDomainError(f"theta must be a positive finite number, got {theta!r}")


def _check_d(d):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ParameterDomainError("distances must be finite and nonnegative")
    return d


def bessel_knu(nu: float, z):
    """Modified Bessel function of the second kind, ``K_nu(z)``, for z > 0."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise ParameterDomainError("bessel_knu needs z > 0")
    if not (nu > 0):
        raise ParameterDomainError(f"bessel_knu needs nu > 0, got {nu!r}")
    out = special.kv(nu, z)
    return out if out.ndim else float(out)


def _matern_core(nu: float, z: np.ndarray, order: float) -> np.ndarray:
    """``2^{1-nu}/Gamma(nu) z^nu K_order(z)`` for z > 0, overflow safe."""
    logc = (1.0 - nu) * math.log(2.0) - special.gammaln(nu)
    with np.errstate(divide="ignore", under="ignore"):
        val = np.exp(logc + nu * np.log(z) + np.log(special.kve(order, z)) - z)
    return val


def eval_kernel(spec: KernelSpec, d, theta: float):
    """Correlation ``K(d / theta)``; vectorised over ``d``."""
    _check_theta(theta)
    d = _check_d(d)
    x = d / theta
    fam = spec.family
    if fam is Family.SQUARED_EXPONENTIAL:
        out = np.exp(-x * x)
    elif fam is Family.POWER_EXPONENTIAL:
        out = np.exp(-(x ** spec.q))
    elif fam is Family.RATIONAL_QUADRATIC:
        out = np.exp(-spec.nu * np.log1p(x * x))
    elif fam is Family.SPHERICAL:
        out = np.where(x < 1.0, 1.0 - 1.5 * x + 0.5 * x ** 3, 0.0)
    else:
        z = _matern_scale(spec) * x
        out = np.ones_like(z)
        pos = z > 0
        # kve loses the last digits at tiny z; a correlation never exceeds 1
        out[pos] = np.minimum(_matern_core(spec.nu, z[pos], spec.nu), 1.0)
    return out if out.ndim else float(out)


def eval_kernel_dtheta(spec: KernelSpec, d, theta: float):
    """Analytic ``d/dtheta K(d / theta)``; zero at ``d = 0``."""
    _check_theta(theta)
    d = _check_d(d)
    x = d / theta
    fam = spec.family
    if fam is Family.SQUARED_EXPONENTIAL:
        out = 2.0 * x * x / theta * np.exp(-x * x)
    elif fam is Family.POWER_EXPONENTIAL:
        xq = x ** spec.q
        out = spec.q * xq / theta * np.exp(-xq)
    elif fam is Family.RATIONAL_QUADRATIC:
        out = 2.0 * spec.nu * x * x / theta * np.exp(-(spec.nu + 1.0) * np.log1p(x * x))
    elif fam is Family.SPHERICAL:
        out = np.where(x < 1.0, 1.5 * x / theta * (1.0 - x * x), 0.0)
    else:
        # d/dz [z^nu K_nu(z)] = -z^nu K_{nu-1}(z) and dz/dtheta = -z/theta
        z = _matern_scale(spec) * x
        out = np.zeros_like(z)
        pos = z > 0
        zp = z[pos]
        out[pos] = zp / theta * _matern_core(spec.nu, zp, abs(spec.nu - 1.0))
    return out if out.ndim else float(out)


def kernel_and_derivative(spec: KernelSpec, d, theta, ctx=None):
    """Return ``(K, dK/dtheta)`` evaluated at the distances ``d``.

    With ``ctx=None`` this is the float path. With an ``mpmath`` context the
    result is a pair of object arrays holding ``ctx.mpf`` values; ``d`` and
    ``theta`` are converted exactly from their binary representation.
    """
    if ctx is None:
        return eval_kernel(spec, d, theta), eval_kernel_dtheta(spec, d, theta)
    _check_theta(float(theta))
    if isinstance(d, np.ndarray) and d.dtype == object:
        if any(v < 0 for v in d.ravel()):
            raise ParameterDomainError("distances must be finite and nonnegative")
    else:
        d = _check_d(d)
    th = ctx.mpf(theta)
    fam = spec.family
    cache: dict = {}

    def one(dist):
        if dist in cache:
            return cache[dist]
        if dist == 0:
            res = (ctx.one, ctx.zero)
        else:
            x = ctx.mpf(dist) / th
            if fam is Family.SQUARED_EXPONENTIAL:
                k = ctx.exp(-x * x)
                dk = 2 * x * x / th * k
            elif fam is Family.POWER_EXPONENTIAL:
                xq = x ** ctx.mpf(spec.q)
                k = ctx.exp(-xq)
                dk = ctx.mpf(spec.q) * xq / th * k
            elif fam is Family.RATIONAL_QUADRATIC:
                nu = ctx.mpf(spec.nu)
                base = 1 + x * x
                k = base ** (-nu)
                dk = 2 * nu * x * x / th * base ** (-nu - 1)
            elif fam is Family.SPHERICAL:
                if x < 1:
                    k = 1 - ctx.mpf(1.5) * x + x ** 3 / 2
                    dk = ctx.mpf(1.5) * x / th * (1 - x * x)
                else:
                    k, dk = ctx.zero, ctx.zero
            else:
                nu = ctx.mpf(spec.nu)
                z = ctx.mpf(_matern_scale_exact(spec, ctx)) * x
                c = ctx.mpf(2) ** (1 - nu) / ctx.gamma(nu)
                zn = z ** nu
                kv, kv1 = _mp_besselk_pair(ctx, spec.nu, z)
                k = c * zn * kv
                dk = z / th * c * zn * kv1
            res = (k, dk)
        cache[dist] = res
        return res

    flat = d.ravel()
    K = np.empty(flat.shape, dtype=object)
    dK = np.empty(flat.shape, dtype=object)
    for i, dist in enumerate(flat):
        K[i], dK[i] = one(dist if d.dtype == object else float(dist))
    return K.reshape(d.shape), dK.reshape(d.shape)


def _mp_besselk(ctx, order: float, z):
    """``K_order(z)`` in extended precision.

    ``mpmath.besselk`` handles integer orders by a limiting procedure that is
    slow; for integer order and ``z <= 2`` the ascending series with its
    logarithmic term is summed directly instead. Half-integer orders use the
    terminating closed form.
    """
    if 2 * order == int(2 * order) and order != int(order):
        n = int(order - 0.5)
        t = 1 / (2 * z)
        poly = sum(ctx.factorial(n + k) / (ctx.factorial(k) * ctx.factorial(n - k)) * t ** k
                   for k in range(n + 1))
        return ctx.sqrt(ctx.pi / (2 * z)) * ctx.exp(-z) * poly
    if order != int(order) or z > 2:
        return ctx.besselk(ctx.mpf(order), z)
    n = int(order)
    with ctx.extradps(10):
        h = z / 2
        q = h * h
        head = ctx.zero
        if n:
            fact = [ctx.factorial(j) for j in range(n)]
            head = sum(fact[n - k - 1] / fact[k] * (-q) ** k for k in range(n)) / (2 * h ** n)
        eps = ctx.eps
        psi_a = -ctx.euler          # psi(k + 1)
        psi_b = psi_a + sum(ctx.one / j for j in range(1, n + 1))  # psi(n + k + 1)
        term = 1 / ctx.factorial(n)  # q^k / (k! (n+k)!)
        i_sum = ctx.zero
        psi_sum = ctx.zero
        k = 0
        while True:
            i_sum += term
            psi_sum += (psi_a + psi_b) * term
            k += 1
            term = term * q / (k * (n + k))
            psi_a += ctx.one / k
            psi_b += ctx.one / (n + k)
            if abs(term) * (1 + abs(psi_a) + abs(psi_b)) < eps * abs(i_sum):
                break
        sign = -1 if n % 2 else 1
        hn = h ** n
        val = head - sign * ctx.log(h) * hn * i_sum + sign * hn * psi_sum / 2
    return +val


def _mp_besselk01(ctx, z):
    """``(K_0(z), K_1(z))`` from one pass of the ascending series (``z <= 2``)."""
    with ctx.extradps(10):
        h = z / 2
        q = h * h
        lh = ctx.log(h)
        eps = ctx.eps
        t = ctx.one          # q^k / (k!)^2
        psi = -ctx.euler     # psi(k + 1)
        i0 = s0 = i1 = s1 = ctx.zero
        k = 0
        while True:
            u = t / (k + 1)  # q^k / (k! (k+1)!)
            i0 += t
            s0 += psi * t
            i1 += u
            s1 += (2 * psi + ctx.one / (k + 1)) * u
            k += 1
            t = t * q / (k * k)
            psi += ctx.one / k
            if abs(t) * (1 + abs(psi)) < eps * abs(i0):
                break
        k0 = s0 - lh * i0
        k1 = 1 / (2 * h) + lh * h * i1 - h * s1 / 2
    return +k0, +k1


def _mp_besselk_pair(ctx, nu: float, z):
    """``(K_nu(z), K_|nu-1|(z))`` as needed by the Matérn kernel and its derivative.

    Integer orders with ``z <= 2`` share one series for ``K_0, K_1`` and climb
    with the (stable) upward recurrence ``K_{m+1} = K_{m-1} + 2m/z K_m``.
    """
    n = int(nu)
    if nu != n or n < 1 or z > 2:
        return _mp_besselk(ctx, nu, z), _mp_besselk(ctx, abs(nu - 1.0), z)
    with ctx.extradps(5 + 2 * n):
        lo, hi = _mp_besselk01(ctx, z)
        for m in range(1, n):
            lo, hi = hi, lo + 2 * m / z * hi
    return +hi, +lo


def _matern_scale_exact(spec: KernelSpec, ctx):
    if spec.parametrization is Parametrization.HW94:
        return 2 * ctx.sqrt(ctx.mpf(spec.nu))
    return ctx.one


# ---------------------------------------------------------------------------
# small-argument series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeriesExpansion:
    """Expansion ``K(x) = sum_k a_k x^{2k} + fractional/log terms``.

    For Matérn with noninteger ``nu`` the extra term is
    ``frac_coefficient * x^{frac_exponent}`` with ``frac_exponent = 2 nu``;
    integer coefficients stop at ``k = floor(nu)``.

    For Matérn with integer ``nu`` the integer coefficients stop at
    ``k = nu - 1`` and the ``x^{2 nu}`` term reads
    ``log_coefficient * x^{2 nu} * (-log x + log_constant)``: expressed on a
    correlation matrix this is ``a~ (log(theta) D^(nu) + D~^(nu)) / theta^{2nu}``
    with ``D~`` entries ``d^{2nu} (-0.5 log d^2 + log_constant)``.
    """

    family: Family
    coefficients: tuple[float, ...]
    frac_exponent: float | None = None
    frac_coefficient: float | None = None
    log_coefficient: float | None = None
    log_constant: float | None = None
    radius: float = math.inf
    note: str = ""
    extra: dict = field(default_factory=dict)

    def partial_sum(self, x, upto: int | None = None) -> np.ndarray:
        """Evaluate the truncated series at ``x = d / theta``."""
        x = np.asarray(x, dtype=float)
        coeffs = self.coefficients if upto is None else self.coefficients[: upto + 1]
        out = np.zeros_like(x)
        x2 = x * x
        for k, a in enumerate(coeffs):
            out = out + a * x2 ** k
        if self.frac_exponent is not None and (upto is None or upto >= len(self.coefficients) - 1):
            out = out + self.frac_coefficient * x ** self.frac_exponent
        if self.log_coefficient is not None and (upto is None or upto >= len(self.coefficients) - 1):
            with np.errstate(divide="ignore", invalid="ignore"):
                term = self.log_coefficient * np.where(
                    x > 0, x ** (2 * len(self.coefficients)) * (-np.log(x) + self.log_constant), 0.0
                )
            out = out + term
        return out


def _rq_coefficient(nu: float, k: int) -> float:
    # binomial series of (1 + s)^(-nu): rising factorial nu (nu+1) ... (nu+k-1)
    prod = 1.0
    for l in range(k):
        prod *= nu + l
    return (-1.0) ** k * prod / math.factorial(k)


def rq_coefficient_shifted(nu: float, k: int) -> float:
    """Coefficient with the product running to ``l = k`` (off by one).

    It does not reproduce ``(1 + s)^(-nu)``; the tests use it as a negative control.
    """
    prod = 1.0
    for l in range(k + 1):
        prod *= nu + l
    return (-1.0) ** k * prod / math.factorial(k)


def matern_c(spec: KernelSpec) -> float:
    """Constant ``c`` with ``(z/2)^2 = c x^2`` (``c = nu`` for HW94, 1/4 for BDOS)."""
    return spec.nu if spec.parametrization is Parametrization.HW94 else 0.25


def series_coefficients(spec: KernelSpec, k_max: int = 6, uncorrected_log_term: bool = False) -> SeriesExpansion:
    """Small-argument expansion coefficients of ``K``.

    ``uncorrected_log_term=True`` returns the integer-``nu`` Matérn log term
    without the ``1/m!`` factor and with doubled constants; these fail the
    Taylor oracle and are exposed only as a negative control for the tests.
    """
    if k_max < 0 or k_max > 12:
        raise ParameterDomainError("k_max must lie in [0, 12]")
    fam = spec.family
    if fam is Family.SQUARED_EXPONENTIAL or (fam is Family.POWER_EXPONENTIAL and spec.q == 2.0):
        coeffs = tuple((-1.0) ** k / math.factorial(k) for k in range(k_max + 1))
        return SeriesExpansion(Family.SQUARED_EXPONENTIAL, coeffs, note="entire series")
    if fam is Family.RATIONAL_QUADRATIC:
        coeffs = tuple(_rq_coefficient(spec.nu, k) for k in range(k_max + 1))
        return SeriesExpansion(fam, coeffs, radius=1.0, note="binomial series, |x| < 1")
    if fam is Family.MATERN:
        nu = spec.nu
        c = matern_c(spec)
        if not float(nu).is_integer():
            kmax = min(int(math.floor(nu)), k_max)
            coeffs = tuple(
                float((-1.0) ** k * special.gamma(nu - k) * c ** k / (math.factorial(k) * special.gamma(nu)))
                for k in range(kmax + 1)
            )
            a_nu = float(special.gamma(-nu) * c ** nu / special.gamma(nu))
            return SeriesExpansion(
                fam, coeffs, frac_exponent=2.0 * nu, frac_coefficient=a_nu,
                note="asymptotic: remainder O(x^{2(floor(nu)+1)})",
            )
        m = int(nu)
        coeffs = tuple(
            (-1.0) ** k * math.factorial(m - k - 1) * c ** k / (math.factorial(k) * math.factorial(m - 1))
            for k in range(m)
        )
        harmonic = sum(1.0 / l for l in range(1, m + 1))
        if uncorrected_log_term:
            a_log = (-1.0) ** m * 2.0 * c ** m / math.factorial(m - 1)
            const = -0.5 * math.log(c) - 2.0 * EULER_GAMMA + harmonic
        else:
            a_log = (-1.0) ** m * 2.0 * c ** m / (math.factorial(m - 1) * math.factorial(m))
            const = -0.5 * math.log(c) - EULER_GAMMA + 0.5 * harmonic
        return SeriesExpansion(
            fam, coeffs, log_coefficient=a_log, log_constant=const,
            note="asymptotic: remainder O(log(x) x^{2(nu+1)})",
        )
    raise UnsupportedKernelError(f"no smooth series expansion for {spec.label()}")


def log_companion_matrix(dist: np.ndarray, series: SeriesExpansion, nu: int) -> np.ndarray:
    """Matrix ``D~^(nu)``: zero diagonal, entries ``d^{2nu} (-0.5 log d^2 + const)``."""
    dist = np.asarray(dist, dtype=float)
    out = np.zeros_like(dist)
    off = dist > 0
    dd = dist[off]
    out[off] = dd ** (2 * nu) * (-0.5 * np.log(dd * dd) + series.log_constant)
    return out


# ---------------------------------------------------------------------------
# roughness metadata (g0, remainder order, q, D nonsingular when n > r + 2)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoughnessInfo:
    g0: str
    remainder: str
    q: float
    d_nonsingular: bool


def roughness_info(spec: KernelSpec) -> RoughnessInfo:
    fam = spec.family
    if fam is Family.SPHERICAL:
        return RoughnessInfo("-3/2 theta^-1", "O(theta^-3)", 1.0, True)
    if fam is Family.POWER_EXPONENTIAL and spec.q < 2.0:
        return RoughnessInfo(f"-theta^-{spec.q:g}", f"O(theta^-{2 * spec.q:g})", spec.q, True)
    if fam in (Family.SQUARED_EXPONENTIAL, Family.POWER_EXPONENTIAL):
        return RoughnessInfo("-theta^-2", "O(theta^-4)", 2.0, False)
    if fam is Family.RATIONAL_QUADRATIC:
        return RoughnessInfo(f"-{spec.nu:g} theta^-2", "O(theta^-4)", 2.0, False)
    nu = spec.nu
    if nu < 1.0:
        return RoughnessInfo(
            "Gamma(-nu) nu^nu / Gamma(nu) theta^(-2nu)", "O(theta^-2)", 2.0 * nu, True
        )
    if nu == 1.0:
        return RoughnessInfo("-2 theta^-2 log(theta)", "O(theta^-2)", 2.0, False)
    return RoughnessInfo(
        "-Gamma(nu-1) nu / Gamma(nu) theta^-2",
        f"O(theta^-{2 * min(2.0, nu):g})",
        2.0,
        False,
    )
