"""Linear algebra of the Universal Kriging model.

A `GpModel` bundles the design, the regression matrix ``H`` and an
orthonormal basis ``W`` of the orthogonal complement of ``span(H)``. For a
given length scale, `correlation_state` assembles ``Sigma_theta``, its
derivative and the projected matrix ``W^T Sigma_theta W`` together with their
Cholesky factors.

States come in two flavours: double precision (``dps=None``) and extended
precision, where every matrix is an object array of ``mpmath`` numbers tied
to a private context. The second flavour exists because ``Sigma_theta``
approaches the rank-one matrix ``11^T`` as ``theta`` grows, and the
information that the reference prior needs lives in eigenvalues of order
``theta^{-2k}``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import mpmath
import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import _linalg as la
from .errors import DesignError, IdentifiabilityError, InputError
from .kernels import KernelSpec, kernel_and_derivative

# ---------------------------------------------------------------------------
# design and basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DesignSet:
    """``n`` pairwise distinct points in ``R^r``."""

    points: np.ndarray
    distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DesignError(f"design must be an (n, r) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DesignError("design contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        dist = squareform(pdist(pts)) if pts.shape[0] > 1 else np.zeros((1, 1))
        if pts.shape[0] > 1 and np.min(dist[~np.eye(len(pts), dtype=bool)]) <= 0.0:
            raise DesignError("design points must be pairwise distinct")
        dist.setflags(write=False)
        object.__setattr__(self, "distances", dist)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def r(self) -> int:
        return self.points.shape[1]

    def offdiag_distances(self) -> np.ndarray:
        return self.distances[np.triu_indices(self.n, 1)]

    def median_distance(self) -> float:
        return float(np.median(self.offdiag_distances()))

    def max_distance(self) -> float:
        """Largest pairwise distance (0 for a single point)."""
        off = self.offdiag_distances()
        return float(np.max(off)) if off.size else 0.0

    def distances_mp(self, ctx) -> np.ndarray:
        """Pairwise distances recomputed from the (exact) coordinates in ``ctx``."""
        n = self.n
        P = la.to_mp(self.points, ctx)
        out = np.empty((n, n), dtype=object)
        for i in range(n):
            out[i, i] = ctx.zero
            for j in range(i + 1, n):
                diff = P[i] - P[j]
                out[i, j] = out[j, i] = ctx.sqrt(diff @ diff)
        return out

    @classmethod
    def from_csv(cls, path) -> "DesignSet":
        return cls(read_numeric_csv(path))


def read_numeric_csv(path) -> np.ndarray:
    """Read a numeric CSV whose first row may be a header."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if not rows:
        raise InputError(f"{path} is empty")

    def parse(row):
        return [float(c) for c in row]

    try:
        first = parse(rows[0])
        body = [first] + [parse(r) for r in rows[1:]]
    except ValueError:
        try:
            body = [parse(r) for r in rows[1:]]
        except ValueError as exc:
            raise InputError(f"{path}: non-numeric entry ({exc})") from None
    if not body:
        raise InputError(f"{path} has a header but no data")
    width = {len(r) for r in body}
    if len(width) != 1:
        raise InputError(f"{path}: rows have different lengths")
    arr = np.array(body, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: non-finite values")
    return arr


@dataclass(frozen=True)
class RegressionBasis:
    """Monomial basis ``f_j(x) = prod_i x_i^{e_ji}``.

    ``exponents`` holds one exponent tuple per basis function; the empty tuple
    of tuples means ``p = 0``.
    """

    exponents: tuple[tuple[int, ...], ...] = ()

    @property
    def p(self) -> int:
        return len(self.exponents)

    @classmethod
    def none(cls) -> "RegressionBasis":
        return cls(())

    @classmethod
    def constant(cls, r: int) -> "RegressionBasis":
        return cls(((0,) * r,))

    @classmethod
    def linear(cls, r: int) -> "RegressionBasis":
        rows = [(0,) * r] + [tuple(int(i == j) for i in range(r)) for j in range(r)]
        return cls(tuple(rows))

    @classmethod
    def custom(cls, exponents: Sequence[Sequence[int]]) -> "RegressionBasis":
        exps = tuple(tuple(int(e) for e in row) for row in exponents)
        if any(e < 0 for row in exps for e in row):
            raise InputError("monomial exponents must be nonnegative integers")
        if len({len(row) for row in exps}) > 1:
            raise InputError("all monomials must have the same number of exponents")
        return cls(exps)

    @classmethod
    def from_keyword(cls, spec, r: int) -> "RegressionBasis":
        """``"none" | "constant" | "linear"`` or a list of exponent lists."""
        if isinstance(spec, str):
            key = spec.strip().lower()
            if key in ("none", "zero"):
                return cls.none()
            if key == "constant":
                return cls.constant(r)
            if key == "linear":
                return cls.linear(r)
            raise InputError(f"unknown basis keyword {spec!r}")
        return cls.custom(spec)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n, r = points.shape
        H = np.ones((n, self.p))
        for j, exps in enumerate(self.exponents):
            if len(exps) != r:
                raise InputError(f"monomial {exps} does not match dimension r={r}")
            for i, e in enumerate(exps):
                if e:
                    H[:, j] *= points[:, i] ** e
        if not np.all(np.isfinite(H)):
            raise InputError("basis functions are not finite at the design points")
        return H

    def to_config(self):
        return [list(e) for e in self.exponents]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _fix_signs(W: np.ndarray) -> np.ndarray:
    W = W.copy()
    for j in range(W.shape[1]):
        nz = np.flatnonzero(np.abs(W[:, j]) > 1e-14)
        if nz.size and W[nz[0], j] < 0:
            W[:, j] = -W[:, j]
    return W


@dataclass(frozen=True, eq=False)
class GpModel:
    design: DesignSet
    basis: RegressionBasis
    kernel: KernelSpec
    H: np.ndarray
    W: np.ndarray
    _mp_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def p(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.n - self.p

    def logdet_HtH(self) -> float:
        if self.p == 0:
            return 0.0
        return float(np.linalg.slogdet(self.H.T @ self.H)[1])

    def mp_parts(self, ctx):
        """``(H, W, distances)`` as object arrays at ``ctx.dps`` (cached)."""
        key = ctx.prec
        hit = self._mp_cache.get(key)
        if hit is None:
            Hm = la.to_mp(self.H, ctx)
            if self.p == 0:
                Wm = la.to_mp(self.W, ctx)
            else:
                Wm = la.orthonormal_complement_mp(self.H, self.W, ctx)
            hit = (Hm, Wm, self.design.distances_mp(ctx))
            self._mp_cache[key] = hit
        return hit

    def with_kernel(self, kernel: KernelSpec) -> "GpModel":
        return GpModel(self.design, self.basis, kernel, self.H, self.W)


def complement_basis(H: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``span(H)^perp`` from the SVD, signs normalised."""
    n, p = H.shape
    if p == 0:
        return np.eye(n)
    U, _, _ = np.linalg.svd(H, full_matrices=True)
    return _fix_signs(U[:, p:])


def check_rank(H: np.ndarray) -> None:
    n, p = H.shape
    if p == 0:
        return
    if p >= n:
        raise IdentifiabilityError(f"need p < n, got p={p}, n={n}")
    s = np.linalg.svd(H, compute_uv=False)
    if not s[-1] > 1e-10 * s[0] * max(n, p):
        raise IdentifiabilityError(
            f"regression matrix is rank deficient (singular values {s[0]:.3e} ... {s[-1]:.3e})"
        )


def build_model(design: DesignSet, basis: RegressionBasis, kernel: KernelSpec) -> GpModel:
    """Evaluate ``H``, check its rank and build ``W``."""
    if design.n < 2:
        raise DesignError("need at least two design points")
    H = basis.evaluate(design.points)
    check_rank(H)
    W = complement_basis(H)
    H.setflags(write=False)
    W.setflags(write=False)
    return GpModel(design, basis, kernel, H, W)


# ---------------------------------------------------------------------------
# correlation state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrelationState:
    """All ``theta``-dependent matrices of the model.

    ``ctx`` is ``None`` in double precision, otherwise the private ``mpmath``
    context whose numbers fill the object arrays.
    """

    theta: float
    sigma: np.ndarray
    chol: np.ndarray
    dsigma: np.ndarray
    sigma_w: np.ndarray
    chol_w: np.ndarray
    W: np.ndarray
    H: np.ndarray
    ctx: object = None

    @property
    def dps(self) -> int | None:
        return None if self.ctx is None else self.ctx.dps

    @property
    def unit_roundoff(self) -> float:
        return 2.0 ** -52 if self.ctx is None else 10.0 ** (-self.ctx.dps)

    def w_eigenvalues(self) -> np.ndarray:
        """Eigenvalues ``v_1 >= ... >= v_{n-p}`` of ``W^T Sigma W`` as floats."""
        return la.eigvalsh(self.sigma_w, self.ctx)[::-1]

    def logdet_sigma(self):
        return la.logdet_chol(self.chol, self.ctx)

    def logdet_sigma_w(self):
        return la.logdet_chol(self.chol_w, self.ctx)


def make_context(dps: int):
    ctx = mpmath.MPContext()
    ctx.dps = int(dps)
    return ctx


def correlation_state(model: GpModel, theta: float, dps: int | None = None) -> CorrelationState:
    """Assemble ``Sigma_theta``, ``dSigma/dtheta`` and ``W^T Sigma W``.

    Parameters
    ----------
    model : GpModel
    theta : float
        Correlation length, > 0.
    dps : int, optional
        Decimal digits for the extended-precision path; double precision when
        omitted.

    Raises
    ------
    NotPositiveDefiniteError
        If either Cholesky factorisation fails. There is no jitter: callers
        that expect extreme ``theta`` should retry with more digits.
    """
    theta = float(theta)
    if dps is None:
        K, dK = kernel_and_derivative(model.kernel, model.design.distances, theta)
        K = np.asarray(K, dtype=float)
        dK = np.asarray(dK, dtype=float)
        W, H, ctx = model.W, model.H, None
    else:
        ctx = make_context(dps)
        H, W, dist = model.mp_parts(ctx)
        K, dK = kernel_and_derivative(model.kernel, dist, theta, ctx)
    chol = la.cholesky(K, ctx, theta=theta)
    sw = W.T @ K @ W
    sw = (sw + sw.T) / 2
    chol_w = la.cholesky(sw, ctx, theta=theta)
    return CorrelationState(theta, K, chol, dK, sw, chol_w, W, H, ctx)


def projector_Q(state: CorrelationState, model: GpModel | None = None) -> np.ndarray:
    """``Q = I - H (H^T Sigma^-1 H)^-1 H^T Sigma^-1``; identity when ``p = 0``."""
    H = state.H
    n, p = H.shape
    ident = la.eye(n, state.ctx)
    if p == 0:
        return ident
    SiH = la.cho_solve(state.chol, H)
    G = H.T @ SiH
    LG = la.cholesky((G + G.T) / 2, state.ctx, theta=state.theta)
    # H G^{-1} H^T Sigma^{-1} = H G^{-1} (Sigma^{-1} H)^T
    return ident - H @ la.cho_solve(LG, SiH.T)


def sigma_inverse(state: CorrelationState) -> np.ndarray:
    return la.inverse_from_chol(state.chol, state.ctx)


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------


def lemma_projection_residual(sigma, H, W, ctx=None):
    """``(||W (W^T S W)^-1 W^T - S^-1 Q||_F, ||S^-1||_F)`` for any SPD ``S``."""
    L = la.cholesky(sigma, ctx)
    Si = la.inverse_from_chol(L, ctx)
    n, p = H.shape
    if p:
        SiH = la.cho_solve(L, H)
        G = H.T @ SiH
        Q = la.eye(n, ctx) - H @ la.cho_solve(la.cholesky((G + G.T) / 2, ctx), SiH.T)
    else:
        Q = la.eye(n, ctx)
    Lw = la.cholesky(W.T @ sigma @ W, ctx)
    lhs = W @ la.inverse_from_chol(Lw, ctx) @ W.T
    rhs = Si @ Q
    res = la.frob2(lhs - rhs)
    nrm = la.frob2(Si)
    return math.sqrt(float(res)), math.sqrt(float(nrm))


def logdet_identity_terms(sigma, H, W, ctx=None):
    """Return ``(log|S|, log|W^T S W| + log|H^T H| - log|H^T S^-1 H|)``.

    The two numbers agree for every SPD ``S``; the ``H^T H`` term enters with
    a plus sign (it vanishes only for orthonormal ``H``).
    """
    L = la.cholesky(sigma, ctx)
    lhs = la.logdet_chol(L, ctx)
    Lw = la.cholesky(W.T @ sigma @ W, ctx)
    rhs = la.logdet_chol(Lw, ctx)
    if H.shape[1]:
        G = H.T @ la.cho_solve(L, H)
        rhs = rhs + la.logdet_chol(la.cholesky(H.T @ H, ctx), ctx) - la.logdet_chol(la.cholesky((G + G.T) / 2, ctx), ctx)
    return float(lhs), float(rhs)


@dataclass(frozen=True)
class IdentityReport:
    """Residuals of the algebraic identities used by the prior and likelihood.

    ``projection`` is ``||W (W^T S W)^{-1} W^T - S^{-1} Q||_F / ||S^{-1}||_F``,
    ``logdet`` the absolute log-determinant mismatch and ``prior_forms`` the
    relative difference between the two expressions of the reference prior.
    """

    theta: float
    projection: float
    logdet: float
    prior_forms: float


def verify_identities(state: CorrelationState, model: GpModel) -> IdentityReport:
    from .bayes import log_reference_prior

    H, W, ctx = state.H, state.W, state.ctx
    res, nrm = lemma_projection_residual(state.sigma, H, W, ctx)
    a, b = logdet_identity_terms(state.sigma, H, W, ctx)
    lq = log_reference_prior(model, state, form="Q")
    lw = log_reference_prior(model, state, form="W")
    if math.isinf(lq) and math.isinf(lw):
        pf = 0.0
    else:
        pf = abs(math.expm1(lq - lw))
    return IdentityReport(state.theta, res / nrm, abs(a - b), pf)


def random_spd(n: int, rng: np.random.Generator, cond: float = 1e3) -> np.ndarray:
    """Random SPD matrix with prescribed condition number (test helper)."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, 1.0 / cond, n)
    S = (Q * ev) @ Q.T
    return (S + S.T) / 2


def monomial_exponents(r: int, degree: int) -> list[tuple[int, ...]]:
    """All monomials of total degree ``<= degree`` in ``r`` variables."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.product(range(total + 1), repeat=r):
            if sum(combo) == total:
                out.append(combo)
    return out
