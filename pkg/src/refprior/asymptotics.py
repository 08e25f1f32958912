"""Structural diagnostics of the large-``theta`` regime.

The correlation matrix of a smooth kernel admits an expansion

    Sigma_theta = sum_k a_k theta^{-2k} D^(k)  (+ fractional / log terms for Matérn)

with ``D^(k)`` the matrix of distances raised to the power ``2k``. How fast
``W^T Sigma_theta W`` degenerates - and therefore how fast the reference prior
and the integrated likelihood decay - is decided by which of the projected
matrices ``W^T D^(k) W`` vanish and how their kernels intersect. This module
computes those matrices, classifies the case, predicts the tail exponents,
checks that an observation vector is not degenerate, and measures the
exponents empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _linalg as la
from .errors import AmbiguousRankError, InputError, UnsupportedKernelError
from .gp import DesignSet, GpModel
from .kernels import Family, KernelSpec, log_companion_matrix, series_coefficients

RANK_RTOL = 1e-9
GAP_MIN = 10.0

# ---------------------------------------------------------------------------
# distance matrices and signed spectra
# ---------------------------------------------------------------------------


def distance_power_matrix(design: DesignSet, exponent: float) -> np.ndarray:
    """Entries ``d(i, j) ** exponent`` with a zero diagonal."""
    D = np.array(design.distances, dtype=float)
    out = np.where(D > 0, D ** exponent, 0.0)
    np.fill_diagonal(out, 0.0)
    return out


@dataclass(frozen=True)
class SignedSpectrum:
    n_positive: int
    n_negative: int
    n_zero: int
    eigenvalues: tuple[float, ...]
    tolerance: float

    @property
    def rank(self) -> int:
        return self.n_positive + self.n_negative


def signed_spectrum(matrix, tol: float | None = None, ulp_factor: float = 64.0) -> SignedSpectrum:
    """Count positive, negative and (numerically) zero eigenvalues.

    The default tolerance is ``dim * ulp_factor * eps * max|lambda|``.
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError("signed_spectrum needs a square matrix")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(M)))):
        raise InputError("signed_spectrum needs a symmetric matrix")
    ev = np.linalg.eigvalsh((M + M.T) / 2)
    scale = float(np.max(np.abs(ev))) if ev.size else 0.0
    if tol is None:
        tol = M.shape[0] * ulp_factor * np.finfo(float).eps * scale
    pos = int(np.sum(ev > tol))
    neg = int(np.sum(ev < -tol))
    return SignedSpectrum(pos, neg, len(ev) - pos - neg, tuple(float(v) for v in ev), float(tol))


# ---------------------------------------------------------------------------
# series slots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    """One term ``coef * rate(theta) * M`` of the large-``theta`` expansion.

    ``order`` is the power of ``1/theta`` and ``log_power`` the power of
    ``log(theta)`` in the rate; ``matrix`` already includes the coefficient.
    """

    tag: str
    order: float
    log_power: int
    coefficient: float
    matrix: np.ndarray


def _check_kernel(kernel: KernelSpec) -> KernelSpec:
    fam = kernel.family
    if fam is Family.POWER_EXPONENTIAL and kernel.q == 2.0:
        return KernelSpec.squared_exponential()
    if fam in (Family.SQUARED_EXPONENTIAL, Family.RATIONAL_QUADRATIC):
        return kernel
    if fam is Family.MATERN and kernel.nu >= 1.0:
        return kernel
    raise UnsupportedKernelError(f"expansion diagnostics need SE, RQ or Matérn nu >= 1, got {kernel.label()}")


def expansion_slots(design: DesignSet, kernel: KernelSpec, k_max: int = 12) -> list[Slot]:
    """Ordered expansion terms, distances rescaled so the largest is 1.

    Rescaling multiplies each ``D^(k)`` by a positive constant and adds a
    multiple of ``D^(nu)`` to the log companion, neither of which changes
    any kernel or rank below.
    """
    kernel = _check_kernel(kernel)
    dist = np.array(design.distances) / design.max_distance()
    ser = series_coefficients(kernel, k_max=k_max)
    slots: list[Slot] = []

    def dk(k: float) -> np.ndarray:
        out = np.where(dist > 0, dist ** (2 * k), 0.0)
        if k == 0:
            out = np.ones_like(dist)
        return out

    if kernel.family is not Family.MATERN:
        for k, a in enumerate(ser.coefficients):
            slots.append(Slot(f"D({k})", 2.0 * k, 0, float(a), a * dk(k)))
        return slots
    nu = kernel.nu
    for k, a in enumerate(ser.coefficients):
        slots.append(Slot(f"D({k})", 2.0 * k, 0, float(a), a * dk(k)))
    if ser.frac_exponent is not None:
        slots.append(Slot("D(nu)", 2.0 * nu, 0, ser.frac_coefficient, ser.frac_coefficient * dk(nu)))
        # integer powers beyond floor(nu) keep the sequence going if needed
        for k in range(int(math.floor(nu)) + 1, k_max + 1):
            slots.append(Slot(f"D({k})", 2.0 * k, 0, math.nan, dk(k)))
    else:
        m = int(nu)
        at = ser.log_coefficient
        slots.append(Slot("D(nu)", 2.0 * m, 1, at, at * dk(m)))
        slots.append(Slot("Dtilde(nu)", 2.0 * m, 0, at, at * log_companion_matrix(dist, ser, m)))
        for k in range(m + 1, k_max + 1):
            slots.append(Slot(f"D({k})", 2.0 * k, 0, math.nan, dk(k)))
    return slots


def _project(W: np.ndarray, M: np.ndarray) -> np.ndarray:
    P = W.T @ M @ W
    return (P + P.T) / 2


def _null_basis(M: np.ndarray, V: np.ndarray, ref: float) -> np.ndarray:
    """Orthonormal basis of ``{V c : M V c = 0}`` (columns of ``V`` orthonormal).

    Raises `AmbiguousRankError` when the singular values straddle the
    threshold ``RANK_RTOL * ref`` with a gap ratio below `GAP_MIN`.
    """
    if V.shape[1] == 0:
        return V
    MV = M @ V
    _, s, vt = np.linalg.svd(MV, full_matrices=True)
    s_full = np.zeros(V.shape[1])
    s_full[: s.size] = s
    thr = RANK_RTOL * ref
    above = s_full[s_full > thr]
    below = s_full[s_full <= thr]
    if above.size and below.size:
        gap = above.min() / max(below.max(), 1e-300)
    elif above.size:
        gap = above.min() / thr
    else:
        gap = thr / max(below.max(), 1e-300)
    if gap < GAP_MIN:
        raise AmbiguousRankError(f"numerical rank is ambiguous (gap ratio {gap:.2f})", gap_ratio=gap)
    null = vt[s_full > thr].shape[0]
    C = vt[above.size:].T  # right singular vectors for the discarded values
    return V @ C


def _is_null(P: np.ndarray, ref: float) -> bool:
    nrm = float(np.linalg.norm(P, 2)) if P.size else 0.0
    return nrm <= RANK_RTOL * ref


def _rank(P: np.ndarray, ref: float) -> int:
    I = np.eye(P.shape[0])
    return P.shape[0] - _null_basis(P, I, ref).shape[1]


def intersection_depth(model: GpModel, kernel: KernelSpec | None = None):
    """Nested kernels ``N_k = cap_{j<=k} Ker(W^T M_j W)`` along the expansion.

    Returns ``(dims, slots)`` where ``dims[k] = dim N_k``; the sequence stops
    at the first trivial intersection.
    """
    kernel = kernel or model.kernel
    slots = expansion_slots(model.design, kernel)
    m = model.m
    V = np.eye(m)
    dims = []
    used = []
    for sl in slots:
        P = _project(model.W, sl.matrix)
        ref = max(float(np.linalg.norm(sl.matrix, 2)), 1e-300)
        V = _null_basis(P, V, ref)
        dims.append(V.shape[1])
        used.append(sl)
        if V.shape[1] == 0:
            break
    return dims, used


def compressed_depth(model: GpModel, kernel: KernelSpec | None = None) -> tuple[int, list[int]]:
    """Depth of the nested chain of compressed kernels.

    ``V_0 = R^{n-p}`` and ``V_k`` is the null space of ``V_{k-1}^T (W^T M_k W)
    V_{k-1}`` inside ``V_{k-1}``: each term is only seen on the directions
    that all previous terms annihilate as quadratic forms. Returns the first
    ``k`` with ``V_k = {0}`` and the dimensions along the way. The smallest
    eigenvalue of ``W^T Sigma_theta W`` decays like the order of slot ``k``.
    """
    kernel = kernel or model.kernel
    slots = expansion_slots(model.design, kernel)
    V = np.eye(model.m)
    dims = []
    for k, sl in enumerate(slots):
        P = _project(model.W, sl.matrix)
        ref = max(float(np.linalg.norm(sl.matrix, 2)), 1e-300)
        V = _null_basis(V.T @ P, V, ref)
        dims.append(V.shape[1])
        if V.shape[1] == 0:
            return k, dims
    raise AmbiguousRankError("compressed kernel chain did not reach the trivial space")


# ---------------------------------------------------------------------------
# expansion report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionReport:
    """Large-``theta`` structure of ``W^T Sigma_theta W`` and the predicted tails.

    ``g`` and ``g_star`` are strings such as ``"theta^-4"`` or
    ``"log(theta) theta^-2"``. Predicted exponents are powers of ``theta``;
    ``*_log_power`` give the accompanying power of ``log(theta)``.
    """

    kernel: str
    k1: str | None
    k2: str | None
    D: np.ndarray
    D_star: np.ndarray
    D_tag: str
    D_star_tag: str
    g: str
    g_star: str
    l: float
    case: str
    predicted_prior_exponent: float
    predicted_lik_exponent: float
    prior_log_power: float = 0.0
    lik_log_power: float = 0.0
    log_branch: bool = False
    rank_WDW: int = 0
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "k1": self.k1,
            "k2": self.k2,
            "D": self.D_tag,
            "D_star": self.D_star_tag,
            "g": self.g,
            "g_star": self.g_star,
            "l": self.l,
            "case": self.case,
            "predicted_prior_exponent": self.predicted_prior_exponent,
            "prior_log_power": self.prior_log_power,
            "predicted_lik_exponent": self.predicted_lik_exponent,
            "lik_log_power": self.lik_log_power,
            "log_branch": self.log_branch,
            "rank_WDW": self.rank_WDW,
            "notes": list(self.notes),
        }


def _slot_key(tag: str) -> str:
    """``"D(2)" -> "2"``, ``"D(nu)" -> "nu"``, ``"Dtilde(nu)" -> "tilde-nu"``."""
    inner = tag[tag.index("(") + 1:-1]
    return f"tilde-{inner}" if tag.startswith("Dtilde") else inner


def _fmt_rate(order: float, log_power: int = 0) -> str:
    parts = []
    if log_power:
        parts.append("log(theta)" if log_power == 1 else f"log(theta)^{log_power}")
    if order:
        parts.append(f"theta^-{order:g}")
    return " ".join(parts) if parts else "1"


def _classify(WD, WDs, ref, ref_s):
    """Return ``("1a" | "1b" | "2", rank(W'DW))``."""
    m = WD.shape[0]
    K = _null_basis(WD, np.eye(m), ref)
    rank = m - K.shape[1]
    if K.shape[1] == 0:
        return "1a", rank
    if WDs is None:
        return "2", rank
    K2 = _null_basis(WDs, K, ref_s)
    return ("1b" if K2.shape[1] == 0 else "2"), rank


def expansion_report(model: GpModel, kernel: KernelSpec | None = None) -> ExpansionReport:
    """Classify the large-``theta`` case and fill in the predicted tail exponents."""
    kernel = _check_kernel(kernel or model.kernel)
    if model.m < 2:
        raise InputError("expansion_report needs n - p >= 2")
    slots = expansion_slots(model.design, kernel)
    W = model.W
    proj = [_project(W, s.matrix) for s in slots]
    refs = [max(float(np.linalg.norm(s.matrix, 2)), 1e-300) for s in slots]
    nonnull = [not _is_null(P, r) for P, r in zip(proj, refs)]
    fam = kernel.family
    notes: list[str] = []

    if fam is not Family.MATERN:
        i1 = nonnull.index(True)
        rest = [j for j in range(i1 + 1, len(slots)) if nonnull[j]]
        i2 = rest[0] if rest else None
        case, rank = _classify(proj[i1], proj[i2] if i2 is not None else None, refs[i1],
                               refs[i2] if i2 is not None else 1.0)
        k1, k2 = i1, (i2 if i2 is not None else i1 + 1)
        if case == "1a":
            k2 = k1 + 1
            i2 = k2
        l = float(k2 - k1)
        if case == "2":
            special = _is_special(proj, refs, k1)
            case = "2-special" if special else "2-usual"
        exps = {"1a": (-2 * l - 1, 0.0), "1b": (-1.0, -l), "2-usual": (1.0, -3.0), "2-special": (-1.0, -1.0)}[case]
        g_star = "a b theta^-... (two-term g, special)" if case == "2-special" else _fmt_rate(2 * l)
        return ExpansionReport(
            kernel.label(), str(k1), str(k2), slots[i1].matrix, slots[i2].matrix,
            slots[i1].tag, slots[i2].tag, _fmt_rate(2 * k1), g_star, l, case, exps[0], exps[1],
            rank_WDW=rank, notes=tuple(notes),
        )

    nu = kernel.nu
    if not kernel.integer_nu:
        nfl = int(math.floor(nu))
        # slots: D(0..floor), D(nu), D(floor+1), ...
        int_idx = list(range(nfl + 1))
        frac_idx = nfl + 1
        k1_idx = next((j for j in int_idx if nonnull[j]), None)
        if k1_idx is None:
            D_idx = frac_idx
            g_order = 2 * nu
            l = nfl + 1 - nu
            case, rank = _classify(proj[D_idx], None, refs[D_idx], 1.0)
            notes.append("k1 does not exist: D = a_nu D(nu); l = floor(nu) + 1 - nu")
            return ExpansionReport(
                kernel.label(), None, None, slots[D_idx].matrix, np.zeros_like(slots[D_idx].matrix),
                "D(nu)", "0", _fmt_rate(g_order), _fmt_rate(2 * l), l, case,
                -2 * l - 1 if case == "1a" else -1.0, 0.0 if case == "1a" else -l,
                rank_WDW=rank, notes=tuple(notes),
            )
        cand = [j for j in list(range(k1_idx + 1, nfl + 1)) + [frac_idx] if nonnull[j]]
        sing_case, rank = _classify(proj[k1_idx], None, refs[k1_idx], 1.0)
        if sing_case == "1a":
            i2 = k1_idx + 1 if k1_idx < nfl else frac_idx
        else:
            i2 = cand[0] if cand else frac_idx
        case, rank = _classify(proj[k1_idx], proj[i2], refs[k1_idx], refs[i2])
        k2_order = slots[i2].order / 2
        l = k2_order - k1_idx
        exps = {"1a": (-2 * l - 1, 0.0), "1b": (-1.0, -l), "2": (-1.0, -l)}[case]
        return ExpansionReport(
            kernel.label(), str(k1_idx), _slot_key(slots[i2].tag), slots[k1_idx].matrix, slots[i2].matrix,
            slots[k1_idx].tag, slots[i2].tag, _fmt_rate(2 * k1_idx), _fmt_rate(2 * l), l, case,
            exps[0], exps[1], rank_WDW=rank, notes=tuple(notes),
        )

    # integer nu: slots D(0..nu-1), D(nu) [log], Dtilde(nu), D(nu+1), ...
    mnu = int(nu)
    i_nu, i_tl = mnu, mnu + 1
    k1_idx = next((j for j in range(mnu + 1) if nonnull[j]), None)
    if k1_idx is None:
        D_idx = i_tl
        case, rank = _classify(proj[D_idx], None, refs[D_idx], 1.0)
        notes.append("k1 does not exist: D = a~ Dtilde(nu), g* = theta^-1")
        l = 0.5
        return ExpansionReport(
            kernel.label(), None, None, slots[D_idx].matrix, np.zeros_like(slots[D_idx].matrix),
            "Dtilde(nu)", "0", _fmt_rate(2 * mnu), "theta^-1", l, case,
            -2.0 if case == "1a" else -1.0, 0.0 if case == "1a" else -l,
            rank_WDW=rank, log_branch=True, notes=tuple(notes),
        )
    nonsing, rank = _classify(proj[k1_idx], None, refs[k1_idx], 1.0)
    g = _fmt_rate(2 * k1_idx, 1 if k1_idx == mnu else 0)
    if nonsing == "1a":
        if k1_idx < mnu - 1:
            i2, l, gs_log, gs = k1_idx + 1, 1.0, 0, "theta^-2"
        elif k1_idx == mnu - 1:
            i2, l, gs_log, gs = i_nu, 1.0, 1, "log(theta) theta^-2"
        else:
            i2, l, gs_log, gs = i_tl, 0.0, -1, "log(theta)^-1"
    else:
        if k1_idx < mnu:
            cand = [j for j in range(k1_idx + 1, mnu + 1) if nonnull[j]]
            if cand:
                i2 = cand[0]
                l = float(i2 - k1_idx)
                gs_log = 1 if i2 == mnu else 0
            else:
                i2, l, gs_log = i_tl, float(mnu - k1_idx), 0
            gs = _fmt_rate(2 * l, gs_log)
        else:
            i2, l, gs_log, gs = i_tl, 0.0, -1, "log(theta)^-1"
    case, rank = _classify(proj[k1_idx], proj[i2], refs[k1_idx], refs[i2])
    pure_log = gs_log == -1
    if pure_log:
        if case == "1a":
            exps, logs = (-1.0, 0.0), (-2.0, 0.0)
        elif case == "1b":
            exps, logs = (-1.0, 0.0), (-1.0, -0.5)
        else:
            notes.append("case 2 is excluded for this arm; bound of case 1b used")
            exps, logs = (-1.0, 0.0), (-1.0, -0.5)
    else:
        if case == "1a":
            exps, logs = (-2 * l - 1, 0.0), (float(gs_log), 0.0)
        else:
            exps, logs = (-1.0, -l), (0.0, 0.5 * gs_log)
    return ExpansionReport(
        kernel.label(), str(k1_idx), _slot_key(slots[i2].tag), slots[k1_idx].matrix, slots[i2].matrix,
        slots[k1_idx].tag, slots[i2].tag, g, gs, l, case, exps[0], exps[1], logs[0], logs[1],
        log_branch=True, rank_WDW=rank, notes=tuple(notes),
    )


def _is_special(proj, refs, k1) -> bool:
    """Rank-one ``W'D(k1)W`` with ``W'D(k1+1)W`` proportional to it and a trivial triple kernel."""
    if k1 + 2 >= len(proj):
        return False
    P0, P1, P2 = proj[k1], proj[k1 + 1], proj[k1 + 2]
    if _is_null(P1, refs[k1 + 1]):
        return False
    if _rank(P0, refs[k1]) != 1:
        return False
    b = float(np.sum(P1 * P0) / np.sum(P0 * P0))
    if np.linalg.norm(P1 - b * P0, 2) > RANK_RTOL * refs[k1 + 1] * 1e3:
        return False
    m = P0.shape[0]
    K = _null_basis(P0, np.eye(m), refs[k1])
    K = _null_basis(P1, K, refs[k1 + 1])
    K = _null_basis(P2, K, refs[k1 + 2])
    return K.shape[1] == 0


# ---------------------------------------------------------------------------
# nondegeneracy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NondegeneracyReport:
    passes: bool
    margin: float
    critical_subspace_dim: int
    depth: int
    threshold: float = 1e-8

    def to_dict(self) -> dict:
        return {
            "passes": self.passes,
            "margin": self.margin,
            "critical_subspace_dim": self.critical_subspace_dim,
            "depth": self.depth,
            "threshold": self.threshold,
        }


def critical_subspace(model: GpModel, kernel: KernelSpec | None = None) -> tuple[np.ndarray, int]:
    """Basis (in ``R^{n-p}``) of the last nontrivial ``N_k`` and the depth ``k'``."""
    kernel = kernel or model.kernel
    slots = expansion_slots(model.design, kernel)
    V = np.eye(model.m)
    prev = V
    for k, sl in enumerate(slots):
        P = _project(model.W, sl.matrix)
        ref = max(float(np.linalg.norm(sl.matrix, 2)), 1e-300)
        V = _null_basis(P, V, ref)
        if V.shape[1] == 0:
            return prev, k
        prev = V
    raise AmbiguousRankError("kernel intersection did not reach the trivial space")


def nondegeneracy_check(model: GpModel, kernel: KernelSpec | None, y, threshold: float = 1e-8) -> NondegeneracyReport:
    """Relative size of the component of ``W^T y`` in the critical subspace."""
    kernel = kernel or model.kernel
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != model.n:
        raise InputError(f"y has {y.shape[0]} entries, design has {model.n} points")
    wy = model.W.T @ y
    V, depth = critical_subspace(model, kernel)
    nrm = float(np.linalg.norm(wy))
    if nrm <= 64 * np.finfo(float).eps * math.sqrt(model.n) * max(float(np.linalg.norm(y)), 1e-300):
        return NondegeneracyReport(False, 0.0, V.shape[1], depth, threshold)
    margin = float(np.linalg.norm(V.T @ wy)) / nrm
    margin = min(max(margin, 0.0), 1.0)
    return NondegeneracyReport(margin > threshold, margin, V.shape[1], depth, threshold)


# ---------------------------------------------------------------------------
# empirical exponents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailFit:
    slope: float
    intercept: float
    residual_rms: float
    loglog_coef: float | None = None


def fit_tail_slope(thetas, logf, loglog=None) -> TailFit:
    """Least-squares slope of ``log f`` against ``log theta``.

    Parameters
    ----------
    thetas, logf : array_like
        At least 8 points spanning at least two decades.
    loglog : None, "fit" or float
        ``"fit"`` adds ``log(log(theta))`` as a second regressor; a number
        removes a known ``log(theta)**loglog`` factor before fitting.
    """
    t = np.asarray(thetas, dtype=float)
    y = np.asarray(logf, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise InputError("thetas and logf must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y)) and np.all(t > 0)):
        raise InputError("fit_tail_slope needs finite samples and positive theta")
    if t.size < 8 or math.log10(t.max() / t.min()) < 2 - 1e-9:
        raise InputError("fit_tail_slope needs at least 8 nodes spanning two decades")
    u = np.log(t)
    cols = [u, np.ones_like(u)]
    if isinstance(loglog, str):
        if loglog != "fit":
            raise InputError(f"unknown loglog option {loglog!r}")
        if np.any(t <= 1.0):
            raise InputError("log-log regressor needs theta > 1")
        cols.append(np.log(u))
    elif loglog is not None:
        if np.any(t <= 1.0):
            raise InputError("log-power offset needs theta > 1")
        y = y - float(loglog) * np.log(u)
    A = np.vstack(cols).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return TailFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res ** 2))),
                   float(coef[2]) if len(coef) > 2 else None)


@dataclass(frozen=True)
class InverseNormReport:
    """Growth exponent of ``||(W^T Sigma_theta W)^{-1}||``.

    ``predicted`` uses the compressed-chain depth (`compressed_depth`);
    ``predicted_intersection`` uses the first trivial intersection of the
    full kernels ``Ker(W^T D_k W)``, which can be smaller (e.g. for points
    on a line).
    """

    measured: float
    predicted: float
    thetas: tuple[float, ...]
    log_norms: tuple[float, ...]
    truncated: bool = False
    depth: int | None = None
    predicted_intersection: float | None = None
    depth_intersection: int | None = None


def inverse_norm_exponent(model: GpModel, kernel: KernelSpec | None = None, thetas=None) -> InverseNormReport:
    """Measured growth exponent of ``||(W^T Sigma_theta W)^{-1}||_2``.

    Predicted ceiling: ``2 nu`` for Matérn; for SE and RQ the order of the
    expansion slot at which the compressed kernel chain becomes trivial.
    """
    from .bayes import precise_state

    kernel = _check_kernel(kernel or model.kernel)
    if kernel is not model.kernel and kernel != model.kernel:
        model = model.with_kernel(kernel)
    if thetas is None:
        thetas = model.design.max_distance() * np.logspace(2, 4, 9)
    thetas = np.asarray(thetas, dtype=float)
    _, depth_int = critical_subspace(model, kernel)
    if kernel.family is Family.MATERN:
        predicted = pred_int = 2.0 * kernel.nu
        depth = None
    else:
        slots = expansion_slots(model.design, kernel)
        depth, _ = compressed_depth(model, kernel)
        predicted = float(slots[depth].order)
        pred_int = float(slots[depth_int].order)
    logs = []
    used = []
    truncated = False
    for t in thetas:
        try:
            st, _ = precise_state(model, float(t), rtol=1e-6)
        except Exception:  # noqa: BLE001 - grid is truncated, reported below
            truncated = True
            continue
        if st.ctx is not None:
            E, _ = la.eigh(st.sigma_w, st.ctx)
            logs.append(-float(st.ctx.log(min(E))))
        else:
            logs.append(-math.log(la.eigvalsh(st.sigma_w)[0]))
        used.append(float(t))
    fit = fit_tail_slope(used, logs)
    return InverseNormReport(fit.slope, predicted, tuple(used), tuple(logs), truncated, depth,
                             pred_int, depth_int)


# ---------------------------------------------------------------------------
# measured vs predicted tail exponents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeCheck:
    quantity: str
    measured: float
    predicted: float
    log_power: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.measured <= self.predicted + self.tolerance

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "measured": self.measured, "predicted": self.predicted,
                "log_power": self.log_power, "tolerance": self.tolerance, "ok": self.ok}


def measure_tail_slopes(model: GpModel, y, report: ExpansionReport | None = None, lo: float = 1e2,
                        hi: float = 1e4, npts: int = 13, tol: float = 0.15,
                        log_mode: str = "offset") -> list[SlopeCheck]:
    """Fit the slopes of ``log pi`` and ``log L`` on ``[lo, hi] * max distance``.

    With ``log_mode="offset"`` known ``log(theta)`` powers of the prediction
    are removed before the fit; ``"fit"`` estimates them with a
    ``log(log(theta))`` regressor whenever the kernel has a logarithmic
    expansion term.
    """
    if log_mode not in ("offset", "fit"):
        raise InputError(f"unknown log_mode {log_mode!r}")
    from .bayes import evaluate_node

    report = report or expansion_report(model)
    scale = model.design.max_distance()
    thetas = np.geomspace(lo, hi, npts) * scale
    nodes = [evaluate_node(model, float(t), y, rtol=1e-8) for t in thetas]
    lp = np.array([n.log_prior for n in nodes])
    ll = np.array([n.log_lik for n in nodes])
    # work in units of the design scale so log(theta) > 1 for the log offsets
    tt = thetas / scale
    out = []
    for name, vals, pred, lpow in (("prior", lp, report.predicted_prior_exponent, report.prior_log_power),
                                    ("likelihood", ll, report.predicted_lik_exponent, report.lik_log_power)):
        if log_mode == "fit" and report.log_branch:
            fit = fit_tail_slope(tt, vals, loglog="fit")
        else:
            fit = fit_tail_slope(tt, vals, loglog=lpow if lpow else None)
        out.append(SlopeCheck(name, fit.slope, pred, lpow, tol))
    return out
