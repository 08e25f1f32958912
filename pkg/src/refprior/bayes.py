"""Reference prior, integrated likelihood and the posterior on ``theta``.

Everything is computed in log space. The unnormalised reference prior is

    pi(theta) = sqrt( Tr[(dSigma Sigma^-1 Q)^2] - Tr[dSigma Sigma^-1 Q]^2 / (n - p) )

with no further constant. Its projected ("W") form works with the Cholesky
factor ``L`` of ``W^T Sigma W``: writing ``C = L^-1 W^T dSigma W L^-T`` the
bracket is ``||C - (tr C / m) I||_F^2``, a sum of squares, so it cannot come
out negative. The "Q" form is kept as an independent cross-check.

Large ``theta`` pushes ``Sigma`` towards ``11^T``; `evaluate_node` therefore
escalates to extended precision whenever a forward error estimate says the
double-precision result cannot be trusted to the requested tolerance.
"""

from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special, stats

from . import _linalg as la
from .errors import (
    DegenerateObservationError,
    InputError,
    NotPositiveDefiniteError,
    NumericalConsistencyError,
    NumericalError,
    QuadratureError,
)
from .gp import CorrelationState, GpModel, correlation_state, projector_Q

log = logging.getLogger(__name__)

_MAX_DPS = 480
_LN10 = math.log(10.0)

# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------


def _check_m(model: GpModel):
    if model.m < 2:
        raise InputError(
            f"n - p = {model.m}: the reference prior bracket vanishes identically for n - p = 1"
        )


@dataclass
class _WParts:
    """Intermediate products of the projected prior evaluation."""

    C: np.ndarray
    bracket: object
    normC2: object
    linv2: float  # ||L^-1||_F^2 >= ||(W^T Sigma W)^-1||_2
    dmax: object  # max |dSigma_ij|, same number type as the state


def _w_parts(state: CorrelationState) -> _WParts:
    m = state.sigma_w.shape[0]
    ctx = state.ctx
    Linv = la.solve_lower(state.chol_w, la.eye(m, ctx))
    A = state.W.T @ state.dsigma @ state.W
    A = (A + A.T) / 2
    C = Linv @ A @ Linv.T
    tau = la.trace(C) / m
    Cc = C - tau * la.eye(m, ctx)
    bracket = la.frob2(Cc)
    dmax = np.max(np.abs(state.dsigma))
    return _WParts(C, bracket, la.frob2(C), float(la.frob2(Linv)), dmax)


def _log_half(x, ctx) -> float:
    if not x > 0:
        return -math.inf
    return float(ctx.log(x) / 2) if ctx is not None else 0.5 * math.log(x)


def _q_bracket(state: CorrelationState):
    ctx = state.ctx
    Q = projector_Q(state)
    SiQ = la.cho_solve(state.chol, Q)
    B = state.dsigma @ SiQ
    m = state.H.shape[0] - state.H.shape[1]
    tB = la.trace(B)
    tB2 = (B * B.T).sum()
    bracket = tB2 - tB * tB / m
    scale = abs(tB2)
    if bracket < 0 and abs(float(bracket)) > 1e-10 * float(scale):
        raise NumericalConsistencyError(
            f"reference prior bracket is negative ({float(bracket):.3e}, scale {float(scale):.3e}) "
            f"at theta={state.theta:g}"
        )
    return bracket


def log_reference_prior(model: GpModel, state: CorrelationState, form: str = "W") -> float:
    """Log of the unnormalised reference prior at ``state.theta``.

    Parameters
    ----------
    model : GpModel
    state : CorrelationState
    form : {"W", "Q"}
        Projected form (default) or the oblique-projector form.

    Returns
    -------
    float
        ``-inf`` when the bracket is zero (e.g. underflow of ``dSigma``).
    """
    _check_m(model)
    form = form.upper().replace("-FORM", "")
    if form == "W":
        return _log_half(_w_parts(state).bracket, state.ctx)
    if form == "Q":
        return _log_half(_q_bracket(state), state.ctx)
    raise InputError(f"unknown prior form {form!r}")


def prior_bracket_from_matrices(A: np.ndarray, S: np.ndarray) -> float:
    """Projected bracket ``||C - tr(C)/m I||^2`` for symmetric ``A`` and SPD ``S``."""
    L = np.linalg.cholesky(S)
    Linv = la.solve_lower(L, np.eye(S.shape[0]))
    C = Linv @ A @ Linv.T
    m = S.shape[0]
    return float(la.frob2(C - np.trace(C) / m * np.eye(m)))


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def _degenerate(model: GpModel, y: np.ndarray) -> bool:
    wy = model.W.T @ y
    scale = max(float(np.linalg.norm(y)), 1e-300)
    return float(np.linalg.norm(wy)) <= 64 * np.finfo(float).eps * math.sqrt(model.n) * scale


def check_observations(model: GpModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != model.n:
        raise InputError(f"y has {y.shape[0]} entries, design has {model.n} points")
    if not np.all(np.isfinite(y)):
        raise InputError("y contains non-finite values")
    return y


def log_lik_constant(m: int) -> float:
    return float(special.gammaln(m / 2.0) - (m / 2.0) * math.log(math.pi))


def log_integrated_likelihood(model: GpModel, state: CorrelationState, y, form: str = "W") -> float:
    """Log integrated likelihood ``L(y | theta)`` (``beta`` and ``sigma^2`` integrated out).

    Uses the exact constant ``Gamma(m/2) pi^{-m/2}``, ``m = n - p``.

    Raises
    ------
    DegenerateObservationError
        If ``W^T y = 0`` (``y`` lies in the mean space).
    NumericalError
        If the quadratic form is not positive.
    """
    y = check_observations(model, y)
    if _degenerate(model, y):
        raise DegenerateObservationError("W^T y = 0: observations lie in the span of the regression basis")
    ctx = state.ctx
    m = model.m
    ym = y if ctx is None else la.to_mp(y, ctx)
    form = form.upper().replace("-FORM", "")
    if form == "W":
        z = la.solve_lower(state.chol_w, state.W.T @ ym)
        qf = z @ z
        logdet = state.logdet_sigma_w()
        extra = -0.5 * model.logdet_HtH()
    elif form == "Q":
        Q = projector_Q(state)
        qf = ym @ la.cho_solve(state.chol, Q @ ym)
        logdet = state.logdet_sigma()
        extra = 0.0
        if model.p:
            G = state.H.T @ la.cho_solve(state.chol, state.H)
            logdet = logdet + la.logdet_chol(la.cholesky((G + G.T) / 2, ctx), ctx)
    else:
        raise InputError(f"unknown likelihood form {form!r}")
    if not qf > 0:
        raise NumericalError(f"quadratic form y'W(W'SW)^-1W'y = {float(qf):.3e} is not positive")
    logqf = ctx.log(qf) if ctx is not None else math.log(qf)
    val = log_lik_constant(m) + extra - 0.5 * float(logdet) - 0.5 * m * float(logqf)
    return float(val)


# ---------------------------------------------------------------------------
# precision-adaptive node evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeValue:
    theta: float
    log_prior: float
    log_lik: float | None
    dps: int | None

    @property
    def log_post(self) -> float:
        if self.log_lik is None:
            return self.log_prior
        return self.log_prior + self.log_lik


def _required_digits(state: CorrelationState, parts: _WParts, full: bool) -> float:
    """Decimal digits needed for the prior/likelihood to reach relative accuracy 1.

    The estimate propagates an entrywise perturbation of ``Sigma`` and
    ``dSigma`` of relative size ``u`` through ``C`` and through the
    log-determinant; callers add ``-log10(rtol)``.
    """
    n = state.sigma.shape[0]
    m = state.sigma_w.shape[0]
    lin = parts.linv2
    if full:
        Li = la.solve_lower(state.chol, la.eye(n, state.ctx))
        lin = max(lin, float(la.frob2(Li)))
    err_lik = n * m * lin
    if m < 2:
        # a single direction: the prior bracket vanishes identically
        err_prior = 0.0
    elif not parts.dmax > 0:
        # the derivative underflowed: only extended precision can resolve it
        err_prior = math.inf if state.ctx is None else 0.0
    elif not parts.bracket > 0:
        err_prior = math.inf
    else:
        # ratio ||C|| / sqrt(bracket) evaluated in the state's own arithmetic,
        # both numbers may lie far below the double-precision range
        sqrt = math.sqrt if state.ctx is None else state.ctx.sqrt
        ratio = float(sqrt(parts.normC2 / parts.bracket))
        dm = float(parts.dmax / sqrt(parts.bracket))
        err_prior = n * (ratio + dm) * lin
    worst = max(err_lik, err_prior, 1.0)
    return math.log10(worst) if math.isfinite(worst) else math.inf


def _state_digits(state: CorrelationState) -> float:
    return 15.6 if state.ctx is None else float(state.ctx.dps)


def precise_state(model: GpModel, theta: float, rtol: float = 1e-10, full: bool = False,
                  start_dps: int | None = None) -> tuple[CorrelationState, _WParts]:
    """State whose prior and likelihood are trustworthy to about ``rtol``.

    Starts in double precision and escalates to ``mpmath`` with enough digits
    according to `_required_digits`. ``full=True`` also requires ``Sigma^-1``
    itself to be accurate (needed by the Q-form cross-checks).
    """
    want = -math.log10(rtol)
    dps = start_dps
    tried = []
    while True:
        tried.append(dps)
        try:
            state = correlation_state(model, theta, dps=dps)
            parts = _w_parts(state)
            need = _required_digits(state, parts, full) + want
        except NotPositiveDefiniteError:
            need = math.inf
        have = 15.6 if dps is None else float(dps)
        if need + 1.0 <= have:
            return state, parts
        if not math.isfinite(need):
            nxt = 40 if dps is None else 2 * dps
        else:
            nxt = int(math.ceil((need + 8) / 10.0) * 10)
            if dps is not None:
                nxt = max(nxt, dps + 20)
        if nxt > _MAX_DPS:
            raise NumericalError(
                f"could not reach rtol={rtol:g} at theta={theta:g} with up to {_MAX_DPS} digits (tried {tried})"
            )
        dps = nxt


def evaluate_node(model: GpModel, theta: float, y=None, rtol: float = 1e-10) -> NodeValue:
    """Log prior (and log likelihood if ``y`` is given) with automatic precision."""
    state, parts = precise_state(model, theta, rtol=rtol)
    lp = _log_half(parts.bracket, state.ctx)
    ll = None if y is None else log_integrated_likelihood(model, state, y)
    return NodeValue(float(theta), lp, ll, state.dps)


def prior_curve(model: GpModel, thetas, rtol: float = 1e-10, threads: int = 1) -> list[NodeValue]:
    _check_m(model)
    fn = lambda t: evaluate_node(model, float(t), None, rtol)  # noqa: E731
    return _map(fn, list(thetas), threads)


def _map(fn: Callable, items: list, threads: int):
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# posterior curve and quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureOptions:
    """Options for `build_posterior_curve`.

    ``rtol`` is the target relative error of the normaliser, ``tail_tol`` the
    largest acceptable posterior mass in the outermost decade on either side.
    ``bracket_decades`` sets the initial range ``median_distance * 10^{+-k}``.
    """

    rtol: float = 1e-6
    tail_tol: float = 1e-8
    bracket_decades: float = 4.0
    extend_decades: float = 2.0
    max_extension_decades: float = 12.0
    max_nodes: int = 4000
    node_rtol: float = 1e-8
    threads: int = 1
    force: bool = False


@dataclass
class PosteriorCurve:
    """Posterior of ``theta`` sampled on an adaptive log grid.

    ``log_post_unnorm`` is ``log pi(theta) + log L(y|theta)`` (density in
    ``theta``); ``weights`` are the composite Boole weights in
    ``u = log theta`` so that ``sum(weights * exp(log_post_unnorm) * theta)``
    reproduces the interior integral. ``panels`` holds the final quadrature
    panels as integer index pairs on the grid ``u = origin + i * delta``.
    """

    theta_grid: np.ndarray
    log_prior: np.ndarray
    log_lik: np.ndarray
    log_post_unnorm: np.ndarray
    log_normalizer: float
    weights: np.ndarray
    dps: list
    quadrature_diag: dict = field(default_factory=dict)
    panels: list = field(default_factory=list, repr=False)
    grid: tuple = (0.0, 1.0)

    @property
    def log_post(self) -> np.ndarray:
        return self.log_post_unnorm - self.log_normalizer

    @property
    def post_density(self) -> np.ndarray:
        return np.exp(self.log_post)

    def node_masses(self) -> np.ndarray:
        """Posterior mass carried by each node under the panel rule."""
        lg = self.log_post + np.log(self.theta_grid)
        return self.weights * np.exp(lg)


# Panels start at width 2**_DEPTH index steps, so they can be halved
# _DEPTH - 2 times while the five Boole nodes stay on integer indices.
_DEPTH = 30
_BOOLE = (7, 32, 12, 32, 7)


class _NodeCache:
    """Node values keyed by integer grid index ``i`` (``u = origin + i*delta``)."""

    def __init__(self, model, y, rtol, threads, origin, delta):
        self.model, self.y, self.rtol, self.threads = model, y, rtol, threads
        self.origin, self.delta = origin, delta
        self.values: dict[int, NodeValue] = {}

    def u(self, i: int) -> float:
        return self.origin + i * self.delta

    def ensure(self, idx):
        todo = sorted({i for i in idx if i not in self.values})
        if not todo:
            return
        res = _map(lambda i: evaluate_node(self.model, math.exp(self.u(i)), self.y, self.rtol),
                   todo, self.threads)
        for i, v in zip(todo, res):
            self.values[i] = v

    def logg(self, i: int) -> float:
        """Log density in ``u = log theta``."""
        lp = self.values[i].log_post
        return lp + self.u(i) if math.isfinite(lp) else -math.inf

    def shift(self) -> float:
        return max(self.logg(i) for i in self.values)


def _panel_nodes(a: int, b: int) -> list[int]:
    q = (b - a) // 4
    return [a, a + q, a + 2 * q, a + 3 * q, b]


def _panel_estimate(cache: _NodeCache, a: int, b: int, shift: float):
    """Boole value and Simpson/Boole error estimate over one panel."""
    h = (b - a) * cache.delta
    g = []
    for i in _panel_nodes(a, b):
        lg = cache.logg(i)
        g.append(math.exp(lg - shift) if math.isfinite(lg) else 0.0)
    s1 = h / 6 * (g[0] + 4 * g[2] + g[4])
    s2 = h / 12 * (g[0] + 4 * g[1] + 2 * g[2] + 4 * g[3] + g[4])
    return s2 + (s2 - s1) / 15, abs(s2 - s1) / 15


def _fit_line(us, lgs):
    us = np.asarray(us)
    lgs = np.asarray(lgs)
    ok = np.isfinite(lgs)
    if ok.sum() < 3:
        return None
    A = np.vstack([us[ok], np.ones(ok.sum())]).T
    coef, *_ = np.linalg.lstsq(A, lgs[ok], rcond=None)
    return float(coef[0]), float(coef[1])


def _closure(cache: _NodeCache, side: str, ia: int, ib: int, shift: float):
    """Analytic mass beyond the bracket from an exponential fit in ``u``.

    The fit over the outer decade is compared with a fit over the outer
    half decade; their difference is the error proxy. Returns
    ``(mass, error_proxy, slope)`` where slope is ``d log g / du``.
    """
    nodes = sorted(i for i in cache.values if ia <= i <= ib)
    edge = ib if side == "right" else ia
    if not math.isfinite(cache.logg(edge)):
        return 0.0, 0.0, None
    res = []
    for width in (_LN10, _LN10 / 2):
        w = int(round(width / cache.delta))
        if side == "right":
            sel = [i for i in nodes if i >= ib - w]
        else:
            sel = [i for i in nodes if i <= ia + w]
        f = _fit_line([cache.u(i) for i in sel], [cache.logg(i) for i in sel])
        if f is None:
            res.append((math.inf, None))
            continue
        slope, icpt = f
        decay = -slope if side == "right" else slope
        g_edge = math.exp(slope * cache.u(edge) + icpt - shift)
        res.append((g_edge / decay if decay > 0 else math.inf, slope))
    mass, slope = res[0]
    err = abs(res[0][0] - res[1][0]) if math.isfinite(res[1][0]) and math.isfinite(mass) else math.inf
    return mass, err, slope


def build_posterior_curve(model: GpModel, y, opts: QuadratureOptions | None = None) -> PosteriorCurve:
    """Normalise ``pi(theta) L(y|theta)`` by adaptive quadrature in ``log theta``.

    Raises
    ------
    DegenerateObservationError
        When ``y`` fails the nondegeneracy check and ``opts.force`` is false.
    QuadratureError
        When ``opts.max_nodes`` evaluations do not reach ``opts.rtol``.
    """
    from .asymptotics import nondegeneracy_check

    opts = opts or QuadratureOptions()
    _check_m(model)
    y = check_observations(model, y)
    if not opts.force:
        rep = nondegeneracy_check(model, model.kernel, y)
        if not rep.passes:
            raise DegenerateObservationError(
                f"observations look degenerate (margin {rep.margin:.3e}); use force to override"
            )
    elif _degenerate(model, y):
        return _degenerate_curve(model, opts)

    base = 1 << _DEPTH                    # index width of a half-decade panel
    per_decade = 2
    origin = math.log(model.design.median_distance())
    cache = _NodeCache(model, y, opts.node_rtol, opts.threads, origin, (_LN10 / per_decade) / base)
    k0 = int(round(opts.bracket_decades * per_decade))
    kext = int(round(opts.extend_decades * per_decade))
    kmax = k0 + int(round(opts.max_extension_decades * per_decade))
    lo, hi = -k0, k0                      # bracket in units of base panels
    panels = [(k * base, (k + 1) * base) for k in range(lo, hi)]
    cache.ensure(i for p in panels for i in _panel_nodes(*p))
    flags = {"suspected_impropriety": False, "tail_limited": False}
    rounds = 0
    while True:
        rounds += 1
        shift = cache.shift()
        if not math.isfinite(shift):
            raise QuadratureError("posterior density is zero on the whole bracket")
        est = [_panel_estimate(cache, a, b, shift) for a, b in panels]
        total = sum(v for v, _ in est)
        err = sum(e for _, e in est)
        left_edge = (lo + per_decade) * base
        right_edge = (hi - per_decade) * base
        left = sum(v for (v, _), (a, b) in zip(est, panels) if b <= left_edge) / total
        right = sum(v for (v, _), (a, b) in zip(est, panels) if a >= right_edge) / total
        extended = False
        if left > opts.tail_tol:
            if -lo < kmax:
                new_lo = max(lo - kext, -kmax)
                panels = [(k * base, (k + 1) * base) for k in range(new_lo, lo)] + panels
                lo, extended = new_lo, True
            else:
                flags["tail_limited"] = True
        if right > opts.tail_tol:
            if hi < kmax:
                new_hi = min(hi + kext, kmax)
                panels = panels + [(k * base, (k + 1) * base) for k in range(hi, new_hi)]
                hi, extended = new_hi, True
            else:
                flags["tail_limited"] = True
        if extended:
            cache.ensure(i for p in panels for i in _panel_nodes(*p))
            continue
        if err <= opts.rtol * total:
            break
        if len(cache.values) >= opts.max_nodes:
            raise QuadratureError(
                f"quadrature did not converge with {len(cache.values)} nodes "
                f"(estimated relative error {err / total:.2e})",
                diagnostics={"nodes": len(cache.values), "rel_error": err / total},
            )
        # split the panels holding the largest error contributions
        heap = [(-e, j) for j, (_, e) in enumerate(est) if panels[j][1] - panels[j][0] >= 8]
        if not heap:
            raise QuadratureError("panel refinement exhausted the index grid",
                                  diagnostics={"nodes": len(cache.values)})
        heapq.heapify(heap)
        target = opts.rtol * total
        split, acc = set(), err
        while heap and acc > target / 2 and len(split) < max(1, len(panels) // 4):
            ne, j = heapq.heappop(heap)
            split.add(j)
            acc += ne
        new_panels = []
        for j, (a, b) in enumerate(panels):
            if j in split:
                mid = (a + b) // 2
                new_panels += [(a, mid), (mid, b)]
            else:
                new_panels.append((a, b))
        panels = new_panels
        cache.ensure(i for p in panels for i in _panel_nodes(*p))

    ia, ib = panels[0][0], panels[-1][1]
    shift = cache.shift()
    cl_l, cl_l_err, slope_l = _closure(cache, "left", ia, ib, shift)
    cl_r, cl_r_err, slope_r = _closure(cache, "right", ia, ib, shift)
    if slope_r is not None and slope_r >= 0:
        flags["suspected_impropriety"] = True
    if slope_l is not None and slope_l <= 0:
        flags["suspected_impropriety"] = True
    total_all = total + cl_l + cl_r
    weights: dict[int, float] = {}
    for a, b in panels:
        h = (b - a) * cache.delta
        for i, c in zip(_panel_nodes(a, b), _BOOLE):
            weights[i] = weights.get(i, 0.0) + c * h / 90
    idx = sorted(weights)
    vals = [cache.values[i] for i in idx]
    theta = np.exp(np.array([cache.u(i) for i in idx]))
    lp = np.array([v.log_prior for v in vals])
    ll = np.array([v.log_lik for v in vals])
    finite = math.isfinite(total_all)
    log_norm = shift + math.log(total_all) if finite else math.inf
    diag = {
        "nodes": len(idx),
        "rounds": rounds,
        "bracket": [math.exp(cache.u(ia)), math.exp(cache.u(ib))],
        "estimated_rel_error": (err + cl_l_err + cl_r_err) / total_all if finite else math.inf,
        "interior_rel_error": err / total,
        "left_decade_mass": left,
        "right_decade_mass": right,
        "left_closure_mass": cl_l / total_all if finite else math.inf,
        "right_closure_mass": cl_r / total_all if finite else math.inf,
        "left_slope_u": slope_l,
        "right_slope_u": slope_r,
        "max_dps": max((v.dps or 0) for v in vals),
        **flags,
    }
    return PosteriorCurve(theta, lp, ll, lp + ll, log_norm, np.array([weights[i] for i in idx]),
                          [v.dps for v in vals], diag, panels=list(panels), grid=(origin, cache.delta))


def _degenerate_curve(model: GpModel, opts: QuadratureOptions) -> PosteriorCurve:
    """Prior-only curve for forced degenerate data: the likelihood is undefined."""
    dbar = model.design.median_distance()
    us = np.linspace(math.log(dbar) - opts.bracket_decades * _LN10,
                     math.log(dbar) + opts.bracket_decades * _LN10, 33)
    nodes = prior_curve(model, np.exp(us), opts.node_rtol, opts.threads)
    lp = np.array([v.log_prior for v in nodes])
    no_lik = np.full_like(lp, -math.inf)
    diag = {"suspected_impropriety": True, "degenerate_observations": True,
            "reason": "W^T y = 0; likelihood does not decay, posterior cannot be normalised"}
    return PosteriorCurve(np.exp(us), lp, no_lik, no_lik, math.inf, np.zeros_like(lp),
                          [v.dps for v in nodes], diag)


def refined_log_normalizer(model: GpModel, y, curve: PosteriorCurve, node_rtol: float = 1e-8) -> float:
    """Log normaliser after halving every panel of ``curve``'s grid.

    The closure terms are recomputed from the refined grid. Used as the
    grid-doubling stability check.
    """
    if not curve.panels:
        raise ValueError("curve carries no panel structure")
    origin, delta = curve.grid
    cache = _NodeCache(model, check_observations(model, y), node_rtol, 1, origin, delta)
    for th, lp, ll, d in zip(curve.theta_grid, curve.log_prior, curve.log_lik, curve.dps):
        i = int(round((math.log(th) - origin) / delta))
        cache.values[i] = NodeValue(float(th), float(lp), float(ll), d)
    halves = []
    for a, b in curve.panels:
        if b - a < 8:
            halves.append((a, b))
        else:
            mid = (a + b) // 2
            halves += [(a, mid), (mid, b)]
    cache.ensure(i for p in halves for i in _panel_nodes(*p))
    shift = cache.shift()
    total = sum(_panel_estimate(cache, a, b, shift)[0] for a, b in halves)
    ia, ib = halves[0][0], halves[-1][1]
    cl = _closure(cache, "left", ia, ib, shift)[0] + _closure(cache, "right", ia, ib, shift)[0]
    return shift + math.log(total + cl)


def trapezoid_log_normalizer(model: GpModel, y, theta_lo: float, theta_hi: float,
                             npts: int = 201, node_rtol: float = 1e-8, threads: int = 1) -> float:
    """Independent fixed-grid trapezoid estimate of the log normaliser.

    Uses its own equispaced grid in ``log theta`` and its own exponential
    tail closure fitted over the outer decade of that grid.
    """
    y = check_observations(model, y)
    us = np.linspace(math.log(theta_lo), math.log(theta_hi), npts)
    nodes = _map(lambda u: evaluate_node(model, math.exp(u), y, node_rtol), list(us), threads)
    lg = np.array([n.log_post + u if math.isfinite(n.log_post) else -math.inf for n, u in zip(nodes, us)])
    shift = np.max(lg)
    g = np.exp(lg - shift)
    h = us[1] - us[0]
    total = h * (g.sum() - 0.5 * (g[0] + g[-1]))
    k = max(3, int(round(_LN10 / h)))
    for sl, edge_idx, sign in ((slice(0, k + 1), 0, 1.0), (slice(npts - k - 1, npts), -1, -1.0)):
        f = _fit_line(us[sl], lg[sl])
        if f is None or g[edge_idx] == 0.0:
            continue
        decay = sign * f[0]
        if decay > 0:
            total += math.exp(f[0] * us[edge_idx] + f[1] - shift) / decay
        else:
            return math.inf
    return float(shift + math.log(total))


# ---------------------------------------------------------------------------
# conditional draws, MAP, prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalDraw:
    beta: np.ndarray
    sigma2: float


def gls_quantities(state: CorrelationState, y: np.ndarray):
    """``(beta_hat, G, s)`` with ``G = H^T Sigma^-1 H`` and ``s = y^T Sigma^-1 Q y``."""
    ctx = state.ctx
    ym = y if ctx is None else la.to_mp(y, ctx)
    H = state.H
    p = H.shape[1]
    if p:
        SiH = la.cho_solve(state.chol, H)
        G = H.T @ SiH
        G = (G + G.T) / 2
        LG = la.cholesky(G, ctx)
        beta = la.cho_solve(LG, SiH.T @ ym)
        resid = ym - H @ beta
    else:
        G = np.zeros((0, 0)) if ctx is None else np.empty((0, 0), dtype=object)
        beta = np.zeros(0)
        resid = ym
    s = resid @ la.cho_solve(state.chol, resid)
    if p:
        return la.to_float(beta), la.to_float(G), float(s)
    return np.zeros(0), np.zeros((0, 0)), float(s)


def sample_conditional(model: GpModel, state: CorrelationState, y, rng: np.random.Generator) -> ConditionalDraw:
    """Draw ``(beta, sigma^2)`` from their conditional posterior given ``theta``.

    ``sigma^2 ~ InvGamma((n-p)/2, y'Sigma^-1 Q y / 2)`` and
    ``beta | sigma^2 ~ N(beta_hat, sigma^2 (H'Sigma^-1 H)^-1)``.
    """
    y = check_observations(model, y)
    beta_hat, G, s = gls_quantities(state, y)
    shape = model.m / 2.0
    sigma2 = (s / 2.0) / rng.gamma(shape)
    if model.p:
        cov = sigma2 * np.linalg.inv(G)
        beta = rng.multivariate_normal(beta_hat, (cov + cov.T) / 2)
    else:
        beta = np.zeros(0)
    return ConditionalDraw(np.asarray(beta, dtype=float), float(sigma2))


@dataclass(frozen=True)
class MapResult:
    theta: float
    log_post: float
    on_boundary: bool
    theta_direct: float
    bounds: tuple[float, float]


def golden_section_max(f, a, b, tol=1e-8, maxiter=500):
    invphi = (math.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if abs(b - a) < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


def map_theta(model: GpModel, y, bounds: tuple[float, float] | None = None, ngrid: int = 161,
              node_rtol: float = 1e-9) -> MapResult:
    """Maximum a posteriori ``theta`` (log prior + log likelihood).

    A log-spaced grid locates the best cell; golden-section search in
    ``u = log theta`` refines it to ``|du| < 1e-8``. The same search in
    ``theta`` itself is reported as ``theta_direct`` (the argmax must not
    depend on the parametrisation).
    """
    y = check_observations(model, y)
    if _degenerate(model, y):
        raise DegenerateObservationError("W^T y = 0: no information about theta")
    if bounds is None:
        dbar = model.design.median_distance()
        bounds = (dbar * 1e-3, dbar * 1e3)
    lo, hi = map(float, bounds)
    if not (0 < lo < hi):
        raise InputError("bounds must satisfy 0 < lo < hi")

    def lpu(u):
        return evaluate_node(model, math.exp(u), y, node_rtol).log_post

    us = np.linspace(math.log(lo), math.log(hi), ngrid)
    vals = np.array([lpu(u) for u in us])
    i = int(np.argmax(vals))
    if i in (0, ngrid - 1):
        th = float(math.exp(us[i]))
        return MapResult(th, float(vals[i]), True, th, (lo, hi))
    a, b = us[i - 1], us[i + 1]
    ustar = golden_section_max(lpu, a, b, tol=1e-8)
    tdir = golden_section_max(lambda t: lpu(math.log(t)), math.exp(a), math.exp(b),
                              tol=1e-8 * math.exp(ustar))
    return MapResult(math.exp(ustar), lpu(ustar), False, tdir, (lo, hi))


@dataclass(frozen=True)
class Prediction:
    points: np.ndarray
    mean: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    sd: np.ndarray


def kriging_moments(model: GpModel, state: CorrelationState, y, x_new):
    """Conditional predictive location, scale and degrees of freedom at fixed ``theta``.

    Computed in the arithmetic of ``state`` (double or ``mpmath``); the
    cross-correlations with ``x_new`` are formed at the same precision.
    """
    from .kernels import eval_kernel, kernel_and_derivative

    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    if x_new.shape[1] != model.design.r:
        raise InputError(f"new points have dimension {x_new.shape[1]}, design has {model.design.r}")
    ctx = state.ctx
    P = model.design.points
    dist = np.sqrt(((x_new[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    h = model.basis.evaluate(x_new)
    if ctx is None:
        k = eval_kernel(model.kernel, dist, state.theta)  # (q, n)
        ym = y
    else:
        Pm, Xm = la.to_mp(P, ctx), la.to_mp(x_new, ctx)
        dm = np.empty(dist.shape, dtype=object)
        for i in range(dist.shape[0]):
            for j in range(dist.shape[1]):
                diff = Xm[i] - Pm[j]
                dm[i, j] = ctx.sqrt(diff @ diff)
        k, _ = kernel_and_derivative(model.kernel, dm, state.theta, ctx)
        h = la.to_mp(h, ctx)
        ym = la.to_mp(y, ctx)
    H = state.H
    Sik = la.cho_solve(state.chol, k.T)  # (n, q)
    if model.p:
        SiH = la.cho_solve(state.chol, H)
        G = H.T @ SiH
        LG = la.cholesky((G + G.T) / 2, ctx)
        beta = la.cho_solve(LG, SiH.T @ ym)
        resid = ym - H @ beta
    else:
        resid = ym
    s2 = resid @ la.cho_solve(state.chol, resid)
    mean = k @ la.cho_solve(state.chol, resid)
    var = 1 - np.array([k[i] @ Sik[:, i] for i in range(k.shape[0])])
    if model.p:
        mean = mean + h @ beta
        uu = h.T - H.T @ Sik  # (p, q)
        var = var + np.array([uu[:, i] @ la.cho_solve(LG, uu[:, i]) for i in range(uu.shape[1])])
    mean = la.to_float(np.asarray(mean))
    var = np.maximum(la.to_float(np.asarray(var)), 0.0)
    scale2 = float(s2) / model.m * var
    exact = dist.min(axis=1) == 0.0
    scale2[exact] = 0.0
    if np.any(exact):
        mean[exact] = np.asarray(y, dtype=float)[np.argmin(dist[exact], axis=1)]
    return mean, np.sqrt(scale2), model.m


def precise_kriging_moments(model: GpModel, theta: float, y, x_new, rtol: float = 1e-9,
                            start_dps: int | None = None):
    """`kriging_moments` with digits added until two precisions agree to ``rtol``.

    The conditional mean at a new point is a difference of nearly equal
    terms for large ``theta``; agreement is measured against the spread of
    ``y`` so that means near zero do not force endless escalation.
    """
    y = np.asarray(y, dtype=float)
    ref = max(float(np.max(np.abs(y))), 1e-300)
    dps = start_dps
    prev = None
    while True:
        try:
            st = correlation_state(model, theta, dps=dps)
            cur = kriging_moments(model, st, y, x_new)
        except NotPositiveDefiniteError:
            cur = None
        if cur is not None and prev is not None:
            dm = np.max(np.abs(cur[0] - prev[0]), initial=0.0)
            ds = np.max(np.abs(cur[1] - prev[1]), initial=0.0)
            if dm <= rtol * ref and ds <= rtol * max(ref, float(np.max(cur[1], initial=0.0))):
                return cur
        prev = cur
        dps = 30 if dps is None else 2 * dps
        if dps > _MAX_DPS:
            raise NumericalError(f"predictive moments at theta={theta:g} did not settle with {_MAX_DPS} digits")


def predict(model: GpModel, y, curve: PosteriorCurve, x_new, level: float = 0.95,
            node_rtol: float = 1e-9) -> Prediction:
    """Posterior predictive mean and central interval at ``x_new``.

    Mixes the Student-t conditional predictive distributions over the
    quadrature nodes of ``curve`` with their posterior masses. Nodes with
    negligible mass (< 1e-12 of the total) are skipped.
    """
    y = check_observations(model, y)
    if not math.isfinite(curve.log_normalizer):
        raise InputError("posterior curve is not normalised")
    mass = curve.node_masses()
    keep = mass > 1e-12 * mass.sum()
    w = mass[keep] / mass[keep].sum()
    thetas = curve.theta_grid[keep]
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    mus, scs = [], []
    for t in thetas:
        st, _ = precise_state(model, float(t), rtol=node_rtol)
        mu, sc, dof = precise_kriging_moments(model, float(t), y, x_new, rtol=node_rtol, start_dps=st.dps)
        mus.append(mu)
        scs.append(sc)
    mus = np.array(mus)
    scs = np.array(scs)
    dof = model.m
    mean = w @ mus
    # Student-t with dof degrees of freedom has variance dof/(dof-2) * scale^2
    if dof > 2:
        var_t = dof / (dof - 2) * scs ** 2
        sd = np.sqrt(np.maximum(w @ (var_t + mus ** 2) - mean ** 2, 0.0))
    else:
        sd = np.full(mean.shape, math.inf)
    alpha = (1 - level) / 2
    lo = np.empty_like(mean)
    hi = np.empty_like(mean)
    for j in range(mean.shape[0]):
        if np.all(scs[:, j] == 0):
            lo[j] = hi[j] = mean[j]
            continue
        lo[j] = _mixture_quantile(alpha, w, mus[:, j], scs[:, j], dof)
        hi[j] = _mixture_quantile(1 - alpha, w, mus[:, j], scs[:, j], dof)
    return Prediction(x_new, mean, lo, hi, sd)


def _mixture_quantile(prob, w, mu, sc, dof):
    pos = sc > 0

    def cdf(x):
        c = np.where(pos, stats.t.cdf((x - mu) / np.where(pos, sc, 1.0), dof), (x >= mu).astype(float))
        return float(w @ c) - prob

    span = np.max(np.abs(mu)) + 50 * np.max(sc) * max(1.0, stats.t.ppf(0.999, dof))
    lo, hi = float(np.min(mu) - span), float(np.max(mu) + span)
    return optimize.brentq(cdf, lo, hi, xtol=1e-12 * max(1.0, span))
