"""Numerical self-check suites shared by the CLI ``validate`` command.

Each suite returns a list of `CheckRow` records; a suite passes when every
row does. The default corpus is generated from a seed so that runs are
reproducible without data files.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .asymptotics import distance_power_matrix, inverse_norm_exponent, signed_spectrum
from .bayes import precise_state
from .gp import DesignSet, RegressionBasis, build_model, verify_identities
from .kernels import KernelSpec
from .spectral import f_matrix_check, spectral_quadratic_form

SMOOTH_KERNELS = (
    KernelSpec.squared_exponential(),
    KernelSpec.rational_quadratic(0.5),
    KernelSpec.rational_quadratic(1.0),
    KernelSpec.rational_quadratic(2.0),
    KernelSpec.matern(1.0),
    KernelSpec.matern(1.5),
    KernelSpec.matern(2.0),
    KernelSpec.matern(2.5),
)


@dataclass(frozen=True)
class CheckRow:
    suite: str
    case: str
    metric: str
    value: float
    threshold: float
    ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


def default_designs(seed: int = 0) -> list[DesignSet]:
    """Three small designs in one, two and three dimensions."""
    rng = np.random.default_rng(seed)
    return [DesignSet(rng.uniform(size=(n, r))) for n, r in ((5, 1), (6, 2), (7, 3))]


def identity_suite(designs, kernels=SMOOTH_KERNELS, thetas=(0.05, 0.5, 5.0)) -> list[CheckRow]:
    rows = []
    for di, d in enumerate(designs):
        for bname in ("none", "constant", "linear"):
            basis = RegressionBasis.from_keyword(bname, d.r)
            if d.n - basis.p < 2:
                continue
            for k in kernels:
                model = build_model(d, basis, k)
                for t in thetas:
                    st, _ = precise_state(model, t * d.max_distance(), full=True)
                    rep = verify_identities(st, model)
                    case = f"design{di}/{bname}/{k.label()}/theta={t:g}"
                    rows += [
                        CheckRow("identities", case, "prior_forms_rel", rep.prior_forms, 1e-8, rep.prior_forms <= 1e-8),
                        CheckRow("identities", case, "projection_rel", rep.projection, 1e-10, rep.projection <= 1e-10),
                        CheckRow("identities", case, "logdet_abs", rep.logdet, 1e-9, rep.logdet <= 1e-9),
                    ]
    return rows


def spectral_suite(seed: int = 0, kernels=SMOOTH_KERNELS, n_designs: int = 5,
                   thetas=(0.3, 1.0, 3.0), tol: float = 1e-4) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for di in range(n_designs):
        d = DesignSet(rng.uniform(size=(4, 1)))
        xi = rng.standard_normal(4)
        for k in kernels:
            for t in thetas:
                rep = spectral_quadratic_form(k, d, xi, t)
                rows.append(CheckRow("spectral", f"design{di}/{k.label()}/theta={t:g}", "rel_error",
                                     rep.rel_error, tol, rep.rel_error < tol))
    return rows


def lemma_suite(designs, kernels=SMOOTH_KERNELS, thetas=None, slope_tol: float = 0.15) -> list[CheckRow]:
    thetas = np.geomspace(1e-2, 1e3, 11) if thetas is None else thetas
    rows = []
    for di, d in enumerate(designs):
        for k in kernels:
            for t in thetas:
                rep = f_matrix_check(d, k, float(t))
                case = f"design{di}/{k.label()}/theta={t:.3g}"
                rows.append(CheckRow("lemmas", case, "F_min_eig_rel", rep.min_eigenvalue / rep.norm,
                                     -1e-10, rep.psd_ok))
                if rep.bound is not None:
                    rows.append(CheckRow("lemmas", case, "t2_over_bound", rep.t2 / rep.bound, 1.0, rep.bound_ok))
            model = build_model(d, RegressionBasis.constant(d.r), k)
            inv = inverse_norm_exponent(model)
            rows.append(CheckRow("lemmas", f"design{di}/constant/{k.label()}", "inverse_norm_excess",
                                 inv.measured - inv.predicted, slope_tol, inv.measured <= inv.predicted + slope_tol))
        for q in (0.5, 1.0, 1.5):
            sp = signed_spectrum(distance_power_matrix(d, q))
            ok = sp.n_positive == 1 and sp.n_negative == d.n - 1
            rows.append(CheckRow("lemmas", f"design{di}/distance^{q:g}", "signature_ok", float(ok), 1.0, ok))
        sp = signed_spectrum(distance_power_matrix(d, 2.0))
        rows.append(CheckRow("lemmas", f"design{di}/distance^2", "rank", float(sp.rank), float(d.r + 2),
                             sp.rank <= d.r + 2))
    return rows


def all_ok(rows) -> bool:
    return all(r.ok for r in rows)


def worst(rows, metric: str) -> float:
    vals = [r.value for r in rows if r.metric == metric]
    return max(vals) if vals else math.nan
