"""Command-line front end.

Exit codes: 0 on success, 1 for input or configuration errors, 2 when a
numerical contract is violated (degenerate observations, a failed bound,
suspected impropriety).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (
    distance_power_matrix,
    expansion_report,
    inverse_norm_exponent,
    measure_tail_slopes,
    nondegeneracy_check,
    signed_spectrum,
)
from .bayes import QuadratureOptions, build_posterior_curve, map_theta, predict, prior_curve
from .errors import DegenerateObservationError, InputError, NumericalError, RefPriorError
from .gp import DesignSet, RegressionBasis, build_model, read_numeric_csv
from .kernels import KernelSpec, parse_family
from .validation import default_designs, identity_suite, lemma_suite, spectral_suite

log = logging.getLogger("refprior")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

DEFAULTS = {
    "design_path": None,
    "obs_path": None,
    "new_points_path": None,
    "kernel": {"family": "matern", "nu": 2.5, "q": None, "parametrization": "HW94"},
    "basis": "constant",
    "theta_bounds": None,
    "npts": 81,
    "rtol": 1e-6,
    "level": 0.95,
    "output_dir": "refprior-out",
    "seed": 0,
    "threads": None,
    "force": False,
    "suites": [],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    # every default is None so that "flag given" can be told apart from the default
    p.add_argument("--config", help="JSON file with run settings (flags override it)")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--design", dest="design_path", help="CSV of design points, one row per point")
    p.add_argument("--obs", dest="obs_path", help="CSV with one observation per row")
    p.add_argument("--kernel", help="kernel family: se, rq, matern, pe, spherical")
    p.add_argument("--nu", type=float, help="smoothness (Matérn) or exponent (RQ)")
    p.add_argument("--q", type=float, help="power-exponential exponent")
    p.add_argument("--parametrization", type=str.upper, choices=["HW94", "BDOS"], help="Matérn scaling")
    p.add_argument("--basis", help="none, constant, linear or a JSON list of exponent tuples")
    p.add_argument("--theta-bounds", dest="theta_bounds", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--rtol", type=float, help="quadrature relative tolerance")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads for theta-node evaluation")
    p.add_argument("--force", action="store_true", default=None, help="skip the nondegeneracy gate")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refprior", description="Reference-prior inference for isotropic Gaussian processes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("prior", help="reference prior curve")
    _common(p)
    p.add_argument("--npts", type=int, help="number of theta grid points")
    p = sub.add_parser("posterior", help="normalised posterior of theta")
    _common(p)
    p = sub.add_parser("predict", help="posterior predictive at new points")
    _common(p)
    p.add_argument("--new-points", dest="new_points_path")
    p.add_argument("--level", type=float)
    p = sub.add_parser("diagnose", help="large-theta case analysis and tail exponents")
    _common(p)
    p = sub.add_parser("validate", help="identity, spectral and lemma-bound suites")
    _common(p)
    p.add_argument("--all", dest="suite_all", action="store_true")
    p.add_argument("--identities", dest="suite_identities", action="store_true")
    p.add_argument("--spectral", dest="suite_spectral", action="store_true")
    p.add_argument("--lemmas", dest="suite_lemmas", action="store_true")
    p = sub.add_parser("map", help="posterior mode of theta")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        for key, val in file_cfg.items():
            if key == "kernel" and isinstance(val, dict):
                cfg["kernel"].update(val)
            else:
                cfg[key] = val
    flags = vars(args)
    for key in ("design_path", "obs_path", "new_points_path", "basis", "rtol", "output_dir",
                "seed", "threads", "force", "npts", "level"):
        if flags.get(key) is not None:
            cfg[key] = flags[key]
    if flags.get("theta_bounds") is not None:
        cfg["theta_bounds"] = list(flags["theta_bounds"])
    if flags.get("kernel") is not None:
        cfg["kernel"]["family"] = flags["kernel"]
    for key in ("nu", "q", "parametrization"):
        if flags.get(key) is not None:
            cfg["kernel"][key] = flags[key]
    suites = [s for s in ("identities", "spectral", "lemmas") if flags.get(f"suite_{s}")]
    if flags.get("suite_all"):
        suites = ["identities", "spectral", "lemmas"]
    if suites:
        cfg["suites"] = suites
    cfg["command"] = args.command
    return cfg


def kernel_from_config(kcfg: dict) -> KernelSpec:
    fam = parse_family(kcfg.get("family", "matern"))
    data = {"family": fam.value}
    for key in ("nu", "q", "parametrization"):
        if kcfg.get(key) is not None:
            data[key] = kcfg[key]
    # a config may carry parameters of another family; keep the relevant ones
    allowed = {"matern": ("nu", "parametrization"), "rational_quadratic": ("nu",),
               "power_exponential": ("q",)}.get(fam.value, ())
    return KernelSpec.from_dict({"family": fam.value, **{k: v for k, v in data.items() if k in allowed}})


def _load_model(cfg: dict):
    if not cfg["design_path"]:
        raise InputError("--design is required")
    design = DesignSet.from_csv(cfg["design_path"])
    basis_spec = cfg["basis"]
    if isinstance(basis_spec, str) and basis_spec.strip().startswith("["):
        try:
            basis_spec = json.loads(basis_spec)
        except json.JSONDecodeError as exc:
            raise InputError(f"cannot parse basis {basis_spec!r}: {exc}") from None
    basis = RegressionBasis.from_keyword(basis_spec, design.r)
    kernel = kernel_from_config(cfg["kernel"])
    return build_model(design, basis, kernel)


def _load_obs(cfg: dict, n: int) -> np.ndarray:
    if not cfg["obs_path"]:
        raise InputError("--obs is required for this command")
    y = read_numeric_csv(cfg["obs_path"]).reshape(-1)
    if y.shape[0] != n:
        raise InputError(f"{cfg['obs_path']} has {y.shape[0]} values, design has {n} points")
    return y


def _threads(cfg: dict) -> int:
    t = cfg.get("threads")
    return max(1, int(t)) if t else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _clean(obj):
    """Make ``obj`` JSON-safe: infinities become tokens, NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


class _Writer:
    def __init__(self, out_dir: str, cfg: dict):
        self.dir = Path(out_dir)
        self.cfg = cfg
        self.files: dict[str, str] = {}

    def _put(self, name: str, text: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        data = text.encode()
        (self.dir / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, obj) -> None:
        self._put(name, json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
        self._put(name, buf.getvalue())

    def manifest(self, status: str, code: int) -> None:
        cfg = {k: v for k, v in self.cfg.items() if k != "threads"}
        self.json("manifest.json", {"command": self.cfg["command"], "status": status, "exit_code": code,
                                    "config": cfg, "files": dict(sorted(self.files.items())),
                                    "version": __version__})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _theta_grid(cfg: dict, model) -> np.ndarray:
    if cfg["theta_bounds"]:
        lo, hi = map(float, cfg["theta_bounds"])
        if not 0 < lo < hi:
            raise InputError("theta bounds must satisfy 0 < LO < HI")
    else:
        dbar = model.design.median_distance()
        lo, hi = dbar * 1e-2, dbar * 1e2
    return np.geomspace(lo, hi, int(cfg["npts"]))


def cmd_prior(cfg, out: _Writer) -> int:
    model = _load_model(cfg)
    thetas = _theta_grid(cfg, model)
    nodes = prior_curve(model, thetas, threads=_threads(cfg))
    out.csv("prior.csv", ["theta", "log_prior", "dps"],
            [(float(n.theta), n.log_prior, n.dps or 0) for n in nodes])
    return EXIT_OK


def _gate(model, y, cfg, out: _Writer) -> int | None:
    rep = nondegeneracy_check(model, model.kernel, y)
    out.json("nondegeneracy.json", rep.to_dict())
    if not rep.passes and not cfg["force"]:
        print(f"refprior: observations fail the nondegeneracy check (margin {rep.margin:.3e}); "
              "the posterior may be improper. Use --force to continue.", file=sys.stderr)
        return EXIT_NUMERIC
    return None


def _posterior(model, y, cfg):
    opts = QuadratureOptions(rtol=float(cfg["rtol"]), threads=_threads(cfg), force=bool(cfg["force"]))
    return build_posterior_curve(model, y, opts)


def cmd_posterior(cfg, out: _Writer) -> int:
    model = _load_model(cfg)
    y = _load_obs(cfg, model.n)
    code = _gate(model, y, cfg, out)
    if code is not None:
        return code
    curve = _posterior(model, y, cfg)
    mass = curve.node_masses()
    mass = mass / mass.sum()
    out.csv("posterior.csv", ["theta", "log_prior", "log_lik", "log_post", "weight", "mass", "dps"],
            [(float(t), a, b, c, w, pm, d or 0) for t, a, b, c, w, pm, d in
             zip(curve.theta_grid, curve.log_prior, curve.log_lik, curve.log_post, curve.weights, mass,
                 curve.dps)])
    out.json("posterior.json", {"log_normalizer": curve.log_normalizer, "diagnostics": curve.quadrature_diag})
    if curve.quadrature_diag.get("suspected_impropriety"):
        print("refprior: posterior tails do not decay; suspected impropriety", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_predict(cfg, out: _Writer) -> int:
    model = _load_model(cfg)
    y = _load_obs(cfg, model.n)
    if not cfg["new_points_path"]:
        raise InputError("predict requires --new-points")
    x_new = read_numeric_csv(cfg["new_points_path"])
    if x_new.ndim == 1:
        x_new = x_new[:, None] if model.design.r == 1 else x_new[None, :]
    code = _gate(model, y, cfg, out)
    if code is not None:
        return code
    curve = _posterior(model, y, cfg)
    pred = predict(model, y, curve, x_new, level=float(cfg["level"]))
    r = model.design.r
    out.csv("prediction.csv", [f"x{j}" for j in range(r)] + ["mean", "sd", "lower", "upper"],
            [tuple(float(v) for v in pred.points[i]) + (pred.mean[i], pred.sd[i], pred.lo95[i], pred.hi95[i])
             for i in range(pred.points.shape[0])])
    return EXIT_OK


def cmd_diagnose(cfg, out: _Writer) -> int:
    model = _load_model(cfg)
    d = model.design
    report = {"expansion": expansion_report(model).to_dict()}
    spectra = {}
    for q in (0.5, 1.0, 1.5, 2.0):
        sp = signed_spectrum(distance_power_matrix(d, q))
        spectra[f"{q:g}"] = {"n_positive": sp.n_positive, "n_negative": sp.n_negative, "n_zero": sp.n_zero,
                             "rank": sp.rank, "eigenvalues": list(sp.eigenvalues)}
    report["distance_spectra"] = spectra
    violated = False
    if model.kernel.is_smooth:
        inv = inverse_norm_exponent(model)
        ok = inv.measured <= inv.predicted + 0.15
        violated |= not ok
        report["inverse_norm"] = {"measured": inv.measured, "predicted": inv.predicted, "ok": ok,
                                  "truncated": inv.truncated}
    if cfg["obs_path"]:
        y = _load_obs(cfg, model.n)
        nd = nondegeneracy_check(model, model.kernel, y)
        report["nondegeneracy"] = nd.to_dict()
        if nd.passes:
            slopes = measure_tail_slopes(model, y)
            report["tail_slopes"] = [s.to_dict() for s in slopes]
            violated |= not all(s.ok for s in slopes)
        else:
            violated = True
    out.json("diagnose.json", report)
    return EXIT_NUMERIC if violated else EXIT_OK


def cmd_validate(cfg, out: _Writer) -> int:
    suites = cfg["suites"] or ["identities", "spectral", "lemmas"]
    if cfg["design_path"]:
        designs = [DesignSet.from_csv(cfg["design_path"])]
    else:
        designs = default_designs(int(cfg["seed"]))
    rows = []
    for s in suites:
        log.info("running %s suite", s)
        if s == "identities":
            rows += identity_suite(designs)
        elif s == "spectral":
            rows += spectral_suite(int(cfg["seed"]))
        elif s == "lemmas":
            rows += lemma_suite(designs)
        else:
            raise InputError(f"unknown suite {s!r}")
    summary = {}
    for s in suites:
        sel = [r for r in rows if r.suite == s]
        summary[s] = {"checks": len(sel), "failed": sum(not r.ok for r in sel), "pass": all(r.ok for r in sel)}
    out.json("validate.json", {"summary": summary, "rows": [r.to_dict() for r in rows]})
    for s, v in summary.items():
        print(f"{s:<12} {'PASS' if v['pass'] else 'FAIL'}  ({v['checks']} checks, {v['failed']} failed)")
    return EXIT_OK if all(v["pass"] for v in summary.values()) else EXIT_NUMERIC


def cmd_map(cfg, out: _Writer) -> int:
    model = _load_model(cfg)
    y = _load_obs(cfg, model.n)
    code = _gate(model, y, cfg, out)
    if code is not None:
        return code
    bounds = tuple(cfg["theta_bounds"]) if cfg["theta_bounds"] else None
    res = map_theta(model, y, bounds)
    out.json("map.json", {"theta": res.theta, "log_post": res.log_post, "on_boundary": res.on_boundary,
                          "theta_direct": res.theta_direct, "bounds": list(res.bounds)})
    return EXIT_OK


COMMANDS = {"prior": cmd_prior, "posterior": cmd_posterior, "predict": cmd_predict,
            "diagnose": cmd_diagnose, "validate": cmd_validate, "map": cmd_map}


def _setup_logging() -> None:
    level = os.environ.get("REFPRIOR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run_cli(argv=None) -> int:
    """Run one subcommand and return the process exit code."""
    _setup_logging()
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except InputError as exc:
        print(f"refprior: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.dump_config:
        print(json.dumps(_clean(cfg), indent=2, sort_keys=True))
        return EXIT_OK
    out = _Writer(cfg["output_dir"], cfg)
    try:
        code = COMMANDS[args.command](cfg, out)
    except (InputError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"refprior: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except DegenerateObservationError as exc:
        print(f"refprior: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (NumericalError, RefPriorError, ArithmeticError) as exc:
        print(f"refprior: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    status = {EXIT_OK: "ok", EXIT_INPUT: "input-error", EXIT_NUMERIC: "numerical-violation"}[code]
    try:
        out.manifest(status, code)
    except OSError as exc:
        print(f"refprior: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
