"""Command-line front end: ``fit``, ``select`` and ``simulate``.

Settings come from flags and/or a JSON config file (``--config``); flags
override the file.  Config keys are the long option names with dashes
replaced by underscores, e.g. ``{"method": "qif", "lambda1_grid": [0, 0.1]}``.

Exit status: 0 on success, 1 when the solver did not converge, 2 on usage,
config or data errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .core import DataFormatError, DomainError, FitResult, LongitudinalDataset, read_dataset
from .correlation import CorrelationKind
from .gee import GeeConfig, format_trace, solve_gee
from .qif import solve_qif
from .selection import PenaltyConfig, SelectionResult, tune_lambdas
from .simulation import (
    METHODS,
    MetricsReport,
    StudyConfig,
    coefficient_table,
    example1,
    example2,
    example3,
    run_replications,
    selection_table,
)

log = logging.getLogger(__name__)

Z_95 = 1.959964
KINDS = tuple(k.value for k in CorrelationKind)
POOLINGS = ("pooled", "per_subject", "shrunk", "none")
FIT_METHODS = ("gee", "qif", "independence")
DESIGNS = {"example1": example1, "example2": example2, "example3": example3}

EXIT_OK, EXIT_NONCONVERGED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one CLI run."""

    subcommand: str
    out: str = "."
    data: str | None = None
    design: str | None = None
    method: str = "gee"
    kind: str = "exchangeable"
    pooling: str = "pooled"
    bandwidth: float | None = None
    max_iterations: int = 100
    tol: float = 1e-6
    lambda1_grid: tuple | None = None
    lambda2_grid: tuple | None = None
    scad_c: float = 3.7
    grid_size: int = 8
    grid_rule: str = "noise"
    n: int | None = None
    seed: int = 2024
    replications: int = 2
    methods: tuple = ("independence", "gee", "qif")
    parallelism: int = 1

    def __post_init__(self):
        if self.subcommand not in ("fit", "select", "simulate"):
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.subcommand == "simulate":
            if self.data is not None:
                raise ConfigError("simulate takes a design, not a data file")
            if self.design not in DESIGNS:
                raise ConfigError(f"unknown design {self.design!r}; valid designs: {', '.join(DESIGNS)}")
            bad = [m for m in self.methods if m not in METHODS]
            if bad or not self.methods:
                raise ConfigError(f"invalid methods {bad}; valid methods: {', '.join(METHODS)}")
            if self.replications < 1 or self.parallelism < 1:
                raise ConfigError("replications and parallelism must be >= 1")
        else:
            if self.design is not None:
                raise ConfigError(f"{self.subcommand} takes a data file, not a design")
            if self.data is None:
                raise ConfigError(f"{self.subcommand} needs a data file (--data)")
            if self.method not in FIT_METHODS:
                raise ConfigError(f"invalid method {self.method!r}; valid methods: {', '.join(FIT_METHODS)}")
        if self.kind not in KINDS:
            raise ConfigError(f"invalid kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"invalid pooling {self.pooling!r}; valid poolings: {', '.join(POOLINGS)}")
        if self.subcommand == "select" and self.method == "independence":
            raise ConfigError("select supports methods gee and qif")
        for name in ("lambda1_grid", "lambda2_grid"):
            grid = getattr(self, name)
            if grid is not None and len(grid) == 0:
                raise ConfigError(f"{name} is empty")
        if self.grid_rule not in ("noise", "max", "coefficient"):
            raise ConfigError(f"invalid grid_rule {self.grid_rule!r}; valid rules: noise, max, coefficient")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")

    def gee_config(self) -> GeeConfig:
        if self.method == "independence":
            return GeeConfig.independence(max_iterations=self.max_iterations, tol=self.tol, bandwidth=self.bandwidth)
        return GeeConfig(
            kind=self.kind, pooling=self.pooling, max_iterations=self.max_iterations, tol=self.tol, bandwidth=self.bandwidth
        )

    def penalty_config(self) -> PenaltyConfig:
        return PenaltyConfig(
            c=self.scad_c,
            lambda1_grid=self.lambda1_grid,
            lambda2_grid=self.lambda2_grid,
            solver="qif" if self.method == "qif" else "gee",
            grid_size=self.grid_size,
            grid_rule=self.grid_rule,
        )


# -- output helpers -----------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to a temporary file in the same directory, then rename it."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _g6(x: float) -> str:
    return f"{x:.6g}"


def _num(x: float):
    """JSON-safe float: non-finite values become strings."""
    x = float(x)
    return x if math.isfinite(x) else str(x)


def coefficient_names(p: int, q: int) -> list:
    return [f"beta{j + 1}" for j in range(p)] + [f"theta{j + 1}" for j in range(q)]


def standard_errors(fit: FitResult) -> np.ndarray:
    d = fit.coefficients.shape[0]
    if fit.full_cov is None:
        return np.full(d, np.nan)
    return np.sqrt(np.clip(np.diag(fit.full_cov), 0.0, None))


def coefficients_csv(fit: FitResult) -> str:
    """Estimate, SE and 95% normal interval per coefficient, 6 significant digits."""
    est = fit.coefficients
    se = standard_errors(fit)
    names = coefficient_names(fit.beta.p, fit.theta.theta.shape[0])
    lines = ["name,estimate,se,ci_lower,ci_upper"]
    for name, e, s in zip(names, est, se):
        lines.append(",".join([name, _g6(e), _g6(s), _g6(e - Z_95 * s), _g6(e + Z_95 * s)]))
    return "\n".join(lines) + "\n"


def fit_summary(fit: FitResult) -> dict:
    """Full-precision machine-readable companion of the coefficient table."""
    est = fit.coefficients
    se = standard_errors(fit)
    names = coefficient_names(fit.beta.p, fit.theta.theta.shape[0])
    out = {
        "method": fit.method,
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "score_norm": _num(fit.score_norm),
        "bandwidth": _num(fit.bandwidth),
        "anchor": int(fit.beta.anchor) + 1,
        "coefficients": [
            {"name": nm, "estimate": _num(e), "se": _num(s), "ci_lower": _num(e - Z_95 * s), "ci_upper": _num(e + Z_95 * s)}
            for nm, e, s in zip(names, est, se)
        ],
    }
    if fit.full_cov is not None:
        out["covariance"] = [[_num(v) for v in row] for row in fit.full_cov]
    return out


def gcurve_csv(fit: FitResult) -> str:
    """``(t, g_hat, g_prime_hat)`` sorted by ``t`` for plotting."""
    grid = fit.g_grid[np.argsort(fit.g_grid[:, 0], kind="stable")]
    lines = ["t,g,g_prime"] + [",".join(repr(float(v)) for v in row) for row in grid]
    return "\n".join(lines) + "\n"


def selection_csv(result: SelectionResult) -> str:
    beta = " ".join(str(int(j) + 1) for j in result.support_beta)
    theta = " ".join(str(int(j) + 1) for j in result.support_theta)
    return (
        "lambda1,lambda2,support_beta,support_theta,size_beta,size_theta\n"
        f"{repr(float(result.lambda1))},{repr(float(result.lambda2))},{beta},{theta},"
        f"{len(result.support_beta)},{len(result.support_theta)}\n"
    )


def bic_path_csv(result: SelectionResult) -> str:
    lines = ["lambda1,lambda2,bic,df,converged,error"]
    for pt in result.bic_path:
        err = pt.error.replace(",", ";").replace("\n", " ")
        lines.append(f"{repr(float(pt.lambda1))},{repr(float(pt.lambda2))},{repr(float(pt.bic))},{pt.df},{int(pt.converged)},{err}")
    return "\n".join(lines) + "\n"


def metrics_csv(report: MetricsReport) -> str:
    """One row in the replication-table layout followed by selection metrics."""
    table = coefficient_table([report]).splitlines()
    sel = selection_table([report]).splitlines()
    extra_head = sel[0].split(",")[1:7]
    extra_vals = sel[1].split(",")[1:7]
    return f"{table[0]},{','.join(extra_head)}\n{table[1]},{','.join(extra_vals)}\n"


def metrics_summary(report: MetricsReport) -> dict:
    out = {}
    for f in fields(report):
        v = getattr(report, f.name)
        if isinstance(v, np.ndarray):
            out[f.name] = [_num(x) for x in v]
        elif isinstance(v, float):
            out[f.name] = _num(v)
        else:
            out[f.name] = v
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- runners -------------------------------------------------------------------


def load_data(cfg: RunConfig) -> LongitudinalDataset:
    data = read_dataset(cfg.data)
    if data.p < 2:
        raise DomainError("the index needs at least two x columns (p >= 2); p = 1 is out of scope")
    return data


def _finish(cfg: RunConfig, fit: FitResult, out: Path) -> int:
    trace_path = out / "trace.log"
    atomic_write(trace_path, format_trace(fit))
    if not fit.converged:
        print(f"solver did not converge after {fit.iterations} iterations; see {trace_path}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def run_fit(cfg: RunConfig) -> int:
    data = load_data(cfg)
    gcfg = cfg.gee_config()
    fit = solve_qif(data, gcfg) if cfg.method == "qif" else solve_gee(data, gcfg)
    out = Path(cfg.out)
    atomic_write(out / "coefficients.csv", coefficients_csv(fit))
    atomic_write(out / "coefficients.json", _dump_json(fit_summary(fit)))
    atomic_write(out / "gcurve.csv", gcurve_csv(fit))
    return _finish(cfg, fit, out)


def run_select(cfg: RunConfig) -> int:
    data = load_data(cfg)
    result = tune_lambdas(data, cfg.gee_config(), cfg.penalty_config())
    fit = result.fit
    out = Path(cfg.out)
    summary = fit_summary(fit)
    summary.update(
        lambda1=_num(result.lambda1),
        lambda2=_num(result.lambda2),
        support_beta=[int(j) + 1 for j in result.support_beta],
        support_theta=[int(j) + 1 for j in result.support_theta],
    )
    atomic_write(out / "coefficients.csv", coefficients_csv(fit))
    atomic_write(out / "coefficients.json", _dump_json(summary))
    atomic_write(out / "gcurve.csv", gcurve_csv(fit))
    atomic_write(out / "selection.csv", selection_csv(result))
    atomic_write(out / "bic_path.csv", bic_path_csv(result))
    return _finish(cfg, fit, out)


def run_simulate(cfg: RunConfig) -> int:
    maker = DESIGNS[cfg.design]
    kw = {"kind": cfg.kind, "seed": cfg.seed}
    if cfg.n is not None:
        kw["n"] = cfg.n
    design = maker(**kw)
    study = StudyConfig(
        bandwidth=cfg.bandwidth,
        max_iterations=cfg.max_iterations,
        tol=cfg.tol,
        penalty=replace(cfg.penalty_config(), solver="gee"),
        pooling=cfg.pooling,
    )
    reports = run_replications(design, cfg.methods, cfg.replications, study, cfg.parallelism)
    out = Path(cfg.out)
    lines = []
    for method, rep in reports.items():
        atomic_write(out / f"metrics_{method}.csv", metrics_csv(rep))
        atomic_write(out / f"metrics_{method}.json", _dump_json(metrics_summary(rep)))
        lines.append(
            f"{method}\treplications={rep.replications}\tfailures={rep.failures}\tnonconverged={rep.nonconverged}"
        )
    atomic_write(out / "table.csv", coefficient_table(reports.values()))
    atomic_write(out / "trace.log", "\n".join(lines) + "\n")
    return EXIT_OK


RUNNERS = {"fit": run_fit, "select": run_select, "simulate": run_simulate}


# -- argument handling ---------------------------------------------------------


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(" ", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plsim", description="Partially linear single-index models for longitudinal data.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--kind", choices=KINDS, help="working correlation")
    common.add_argument("--pooling", choices=POOLINGS, help="marginal variance model")
    common.add_argument("--bandwidth", type=float, help="fixed bandwidth (default: cross-validated)")
    common.add_argument("--max-iterations", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", help="input CSV with columns subject, y, x1..xp, z1..zq")
    data_opts.add_argument("--method", choices=FIT_METHODS)

    pen = argparse.ArgumentParser(add_help=False)
    pen.add_argument("--lambda1-grid", type=_float_list, help="comma-separated index penalty levels")
    pen.add_argument("--lambda2-grid", type=_float_list, help="comma-separated linear-part penalty levels")
    pen.add_argument("--scad-c", type=float)
    pen.add_argument("--grid-size", type=int, help="size of data-driven grids")
    pen.add_argument("--grid-rule", choices=("noise", "max", "coefficient"), help="how data-driven grids are scaled")

    sub.add_parser("fit", parents=[common, data_opts], help="fit one model")
    sub.add_parser("select", parents=[common, data_opts, pen], help="SCAD selection tuned by BIC")
    sim = sub.add_parser("simulate", parents=[common, pen], help="replicated simulation study")
    sim.add_argument("--design", choices=tuple(DESIGNS))
    sim.add_argument("--n", type=int, help="number of subjects")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replications", type=int)
    sim.add_argument("--methods", type=_str_list, help=f"comma-separated subset of {','.join(METHODS)}")
    sim.add_argument("--parallelism", type=int)
    return parser


_TUPLE_KEYS = {"lambda1_grid", "lambda2_grid", "methods"}


def read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"subcommand"}
    out = {}
    for key, value in raw.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if key in _TUPLE_KEYS and value is not None:
            value = tuple(np.atleast_1d(value).tolist()) if key != "methods" else tuple(value)
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    settings = read_config_file(args.config) if args.config else {}
    known = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in known and value is not None:
            settings[key] = value
    settings["subcommand"] = args.subcommand
    try:
        return RunConfig(**settings)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.error(str(exc))
    try:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return RUNNERS[cfg.subcommand](cfg)
    except (DataFormatError, DomainError, ConfigError, OSError) as exc:
        print(f"plsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError) as exc:
        print(f"plsim: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
