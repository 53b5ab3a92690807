"""Simulation designs, replicated fits and evaluation metrics.

Data follow ``Y_ik = exp(X_ik^T beta0) + Z_ik^T theta0 + e_ik`` with standard
normal ``X``, uniform ``Z`` and per-subject errors ``N(0, sigma_i^2 R(rho))``.
Replicate ``k`` of a design draws from ``default_rng([seed, k])`` so every
method sees the same datasets regardless of scheduling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FitResult, IndexParam, LongitudinalDataset, Subject, ThetaParam
from .correlation import CorrelationKind, build_correlation
from .gee import GeeConfig, solve_gee
from .qif import solve_qif
from .selection import PenaltyConfig, tune_lambdas

log = logging.getLogger(__name__)


def _split_groups(n: int, values: tuple) -> np.ndarray:
    """Assign ``values[g]`` to subjects ``[n g / G] .. [n (g+1) / G] - 1``."""
    g = len(values)
    bounds = [(n * k) // g for k in range(g + 1)]
    out = np.empty(n, dtype=np.asarray(values).dtype)
    for k in range(g):
        out[bounds[k] : bounds[k + 1]] = values[k]
    return out


@dataclass(frozen=True)
class SimDesign:
    """Data-generating process.

    ``sigmas`` and ``cluster_sizes`` are split across consecutive equal-size
    subject groups; ``sigmas=(1, 2)`` gives the first ``[n/2]`` subjects
    sigma 1 and the rest sigma 2.
    """

    n: int
    beta0: tuple
    theta0: tuple
    cluster_sizes: tuple = (3,)
    sigmas: tuple = (1.0,)
    kind: str = "exchangeable"
    rho: float = 0.6
    seed: int = 2024
    name: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.beta0, dtype=float)
        if abs(np.linalg.norm(b) - 1.0) > 1e-12:
            raise ValueError("beta0 must have unit norm")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be nonnegative")
        object.__setattr__(self, "kind", CorrelationKind.parse(self.kind))

    @property
    def p(self) -> int:
        return len(self.beta0)

    @property
    def q(self) -> int:
        return len(self.theta0)

    @property
    def sizes(self) -> np.ndarray:
        return _split_groups(self.n, tuple(int(m) for m in self.cluster_sizes))

    @property
    def subject_sigmas(self) -> np.ndarray:
        return _split_groups(self.n, tuple(float(s) for s in self.sigmas))

    @property
    def beta_support(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.beta0) != 0)

    @property
    def theta_support(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.theta0) != 0)


def example1(n: int = 60, kind: str = "exchangeable", seed: int = 2024) -> SimDesign:
    return SimDesign(n, tuple(np.array([3.0, 2.0, 1.0]) / math.sqrt(14)), (0.3,), (3,), (1.0, 2.0), kind, 0.6, seed, "example1")


def example2(n: int = 60, kind: str = "exchangeable", seed: int = 2024) -> SimDesign:
    return SimDesign(n, tuple(np.array([3.0, 2.0, 1.0]) / math.sqrt(14)), (0.3,), (3, 4, 5), (1.0, 2.0, 3.0), kind, 0.6, seed, "example2")


def example3(n: int = 100, kind: str = "exchangeable", seed: int = 2024) -> SimDesign:
    beta0 = np.zeros(20)
    beta0[:3] = np.array([3.0, 2.0, 1.0]) / math.sqrt(14)
    theta0 = np.zeros(30)
    theta0[:2] = [3.0, 1.5]
    return SimDesign(n, tuple(beta0), tuple(theta0), (3,), (0.5, 1.0, 2.0), kind, 0.6, seed, "example3")


def link(t):
    return np.exp(t)


def generate_dataset(design: SimDesign, replicate: int = 0) -> LongitudinalDataset:
    rng = np.random.default_rng([design.seed, replicate])
    beta0 = np.asarray(design.beta0, dtype=float)
    theta0 = np.asarray(design.theta0, dtype=float)
    chol = {}
    subjects = []
    for i, (m, sigma) in enumerate(zip(design.sizes, design.subject_sigmas)):
        m = int(m)
        if m not in chol:
            chol[m] = np.linalg.cholesky(build_correlation(design.kind, design.rho, m))
        x = rng.standard_normal((m, design.p))
        z = rng.uniform(0.0, 1.0, (m, design.q))
        e = sigma * (chol[m] @ rng.standard_normal(m))
        y = link(x @ beta0) + z @ theta0 + e
        subjects.append(Subject(y, x, z, id=i + 1))
    return LongitudinalDataset(tuple(subjects))


@dataclass(frozen=True)
class MetricsReport:
    """Replication summary for one method.

    ``bias_*`` and ``se_*`` are per coefficient (mean error and standard
    deviation across replications).  ``replications`` counts the fits that
    went into the averages; ``failures`` those excluded after an error.
    """

    method: str
    replications: int
    failures: int
    nonconverged: int
    bias_beta: np.ndarray
    se_beta: np.ndarray
    bias_theta: np.ndarray
    se_theta: np.ndarray
    mse_beta: float
    mse_theta: float
    mse_g: float
    r2_beta: float
    r2_theta: float
    tn_beta: float
    tp_beta: float
    tn_theta: float
    tp_theta: float


def r_squared(estimate, truth) -> float:
    """Squared cosine between an estimate and the truth; sign-blind."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    denom = float(estimate @ estimate) * float(truth @ truth)
    if denom == 0.0:
        return 0.0
    return float(estimate @ truth) ** 2 / denom


def _support_counts(estimate, truth) -> tuple[int, int]:
    zero = np.asarray(truth) == 0
    est_zero = np.asarray(estimate) == 0
    return int(np.sum(zero & est_zero)), int(np.sum(~zero & ~est_zero))


@dataclass(frozen=True)
class ReplicateOutcome:
    """What one fit contributes to a report; small enough to ship between processes."""

    beta: np.ndarray | None
    theta: np.ndarray | None
    mse_g: float = math.nan
    converged: bool = False
    error: str = ""


def outcome_from_fit(fit: FitResult, data: LongitudinalDataset, design: SimDesign) -> ReplicateOutcome:
    """Record estimates and the link error ``g_hat(t_hat) - g(t)`` averaged over observations."""
    g_true = link(data.x @ np.asarray(design.beta0, dtype=float))
    mse_g = float(np.mean((fit.g_grid[:, 1] - g_true) ** 2))
    return ReplicateOutcome(fit.beta.beta.copy(), fit.theta.theta.copy(), mse_g, bool(fit.converged))


def compute_metrics(method: str, beta0, theta0, outcomes) -> MetricsReport:
    """Aggregate replicate outcomes; failed outcomes are counted and excluded.

    Raises
    ------
    ValueError
        If no outcome succeeded or dimensions disagree with the truth.
    """
    beta0 = np.asarray(beta0, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    good = [o for o in outcomes if not o.error]
    failures = len(outcomes) - len(good)
    if not good:
        raise ValueError(f"{method}: no successful replications")
    b = np.array([o.beta for o in good])
    t = np.array([o.theta for o in good])
    if b.shape[1] != beta0.shape[0] or t.shape[1] != theta0.shape[0]:
        raise ValueError(f"{method}: estimate dimensions {b.shape[1]}, {t.shape[1]} do not match truth {beta0.shape[0]}, {theta0.shape[0]}")
    ddof = 1 if len(good) > 1 else 0
    counts_b = np.array([_support_counts(x, beta0) for x in b])
    counts_t = np.array([_support_counts(x, theta0) for x in t])
    return MetricsReport(
        method=method,
        replications=len(good),
        failures=failures,
        nonconverged=sum(not o.converged for o in good),
        bias_beta=b.mean(axis=0) - beta0,
        se_beta=b.std(axis=0, ddof=ddof),
        bias_theta=t.mean(axis=0) - theta0,
        se_theta=t.std(axis=0, ddof=ddof),
        mse_beta=float(np.mean(np.mean((b - beta0) ** 2, axis=1))),
        mse_theta=float(np.mean(np.mean((t - theta0) ** 2, axis=1))),
        mse_g=float(np.mean([o.mse_g for o in good])),
        r2_beta=float(np.mean([r_squared(x, beta0) for x in b])),
        r2_theta=float(np.mean([r_squared(x, theta0) for x in t])),
        tn_beta=float(counts_b[:, 0].mean()),
        tp_beta=float(counts_b[:, 1].mean()),
        tn_theta=float(counts_t[:, 0].mean()),
        tp_theta=float(counts_t[:, 1].mean()),
    )


def oracle_fit(data: LongitudinalDataset, design: SimDesign, cfg: GeeConfig | None = None, solver: str = "gee") -> FitResult:
    """Fit on the true-support columns only, then re-embed with exact zeros."""
    cfg = GeeConfig(kind=design.kind) if cfg is None else cfg
    xs, zs = design.beta_support, design.theta_support
    if xs.size < 2:
        raise ValueError("the oracle index needs at least two nonzero beta components")
    sub = data.select_columns(xs, zs)
    fit = solve_gee(sub, cfg) if solver == "gee" else solve_qif(sub, cfg)
    beta = np.zeros(design.p)
    beta[xs] = fit.beta.beta
    theta = np.zeros(design.q)
    theta[zs] = fit.theta.theta
    anchor = int(xs[fit.beta.anchor])
    return replace(fit, beta=IndexParam(beta, anchor), theta=ThetaParam(theta), sandwich_cov=None, full_cov=None, info={**fit.info, "oracle": True})


METHODS = ("independence", "gee", "qif", "penalized_gee", "penalized_qif", "oracle_gee", "oracle_qif")


@dataclass(frozen=True)
class StudyConfig:
    """Solver settings for a replication study.

    ``working`` is the working correlation for the correlated methods
    (defaults to the design's kind).  ``penalty`` configures the penalized
    methods.
    """

    working: str | None = None
    bandwidth: float | None = None
    max_iterations: int = 100
    tol: float = 1e-6
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    pooling: str = "pooled"
    reselect_bandwidth: bool = False

    def gee_config(self, design: SimDesign, independence: bool = False) -> GeeConfig:
        common = dict(max_iterations=self.max_iterations, tol=self.tol, bandwidth=self.bandwidth, reselect_bandwidth=self.reselect_bandwidth)
        if independence:
            return GeeConfig.independence(**common)
        kind = design.kind if self.working is None else self.working
        return GeeConfig(kind=kind, pooling=self.pooling, **common)


def fit_method(method: str, data: LongitudinalDataset, design: SimDesign, study: StudyConfig) -> FitResult:
    if method == "independence":
        return solve_gee(data, study.gee_config(design, independence=True))
    cfg = study.gee_config(design)
    if method == "gee":
        return solve_gee(data, cfg)
    if method == "qif":
        return solve_qif(data, cfg)
    if method in ("penalized_gee", "penalized_qif"):
        penalty = replace(study.penalty, solver=method.split("_")[1])
        return tune_lambdas(data, cfg, penalty).fit
    if method in ("oracle_gee", "oracle_qif"):
        return oracle_fit(data, design, cfg, solver=method.split("_")[1])
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def run_replicate(design: SimDesign, methods: tuple, study: StudyConfig, replicate: int) -> dict:
    """All methods on replicate ``replicate``; errors are captured per method."""
    data = generate_dataset(design, replicate)
    out = {}
    for method in methods:
        try:
            fit = fit_method(method, data, design, study)
            out[method] = outcome_from_fit(fit, data, design)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.warning("replicate %d, %s failed: %s", replicate, method, exc)
            out[method] = ReplicateOutcome(None, None, error=f"{type(exc).__name__}: {exc}")
    return out


def _run_replicate_args(args):
    return run_replicate(*args)


def run_replications(
    design: SimDesign,
    methods=("independence", "gee", "qif"),
    replications: int = 100,
    study: StudyConfig | None = None,
    parallelism: int = 1,
    failure_limit: float = 0.2,
) -> dict:
    """Replicated study; returns ``{method: MetricsReport}``.

    Replicate ``k`` always uses the substream ``(seed, k)`` and results are
    reduced in replicate order, so reports do not depend on ``parallelism``.

    Raises
    ------
    RuntimeError
        If more than ``failure_limit`` of the replications fail for a method.
    """
    if replications < 1:
        raise ValueError("need at least one replication")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    study = StudyConfig() if study is None else study
    jobs = [(design, methods, study, k) for k in range(replications)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_replicate_args, jobs))
    else:
        results = [_run_replicate_args(j) for j in jobs]
    reports = {}
    for m in methods:
        outcomes = [r[m] for r in results]
        failed = sum(bool(o.error) for o in outcomes)
        if failed > failure_limit * replications:
            first = next(o.error for o in outcomes if o.error)
            raise RuntimeError(f"{m}: {failed} of {replications} replications failed (first: {first})")
        reports[m] = compute_metrics(m, design.beta0, design.theta0, outcomes)
    return reports


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def coefficient_table(reports) -> str:
    """Delimited table: bias(SE) per coefficient, then MSE_beta, MSE_theta, MSE_g."""
    reports = list(reports)
    p = reports[0].bias_beta.shape[0]
    q = reports[0].bias_theta.shape[0]
    header = ["method"] + [f"beta{j + 1}" for j in range(p)] + [f"theta{j + 1}" for j in range(q)]
    header += ["mse_beta", "mse_theta", "mse_g", "replications", "failures", "nonconverged"]
    lines = [",".join(header)]
    for r in reports:
        cells = [r.method]
        cells += [f"{_fmt(b)}({_fmt(s)})" for b, s in zip(r.bias_beta, r.se_beta)]
        cells += [f"{_fmt(b)}({_fmt(s)})" for b, s in zip(r.bias_theta, r.se_theta)]
        cells += [_fmt(r.mse_beta), _fmt(r.mse_theta), _fmt(r.mse_g), str(r.replications), str(r.failures), str(r.nonconverged)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def selection_table(reports) -> str:
    """Delimited table of R^2, TN and TP for beta and theta."""
    header = "method,r2_beta,tn_beta,tp_beta,r2_theta,tn_theta,tp_theta,mse_beta,mse_theta,replications,failures"
    lines = [header]
    for r in reports:
        vals = [r.r2_beta, r.tn_beta, r.tp_beta, r.r2_theta, r.tn_theta, r.tp_theta, r.mse_beta, r.mse_theta]
        lines.append(",".join([r.method] + [_fmt(v) for v in vals] + [str(r.replications), str(r.failures)]))
    return "\n".join(lines) + "\n"
