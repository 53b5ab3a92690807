"""SCAD-penalized GEE and QIF with BIC tuning of the two penalty levels.

``lambda1`` penalizes the free index coordinates ``beta^(r)`` and
``lambda2`` the linear coefficients ``theta``.  The anchor coordinate of
``beta`` is derived from the others and is never penalized.
"""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DomainError, FitResult, IndexParam, LongitudinalDataset
from .gee import (
    GeeConfig,
    _Penalty,
    _smooth,
    build_lambda_hat,
    fisher_scoring,
    gee_information,
    initial_estimate,
    solve_gee,
    subject_scores,
    working_covariance,
)
from .kernel import default_grid
from .qif import QifProblem, gamma_hat, gauss_newton, marginal_variances, qif_state, solve_qif

log = logging.getLogger(__name__)


def _check_c(c: float) -> None:
    if not c > 2:
        raise DomainError(f"SCAD shape c must exceed 2, got {c}")


def scad_derivative(x, lam: float, c: float = 3.7):
    """``p'_lambda(x)`` for ``x >= 0``: ``lam`` up to ``lam``, then ``(c lam - x)_+ / (c - 1)``."""
    _check_c(c)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("scad_derivative needs x >= 0")
    out = np.where(x <= lam, lam, np.maximum(c * lam - x, 0.0) / (c - 1.0))
    return float(out) if out.ndim == 0 else out


def scad_penalty(x, lam: float, c: float = 3.7):
    """``p_lambda(x)`` for ``x >= 0``; the integral of :func:`scad_derivative` from 0."""
    _check_c(c)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("scad_penalty needs x >= 0")
    middle = -(x * x - 2.0 * c * lam * x + lam * lam) / (2.0 * (c - 1.0))
    out = np.where(x <= lam, lam * x, np.where(x <= c * lam, middle, 0.5 * (c + 1.0) * lam * lam))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty and tuning settings.

    ``lambda1_grid``/``lambda2_grid`` of ``None`` request data-driven
    grids of ``grid_size`` log-spaced values (see :func:`default_lambda_grids`).
    ``solver`` is ``"gee"`` or ``"qif"``.
    """

    c: float = 3.7
    lambda1_grid: tuple | None = None
    lambda2_grid: tuple | None = None
    zero_threshold: float = 1e-4
    max_inner_iterations: int = 100
    solver: str = "gee"
    grid_size: int = 8
    grid_span: float = 100.0
    grid_rule: str = "noise"
    warm_start: bool = True

    def __post_init__(self):
        _check_c(self.c)
        for name in ("lambda1_grid", "lambda2_grid"):
            grid = getattr(self, name)
            if grid is None:
                continue
            grid = tuple(float(v) for v in np.atleast_1d(grid))
            if not grid:
                raise DomainError(f"{name} is empty")
            if any(not (v >= 0 and math.isfinite(v)) for v in grid):
                raise DomainError(f"{name} must hold nonnegative finite values")
            object.__setattr__(self, name, grid)
        if self.solver not in ("gee", "qif"):
            raise DomainError(f"unknown solver {self.solver!r}; expected gee|qif")
        if not self.zero_threshold > 0:
            raise DomainError("zero_threshold must be positive")
        if self.grid_rule not in ("noise", "max", "coefficient"):
            raise DomainError(f"unknown grid_rule {self.grid_rule!r}; expected noise|max|coefficient")
        if self.grid_size < 1 or not self.grid_span >= 1:
            raise DomainError("grid_size must be >= 1 and grid_span >= 1")


def make_penalty(p: int, q: int, lambda1: float, lambda2: float, penalty: PenaltyConfig) -> _Penalty:
    if lambda1 < 0 or lambda2 < 0:
        raise DomainError("penalty levels must be nonnegative")
    lam = np.concatenate([np.full(p - 1, float(lambda1)), np.full(q, float(lambda2))])
    c = penalty.c

    def derivative(a):
        return np.where(a <= lam, lam, np.maximum(c * lam - a, 0.0) / (c - 1.0))

    def value(a):
        middle = -(a * a - 2.0 * c * lam * a + lam * lam) / (2.0 * (c - 1.0))
        return np.where(a <= lam, lam * a, np.where(a <= c * lam, middle, 0.5 * (c + 1.0) * lam * lam))

    return _Penalty(derivative, value, lam > 0, threshold=penalty.zero_threshold)


def _inner_cfg(cfg: GeeConfig, penalty: PenaltyConfig) -> GeeConfig:
    return replace(cfg, max_iterations=penalty.max_inner_iterations)


def penalized_gee_solve(
    data: LongitudinalDataset,
    cfg: GeeConfig,
    penalty: PenaltyConfig,
    lambda1: float,
    lambda2: float,
    start=None,
    h: float | None = None,
) -> FitResult:
    """Penalized GEE by local quadratic approximation of SCAD.

    Each step solves ``(Pi + n E) d = Q - n E xi`` with
    ``E = diag(p'(|xi_j|) / (|xi_j| + 1e-8))``.  Coordinates falling below
    ``zero_threshold`` are set to zero and frozen.  Zero penalty levels
    reproduce :func:`solve_gee`.
    """
    pen = make_penalty(data.p, data.q, lambda1, lambda2, penalty)
    inner = _inner_cfg(cfg, penalty)
    if not pen.penalized.any():
        return solve_gee(data, inner, start=start, h=h)
    return fisher_scoring(data, inner, start=start, penalty=pen, h=h, method="penalized_gee")


def _penalized_qif_value(problem: QifProblem, pen: _Penalty, xi: np.ndarray) -> float:
    n = problem.data.n
    pen_val = float(np.sum(np.where(pen.penalized, pen.value(np.abs(xi)), 0.0)))
    return n * problem.state(xi).q + n * pen_val


def qif_local_min_certificate(data, fit: FitResult, pen: _Penalty, cfg: GeeConfig, step: float = 1e-5) -> bool:
    """True when no single-coordinate move of ``+-step`` lowers the penalized objective.

    Zeroed coordinates are included, so a spuriously killed coefficient
    shows up as an ascent failure.
    """
    xi = fit.xi
    smooth = _smooth(data, fit.beta, fit.theta.theta, fit.bandwidth)
    problem = QifProblem(data, cfg.kind, fit.beta.anchor, fit.bandwidth, marginal_variances(data, smooth, cfg.pooling))
    base = _penalized_qif_value(problem, pen, xi)
    tol = 1e-10 * max(1.0, abs(base))
    p = data.p
    for j in range(xi.shape[0]):
        for sign in (1.0, -1.0):
            trial = xi.copy()
            trial[j] += sign * step
            if np.linalg.norm(trial[: p - 1]) >= 1.0:
                continue
            if _penalized_qif_value(problem, pen, trial) < base - tol:
                return False
    return True


def penalized_qif_solve(
    data: LongitudinalDataset,
    cfg: GeeConfig,
    penalty: PenaltyConfig,
    lambda1: float,
    lambda2: float,
    start=None,
    h: float | None = None,
) -> FitResult:
    """Minimize ``n Q_n + n sum p_lambda(|xi_j|)`` by Gauss-Newton with the SCAD LQA.

    ``fit.info["local_min"]`` records the coordinate-perturbation
    certificate of :func:`qif_local_min_certificate`.
    """
    pen = make_penalty(data.p, data.q, lambda1, lambda2, penalty)
    inner = _inner_cfg(cfg, penalty)
    if not pen.penalized.any():
        return solve_qif(data, inner, start=start, h=h)
    fit = gauss_newton(data, inner, start=start, penalty=pen, h=h, method="penalized_qif")
    fit.info["local_min"] = qif_local_min_certificate(data, fit, pen, inner)
    return fit


def residual_sum_of_squares(data: LongitudinalDataset, fit: FitResult) -> float:
    resid = data.y - data.z @ fit.theta.theta - fit.g_grid[:, 1]
    return float(resid @ resid)


def degrees_of_freedom(fit: FitResult) -> int:
    """Nonzero reduced ``beta`` plus nonzero ``theta`` plus one for the anchor."""
    return int(np.count_nonzero(fit.beta.reduced) + np.count_nonzero(fit.theta.theta) + 1)


def bic_value(rss: float, df: int, n: int) -> float:
    """``log(S / n) + df log(n) / n``; ``S = 0`` gives ``-inf`` with a warning."""
    if rss < 0 or n < 1:
        raise DomainError("need S >= 0 and n >= 1")
    if rss == 0:
        warnings.warn("residual sum of squares is zero; BIC is -inf", RuntimeWarning, stacklevel=2)
        return -math.inf
    return math.log(rss / n) + df * math.log(n) / n


def bic_score(data: LongitudinalDataset, fit: FitResult) -> float:
    """BIC with ``n`` the number of subjects."""
    return bic_value(residual_sum_of_squares(data, fit), degrees_of_freedom(fit), data.n)


@dataclass(frozen=True)
class BicPoint:
    lambda1: float
    lambda2: float
    bic: float
    df: int
    converged: bool
    error: str = ""


@dataclass(frozen=True, eq=False)
class SelectionResult:
    fit: FitResult
    lambda1: float
    lambda2: float
    support_beta: np.ndarray
    support_theta: np.ndarray
    bic_path: list = field(default_factory=list)
    pilot: FitResult | None = None


def _criterion_moments(data: LongitudinalDataset, pilot: FitResult, cfg: GeeConfig, solver: str):
    """Per-subject curvature and score standard deviation of each coordinate at the pilot.

    For GEE these are ``diag(Pi) / n`` and ``sqrt(diag(Omega))``; for QIF
    the Hessian of ``Q_n`` and the standard deviation of its gradient.
    """
    smooth = _smooth(data, pilot.beta, pilot.theta.theta, pilot.bandwidth)
    if solver == "gee":
        cov = working_covariance(data, smooth, cfg)
        lam = build_lambda_hat(data, smooth)
        curv = np.diag(gee_information(data, smooth, cov, lam)) / data.n
        u = subject_scores(data, smooth, cov, lam)
        return curv, np.sqrt(np.mean(u * u, axis=0))
    variances = marginal_variances(data, smooth, cfg.pooling)
    gamma = gamma_hat(data, smooth, variances, cfg.kind)
    problem = QifProblem(data, cfg.kind, pilot.beta.anchor, pilot.bandwidth, variances)
    state = qif_state(problem.scores(pilot.xi, smooth))
    info = np.einsum("ld,ld->d", gamma, state.c_solve(gamma))
    return 2.0 * info, 2.0 * np.sqrt(info)


def default_lambda_grids(data: LongitudinalDataset, pilot: FitResult, cfg: GeeConfig, penalty: PenaltyConfig):
    """Log-spaced grids of ``grid_size`` values per block.

    ``grid_rule="noise"`` centres the grid on the level a pure-noise
    coordinate reaches, ``sqrt(log(d) / n)`` times the median per-subject
    score standard deviation of the block (``d`` its size), spanning
    ``[0.5, 8]`` times that.  ``grid_rule="max"`` ends the grid at the level
    that zeroes every coordinate of the block, ``max |xi_j| H_jj``, and runs
    down by ``grid_span``.  ``grid_rule="coefficient"`` spans
    ``[0.01, 1] sqrt(log(max(p, q)) / n)`` times the median absolute pilot
    coefficient, the same for both blocks.
    """
    curv, score_sd = _criterion_moments(data, pilot, cfg, penalty.solver)
    p = data.p
    grids = []
    blocks = (slice(0, p - 1), slice(p - 1, None))
    for block in blocks:
        size = pilot.xi[block].shape[0]
        if size == 0:
            grids.append((0.0,))
            continue
        if penalty.grid_rule == "coefficient":
            hi = math.sqrt(math.log(max(data.p, data.q, 2)) / data.n) * float(np.median(np.abs(pilot.coefficients)))
            lo = 0.01 * hi
        elif penalty.grid_rule == "noise":
            base = math.sqrt(math.log(max(size, 2)) / data.n) * float(np.median(score_sd[block]))
            lo, hi = 0.5 * base, 8.0 * base
        else:
            hi = float(np.max(np.abs(pilot.xi[block]) * curv[block]))
            lo = hi / penalty.grid_span
        if not hi > 0:
            lo, hi = 0.01, 1.0
        grids.append(tuple(np.geomspace(lo, hi, penalty.grid_size)))
    return grids[0], grids[1]


def pilot_fit(data: LongitudinalDataset, cfg: GeeConfig, solver: str = "gee") -> FitResult:
    """Unpenalized fit that fixes the bandwidth for the penalized path.

    With a data-driven bandwidth the pilot walks up the CV grid from the
    selected value until the fit converges, since a high-dimensional index
    can leave the unpenalized equations unsolvable at the CV choice.
    """
    solve = solve_gee if solver == "gee" else solve_qif
    # plain scoring is enough here and keeps large problems cheap
    cfg = replace(cfg, newton_after=cfg.max_iterations + 1, restart=False)
    fit = solve(data, cfg)
    if fit.converged or cfg.bandwidth is not None:
        return fit
    init_param, init_theta = initial_estimate(data)
    grid = default_grid(data, init_param) if cfg.bandwidth_grid is None else np.sort(np.asarray(cfg.bandwidth_grid, dtype=float))
    for h in grid[grid > fit.bandwidth]:
        trial = solve(data, cfg, h=float(h))
        if trial.converged:
            trial.info["pilot_bandwidth_raised"] = True
            return trial
    return fit


def _solve(data, cfg, penalty, l1, l2, start, h):
    solver = penalized_gee_solve if penalty.solver == "gee" else penalized_qif_solve
    return solver(data, cfg, penalty, l1, l2, start=start, h=h)


def tune_lambdas(data: LongitudinalDataset, cfg: GeeConfig = GeeConfig(), penalty: PenaltyConfig = PenaltyConfig()) -> SelectionResult:
    """BIC-optimal ``(lambda1, lambda2)`` over the grid product.

    An unpenalized pilot fit fixes the bandwidth and the anchor and seeds
    the warm starts.  Solves are chained: the first column runs along
    ``lambda2`` at the smallest ``lambda1``, then each row continues along
    increasing ``lambda1`` from its predecessor.  BIC ties go to the larger
    ``lambda1 + lambda2``.

    Raises
    ------
    RuntimeError
        If every grid point fails.
    """
    pilot = pilot_fit(data, cfg, penalty.solver)
    h = pilot.bandwidth
    anchor_param = IndexParam.from_vector(pilot.beta.beta)
    if anchor_param.anchor != pilot.beta.anchor:
        pilot_start = (anchor_param, pilot.theta)
    else:
        pilot_start = (pilot.beta, pilot.theta)
    grid1, grid2 = penalty.lambda1_grid, penalty.lambda2_grid
    if grid1 is None or grid2 is None:
        auto1, auto2 = default_lambda_grids(data, pilot, cfg, penalty)
        grid1 = auto1 if grid1 is None else grid1
        grid2 = auto2 if grid2 is None else grid2
    grid1 = sorted(grid1)
    grid2 = sorted(grid2)
    fits = {}
    path = []
    errors = []
    for i2, l2 in enumerate(grid2):
        for i1, l1 in enumerate(grid1):
            start = pilot_start
            if l1 == 0.0 and l2 == 0.0:
                # the unpenalized point is the plain fit, not a warm-started variant
                start = None
            elif penalty.warm_start:
                prev = fits.get((i1 - 1, i2)) if i1 > 0 else fits.get((i1, i2 - 1))
                if prev is not None:
                    start = (prev.beta, prev.theta)
            try:
                fit = _solve(data, cfg, penalty, l1, l2, start, h)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                errors.append(f"({l1:.6g}, {l2:.6g}): {exc}")
                path.append(BicPoint(l1, l2, math.nan, -1, False, str(exc)))
                continue
            fits[(i1, i2)] = fit
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                bic = bic_score(data, fit)
            path.append(BicPoint(l1, l2, bic, degrees_of_freedom(fit), fit.converged))
    if not fits:
        raise RuntimeError("every grid point failed:\n" + "\n".join(errors))
    scored = [pt for pt in path if pt.df >= 0]
    best = min(pt.bic for pt in scored)
    ties = [pt for pt in scored if pt.bic <= best + 1e-12 * max(1.0, abs(best))]
    chosen = max(ties, key=lambda pt: pt.lambda1 + pt.lambda2)
    fit = fits[(grid1.index(chosen.lambda1), grid2.index(chosen.lambda2))]
    return SelectionResult(
        fit=fit,
        lambda1=chosen.lambda1,
        lambda2=chosen.lambda2,
        support_beta=np.flatnonzero(fit.beta.beta),
        support_theta=np.flatnonzero(fit.theta.theta),
        bic_path=path,
        pilot=pilot,
    )


def format_selection(result: SelectionResult) -> str:
    """Plain-text report: chosen levels, supports (1-based) and the BIC path."""
    out = io.StringIO()
    out.write(f"lambda1\t{result.lambda1:.6g}\n")
    out.write(f"lambda2\t{result.lambda2:.6g}\n")
    out.write("support_beta\t" + ",".join(str(int(j) + 1) for j in result.support_beta) + "\n")
    out.write("support_theta\t" + ",".join(str(int(j) + 1) for j in result.support_theta) + "\n")
    out.write("\nlambda1\tlambda2\tbic\tdf\tconverged\n")
    for pt in result.bic_path:
        out.write(f"{pt.lambda1:.6g}\t{pt.lambda2:.6g}\t{pt.bic:.6g}\t{pt.df}\t{int(pt.converged)}\n")
    return out.getvalue()
