"""Bias-corrected GEE for the partially linear single-index model.

The estimating function is

    sum_i Lambda_i V_i^{-1} (Y_i - G_hat(X_i beta) - Z_i theta)

where column ``j`` of ``Lambda_i`` is
``[J^T (X_ij - g1_hat) g'_hat ; Z_ij - g2_hat]``, all smoothed quantities
evaluated at ``X_ij^T beta``.  It is solved by Fisher scoring in
``xi = (reduced beta, theta)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import DomainError, FitResult, IndexParam, LongitudinalDataset, ThetaParam, choose_anchor
from .correlation import CorrelationKind, WorkingCovariance, estimate_working_covariance
from .kernel import (
    DegenerateSmootherError,
    KernelConfig,
    SmoothedLink,
    select_bandwidth,
    smooth_observed,
)

log = logging.getLogger(__name__)


class SingularInformationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GeeConfig:
    """Solver settings shared by the GEE and QIF solvers.

    ``pooling`` selects the marginal variance model: ``"pooled"`` (one
    variance for all rows, the default), ``"shrunk"`` (per-subject variances
    pulled toward the pooled one), ``"per_subject"`` or ``"none"``
    (``A_i = I``).  Working independence is
    ``kind="independence", pooling="none"``.  ``bandwidth=None`` selects
    ``h`` by leave-one-subject-out CV at the initial estimate.
    """

    kind: str = "exchangeable"
    max_iterations: int = 100
    tol: float = 1e-6
    damping: float = 1.0
    bandwidth: float | None = None
    bandwidth_grid: tuple | None = None
    reselect_bandwidth: bool = False
    pooling: str = "pooled"
    restart: bool = True
    newton_after: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", CorrelationKind.parse(self.kind))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.pooling not in ("pooled", "per_subject", "shrunk", "none"):
            raise DomainError(f"unknown pooling {self.pooling!r}")

    @classmethod
    def independence(cls, **kw) -> "GeeConfig":
        return cls(kind="independence", pooling="none", **kw)


@dataclass(frozen=True, eq=False)
class LambdaHat:
    """Stacked ``Lambda_i``: row ``(i, j)`` of ``rows`` is column ``j`` of ``Lambda_i``."""

    rows: np.ndarray

    def blocks(self, data: LongitudinalDataset) -> list:
        return [b.T for b in data.split(self.rows)]


def initial_estimate(data: LongitudinalDataset) -> tuple[IndexParam, ThetaParam]:
    """Pooled OLS of ``Y`` on ``(1, X, Z)``, ignoring within-subject correlation.

    The X coefficients give the index direction, the Z coefficients ``theta``.
    """
    p, q = data.p, data.q
    if data.N <= p + q:
        raise DomainError(f"need N > p + q, got N={data.N}, p+q={p + q}")
    ones = np.ones((data.N, 1))
    design = np.hstack([ones, data.x, data.z])
    if np.linalg.matrix_rank(np.hstack([ones, data.x])) < p + 1:
        raise np.linalg.LinAlgError("rank-deficient X block in the initial regression")
    if np.linalg.matrix_rank(design) < 1 + p + q:
        raise np.linalg.LinAlgError("rank-deficient Z block in the initial regression")
    coef, *_ = np.linalg.lstsq(design, data.y, rcond=None)
    # a response carrying no linear signal in X leaves the direction undetermined
    signal = np.linalg.norm(data.x.std(axis=0) * coef[1 : 1 + p])
    if signal <= 1e-10 * max(float(np.abs(data.y).max()), np.finfo(float).tiny):
        raise DomainError("initial regression gives a zero index direction; cannot choose an anchor")
    r, beta = choose_anchor(coef[1 : 1 + p])
    return IndexParam(beta, r), ThetaParam(coef[1 + p :])


def build_lambda_hat(data: LongitudinalDataset, smooth: SmoothedLink) -> LambdaHat:
    jac = smooth.param.jacobian
    top = ((data.x - smooth.g1) @ jac) * smooth.g_prime[:, None]
    return LambdaHat(np.hstack([top, data.z - smooth.g2]))


def _apply_vinv(data: LongitudinalDataset, cov: WorkingCovariance, mat: np.ndarray) -> np.ndarray:
    """Stacked ``V_i^{-1} mat_i`` for a stacked (N, k) or (N,) array."""
    out = np.empty(mat.shape)
    for m, subj, rows in data.size_blocks:
        vinv = cov.inverse_stack(subj, m)
        if not np.all(np.isfinite(vinv)):
            raise np.linalg.LinAlgError(f"singular working covariance for subject {data.subjects[subj[0]].id!r}")
        out[rows] = np.einsum("kab,kb...->ka...", vinv, mat[rows])
    return out


def gee_score(data: LongitudinalDataset, smooth: SmoothedLink, cov: WorkingCovariance, lam: LambdaHat | None = None) -> np.ndarray:
    lam = build_lambda_hat(data, smooth) if lam is None else lam
    return lam.rows.T @ _apply_vinv(data, cov, smooth.residuals_for(data))


def gee_information(data: LongitudinalDataset, smooth: SmoothedLink, cov: WorkingCovariance, lam: LambdaHat | None = None) -> np.ndarray:
    lam = build_lambda_hat(data, smooth) if lam is None else lam
    info = lam.rows.T @ _apply_vinv(data, cov, lam.rows)
    return 0.5 * (info + info.T)


def subject_scores(data: LongitudinalDataset, smooth: SmoothedLink, cov: WorkingCovariance, lam: LambdaHat | None = None) -> np.ndarray:
    """Per-subject terms ``Lambda_i V_i^{-1} e_i``, shape (n, p-1+q)."""
    lam = build_lambda_hat(data, smooth) if lam is None else lam
    weighted = lam.rows * _apply_vinv(data, cov, smooth.residuals_for(data))[:, None]
    return np.add.reduceat(weighted, data.offsets[:-1], axis=0)


def solve_symmetric(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with a ``1e-10 * trace`` ridge fallback."""
    try:
        return linalg.cho_solve(linalg.cho_factor(mat), rhs)
    except (linalg.LinAlgError, ValueError):
        pass
    ridge = 1e-10 * max(abs(np.trace(mat)), 1e-300)
    try:
        return linalg.cho_solve(linalg.cho_factor(mat + ridge * np.eye(mat.shape[0])), rhs)
    except (linalg.LinAlgError, ValueError):
        raise SingularInformationError(
            "information matrix is numerically singular; consider a ridge or a different anchor"
        ) from None


def block_jacobian(param: IndexParam, q: int) -> np.ndarray:
    """``diag(J, I_q)`` mapping ``xi`` perturbations to ``(beta, theta)``."""
    jac = param.jacobian
    p = param.p
    out = np.zeros((p + q, p - 1 + q))
    out[:p, : p - 1] = jac
    out[p:, p - 1 :] = np.eye(q)
    return out


def sandwich_covariance_gee(data: LongitudinalDataset, smooth: SmoothedLink, cov: WorkingCovariance, active=None):
    """Robust covariance of ``xi_hat`` and of ``(beta_hat, theta_hat)``.

    Returns ``(reduced, full)`` where ``reduced = Pi^{-1} Omega Pi^{-1} / n``
    with ``Pi`` and ``Omega`` the per-subject averages, and ``full`` is the
    reduced covariance mapped through ``diag(J, I_q)``.  With a boolean
    ``active`` mask the sandwich is formed on the active coordinates and the
    others get zero variance.
    """
    lam = build_lambda_hat(data, smooth)
    n = data.n
    pi = gee_information(data, smooth, cov, lam) / n
    u = subject_scores(data, smooth, cov, lam)
    d = pi.shape[0]
    idx = np.arange(d) if active is None else np.flatnonzero(active)
    pi = pi[np.ix_(idx, idx)]
    u = u[:, idx]
    omega = u.T @ u / n
    try:
        pi_inv = linalg.inv(pi)
    except (linalg.LinAlgError, ValueError):
        raise SingularInformationError("information matrix is singular; sandwich covariance undefined") from None
    if not np.all(np.isfinite(pi_inv)):
        raise SingularInformationError("information matrix is singular; sandwich covariance undefined")
    reduced = np.zeros((d, d))
    reduced[np.ix_(idx, idx)] = pi_inv @ omega @ pi_inv / n
    reduced = 0.5 * (reduced + reduced.T)
    b = block_jacobian(smooth.param, data.q)
    full = b @ reduced @ b.T
    return reduced, 0.5 * (full + full.T)


def split_xi(xi: np.ndarray, anchor: int, p: int) -> tuple[IndexParam, np.ndarray]:
    return IndexParam.from_reduced(xi[: p - 1], anchor), xi[p - 1 :]


# ridge on the second kernel moment, in units of h^2; keeps the estimating
# equation continuous where a local window holds a single index value
SMOOTHER_RIDGE = 1e-3


def _smooth(data, param, theta, h):
    return smooth_observed(data, param, theta, KernelConfig(h, SMOOTHER_RIDGE * h * h), strict=False)


def choose_bandwidth(data, param, theta, cfg: GeeConfig) -> float:
    if cfg.bandwidth is not None:
        return float(cfg.bandwidth)
    return select_bandwidth(data, param, theta, cfg.bandwidth_grid)


def working_covariance(data, smooth, cfg: GeeConfig) -> WorkingCovariance:
    return estimate_working_covariance(data.split(smooth.residuals_for(data)), cfg.kind, cfg.pooling)


@dataclass
class _Penalty:
    """Local quadratic approximation of a coordinatewise penalty on ``xi``.

    ``derivative(abs_xi)`` returns ``q_lambda(|xi_j|)`` per coordinate (zero
    where unpenalized); ``value(abs_xi)`` the penalty itself.
    """

    derivative: object
    value: object
    penalized: np.ndarray
    threshold: float = 1e-4
    eps: float = 1e-8

    def weights(self, xi: np.ndarray) -> np.ndarray:
        a = np.abs(xi)
        return np.where(self.penalized, self.derivative(a) / (a + self.eps), 0.0)


@dataclass
class _State:
    xi: np.ndarray
    smooth: SmoothedLink
    h: float
    active: np.ndarray
    trace: list = field(default_factory=list)


def _equation(data, xi, anchor, p, h, cov, penalty, n):
    """Estimating equation at ``xi`` with the working covariance held fixed."""
    param, theta = split_xi(xi, anchor, p)
    smooth = _smooth(data, param, theta, h)
    eq = gee_score(data, smooth, cov, build_lambda_hat(data, smooth))
    if penalty is not None:
        eq = eq - n * penalty.weights(xi) * xi
    return eq, smooth


def _equation_jacobian(data, xi, idx, anchor, p, h, cov, penalty, n, eq0):
    """Forward-difference Jacobian of the fixed-V equation on the coordinates ``idx``."""
    jac = np.empty((idx.size, idx.size))
    for c, j in enumerate(idx):
        step = 1e-6 * max(1.0, abs(xi[j]))
        shifted = xi.copy()
        shifted[j] += step
        jac[:, c] = (_equation(data, shifted, anchor, p, h, cov, penalty, n)[0][idx] - eq0[idx]) / step
    return jac


def _levenberg_steps(jac, resid, count=21):
    """Levenberg-Marquardt steps for ``jac d = -resid`` with increasing damping."""
    jtj = jac.T @ jac
    jtr = jac.T @ resid
    scale = np.maximum(np.diag(jtj), 1e-12 * max(1.0, float(np.max(np.diag(jtj)))))
    mu = 0.0
    for k in range(count):
        try:
            yield -linalg.solve(jtj + mu * np.diag(scale), jtr, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            pass
        mu = 1e-6 if mu == 0.0 else 10.0 * mu


def fisher_scoring(
    data: LongitudinalDataset,
    cfg: GeeConfig,
    start: tuple[IndexParam, ThetaParam] | None = None,
    penalty: _Penalty | None = None,
    h: float | None = None,
    method: str = "gee",
) -> FitResult:
    """Fisher scoring loop shared by :func:`solve_gee` and the penalized solver."""
    p, q, n = data.p, data.q, data.n
    if p < 2:
        raise DomainError("the index needs p >= 2 covariates")
    param, theta = start if start is not None else initial_estimate(data)
    theta = np.asarray(theta.theta if isinstance(theta, ThetaParam) else theta, dtype=float)
    anchor = param.anchor
    if h is None:
        h = choose_bandwidth(data, param, theta, cfg)
    smooth = _smooth(data, param, theta, h)
    xi = np.concatenate([param.reduced, theta])
    active = np.ones(xi.shape[0], dtype=bool)
    if penalty is not None:
        dead = penalty.penalized & (np.abs(xi) < penalty.threshold)
        xi[dead] = 0.0
        active &= ~dead
        if dead.any():
            param, theta = split_xi(xi, anchor, p)
            smooth = _smooth(data, param, theta, h)
    trace = []
    converged = False
    failed = None
    iterations = 0
    base = cfg.damping
    newton = False
    increases = 0
    tiny = 0
    prev_norm = np.inf
    delta = np.inf
    for k in range(cfg.max_iterations + 1):
        if cfg.reselect_bandwidth and k > 0:
            h = choose_bandwidth(data, smooth.param, smooth.theta, cfg)
            smooth = _smooth(data, smooth.param, smooth.theta, h)
        cov = working_covariance(data, smooth, cfg)
        lam = build_lambda_hat(data, smooth)
        score = gee_score(data, smooth, cov, lam)
        info = gee_information(data, smooth, cov, lam)
        eq = score.copy()
        hess = info.copy()
        if penalty is not None:
            e = n * penalty.weights(xi)
            eq -= e * xi
            hess[np.diag_indices_from(hess)] += e
        idx = np.flatnonzero(active)
        eq_norm = float(np.linalg.norm(eq[idx])) if idx.size else 0.0
        # small step and a small re-evaluated equation
        if delta < cfg.tol and eq_norm <= 10.0 * cfg.tol * n:
            converged = True
            break
        if k == cfg.max_iterations:
            break
        tiny = tiny + 1 if newton and delta < cfg.tol else 0
        if tiny >= 5:
            failed = "stalled at a local minimum of the equation norm"
            break
        iterations = k + 1
        progress = eq_norm
        flat = np.zeros(xi.shape[0], dtype=bool)
        if penalty is not None:
            # below lambda the penalized equation can only vanish at zero, so those
            # coordinates are on their way to the threshold and say nothing about progress
            a = np.abs(xi)
            flat = penalty.penalized & (penalty.derivative(a) >= penalty.derivative(np.zeros_like(a)))
            keep = active & ~flat
            progress = float(np.linalg.norm(eq[keep])) if keep.any() else 0.0
        if progress > prev_norm:
            increases += 1
        if penalty is None:
            newton = newton or increases >= cfg.newton_after
        elif progress > prev_norm:
            # LQA weights flip as coordinates cross the SCAD knots; shrink instead
            base = max(0.5 * base, 2.0**-10)
        else:
            base = min(2.0 * base, cfg.damping)
        prev_norm = progress
        accepted = None
        if newton:
            # scoring ignores how the smoother moves with xi; take Levenberg steps on the fixed-V equation
            jac = _equation_jacobian(data, xi, idx, anchor, p, h, cov, penalty, n, eq)
            candidates = ((1.0, d) for d in _levenberg_steps(jac, eq[idx]))
            limit = eq_norm
        else:
            step = np.zeros_like(xi)
            try:
                step[idx] = solve_symmetric(hess[np.ix_(idx, idx)], eq[idx])
            except SingularInformationError as exc:
                failed = str(exc)
                break
            candidates = ((base * 0.5**j, step[idx]) for j in range(21))
            limit = 10.0 * eq_norm
        # LQA contracts flat coordinates toward zero; damping them only slows that down
        full = flat[idx] if not newton else np.zeros(idx.size, dtype=bool)
        for factor, direction in candidates:
            trial = xi.copy()
            trial[idx] += np.where(full, 1.0, factor) * direction
            if penalty is not None:
                dead = active & penalty.penalized & (np.abs(trial) < penalty.threshold)
                trial[dead] = 0.0
            if np.linalg.norm(trial[: p - 1]) < 1.0:
                t_eq, t_smooth = _equation(data, trial, anchor, p, h, cov, penalty, n)
                t_active = active & ~(penalty.penalized & (trial == 0.0)) if penalty is not None else active
                t_norm = float(np.linalg.norm(t_eq[t_active]))
                if np.isfinite(t_norm) and t_norm <= limit:
                    accepted = trial
                    break
        if accepted is None:
            failed = "step damping exhausted"
            trace.append(dict(iteration=iterations, step_norm=float("nan"), score_norm=eq_norm, h=h, rho=cov.rho))
            break
        delta = float(np.linalg.norm(accepted - xi))
        if penalty is not None:
            active &= ~(penalty.penalized & (accepted == 0.0))
        xi, smooth = accepted, t_smooth
        trace.append(dict(iteration=iterations, step_norm=delta, score_norm=eq_norm, h=h, rho=cov.rho, damping=factor, newton=newton))
    param, theta = split_xi(xi, anchor, p)
    info = dict(equation_norm=eq_norm, working=cov, kind=cfg.kind.value, rho=cov.rho, active=active.copy(), fallback_points=int(smooth.fallback.sum()))
    if failed:
        info["failure"] = failed
    if penalty is not None:
        free = active & (penalty.weights(xi) * (np.abs(xi) + penalty.eps) == 0.0)
        info["free_score_norm"] = float(np.linalg.norm(score[free]))
    reduced_cov = full_cov = None
    try:
        reduced_cov, full_cov = sandwich_covariance_gee(data, smooth, cov, active if penalty is not None else None)
    except SingularInformationError:
        pass
    return FitResult(
        beta=param,
        theta=ThetaParam(theta),
        g_grid=smooth.g_grid(),
        sandwich_cov=reduced_cov,
        full_cov=full_cov,
        iterations=iterations,
        converged=converged,
        score_norm=float(np.linalg.norm(score)),
        bandwidth=h,
        method=method,
        trace=trace,
        info=info,
    )


def solve_gee(data: LongitudinalDataset, cfg: GeeConfig = GeeConfig(), start=None, h: float | None = None) -> FitResult:
    """Bias-corrected GEE estimate.

    Each iteration re-smooths ``g, g', g1, g2`` and re-estimates the working
    covariance at the current iterate, then takes the scoring step
    ``xi + Pi^{-1} Q``.  Steps that leave ``||reduced|| < 1`` or inflate the
    equation norm more than tenfold are halved (up to 20 times).  Once the
    equation norm rises, the loop switches to Levenberg steps on a
    finite-difference Jacobian of the equation.  Convergence needs a step
    below ``tol`` and an equation norm below ``10 tol n``.  A failed solve is
    retried once from the working-independence fit.
    """
    independence = cfg.kind is CorrelationKind.INDEPENDENCE and cfg.pooling == "none"
    method = "independence" if independence else "gee"
    fit = fisher_scoring(data, cfg, start=start, h=h, method=method)
    if fit.converged or start is not None or independence or not cfg.restart:
        return fit
    # the fixed-h equation can have spurious minima; retry once from the independence fit
    pilot = fisher_scoring(data, GeeConfig.independence(max_iterations=cfg.max_iterations, tol=cfg.tol), h=fit.bandwidth, method="independence")
    retry = fisher_scoring(data, cfg, start=(pilot.beta, pilot.theta), h=fit.bandwidth, method=method)
    retry.info["restarted"] = True
    if retry.converged or retry.score_norm < fit.score_norm:
        return retry
    fit.info["restarted"] = True
    return fit


def format_trace(fit: FitResult) -> str:
    lines = ["iteration\tstep_norm\tscore_norm\tbandwidth\trho"]
    for t in fit.trace:
        lines.append(f"{t['iteration']}\t{t['step_norm']:.6e}\t{t['score_norm']:.6e}\t{t['h']:.6g}\t{t['rho']:.6g}")
    return "\n".join(lines) + "\n"
