"""Bias-corrected quadratic inference functions.

The inverse working correlation is approximated by a linear combination of
known basis matrices ``M_1 .. M_k``.  Each subject contributes an extended
score stacking ``Lambda_i A_i^{-1/2} M_s A_i^{-1/2} e_i`` over ``s``, and the
estimate minimizes the GMM-type objective ``Q_n = U_bar^T C_n^{-1} U_bar``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import DomainError, FitResult, IndexParam, LongitudinalDataset, ThetaParam
from .correlation import CorrelationKind, basis_matrices, estimate_marginal_variance
from .gee import (
    GeeConfig,
    SingularInformationError,
    _Penalty,
    _smooth,
    block_jacobian,
    build_lambda_hat,
    choose_bandwidth,
    initial_estimate,
    split_xi,
)
from .kernel import SmoothedLink

log = logging.getLogger(__name__)

RIDGE_CONDITION = 1e12
RIDGE_SCALE = 1e-8


class QifConditioningError(np.linalg.LinAlgError):
    """``C_n`` stays singular after the ridge."""


def qif_bases(kind, m: int) -> list:
    """Basis matrices at dimension ``m``; a singleton subject gets ``[1]`` and zeros."""
    kind = CorrelationKind.parse(kind)
    k = len(basis_matrices(kind, 2))
    if m < 2:
        return [np.eye(m)] + [np.zeros((m, m)) for _ in range(k - 1)]
    return basis_matrices(kind, m)


def extended_score(lam_i: np.ndarray, a_i: np.ndarray, residual: np.ndarray, bases) -> np.ndarray:
    """Extended score of one subject.

    Parameters
    ----------
    lam_i : (d, m) array
        ``Lambda_i`` with one column per observation.
    a_i : (m,) array
        Diagonal of ``A_i``.
    residual : (m,) array
        ``Y_i - G_hat - Z_i theta``.
    bases : list of (m, m) arrays

    Returns
    -------
    (k d,) array of the ``k`` stacked blocks.
    """
    a_i = np.asarray(a_i, dtype=float)
    if not np.all(a_i > 0):
        raise DomainError("marginal variances A_i must be positive")
    s = 1.0 / np.sqrt(a_i)
    e = s * np.asarray(residual, dtype=float)
    return np.concatenate([lam_i @ (s * (mat @ e)) for mat in bases])


def extended_scores(data: LongitudinalDataset, smooth: SmoothedLink, variances, kind) -> np.ndarray:
    """All extended scores, shape (n, k d); rows follow subject order."""
    lam = build_lambda_hat(data, smooth).rows
    d = lam.shape[1]
    resid = smooth.residuals_for(data)
    scale = 1.0 / np.sqrt(np.concatenate([np.asarray(v, dtype=float) for v in variances]))
    if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
        raise DomainError("marginal variances A_i must be positive")
    k = len(qif_bases(kind, 2))
    out = np.empty((data.n, k * d))
    for m, subj, rows in data.size_blocks:
        s = scale[rows]
        e = s * resid[rows]
        lam_b = lam[rows]
        for b, mat in enumerate(qif_bases(kind, m)):
            w = s * (e @ mat.T)
            out[subj, b * d : (b + 1) * d] = np.einsum("kmd,km->kd", lam_b, w)
    return out


def gamma_hat(data: LongitudinalDataset, smooth: SmoothedLink, variances, kind) -> np.ndarray:
    """Mean of the stacked ``Lambda_i A^{-1/2} M_s A^{-1/2} Lambda_i^T`` blocks, shape (k d, d)."""
    lam = build_lambda_hat(data, smooth).rows
    d = lam.shape[1]
    scale = 1.0 / np.sqrt(np.concatenate([np.asarray(v, dtype=float) for v in variances]))
    k = len(qif_bases(kind, 2))
    out = np.zeros((k * d, d))
    for m, subj, rows in data.size_blocks:
        lam_b = lam[rows] * scale[rows][:, :, None]
        for b, mat in enumerate(qif_bases(kind, m)):
            out[b * d : (b + 1) * d] += np.einsum("kmd,mn,kne->de", lam_b, mat, lam_b)
    return out / data.n


@dataclass(frozen=True, eq=False)
class QifState:
    """Objective pieces at one parameter value.

    ``c_solve`` applies the (possibly ridged) ``C_n^{-1}``.
    """

    u_bar: np.ndarray
    c: np.ndarray
    q: float
    ridge: float
    c_factor: tuple | None

    def c_solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.c_factor, rhs)


def qif_state(scores: np.ndarray) -> QifState:
    """``U_bar``, ``C_n`` and ``Q_n`` from the (n, l) extended scores.

    ``C_n`` gets a ``1e-8 trace / l`` ridge when its condition number
    exceeds ``1e12``.  All-zero scores give ``Q_n = 0``.
    """
    scores = np.asarray(scores, dtype=float)
    n, l = scores.shape
    u_bar = scores.mean(axis=0)
    c = scores.T @ scores / n
    c = 0.5 * (c + c.T)
    if not np.any(u_bar) and not np.any(c):
        return QifState(u_bar, c, 0.0, 0.0, None)
    eig = np.linalg.eigvalsh(c)
    ridge = 0.0
    if eig[0] <= 0 or eig[-1] / eig[0] > RIDGE_CONDITION:
        ridge = RIDGE_SCALE * np.trace(c) / l
    try:
        factor = linalg.cho_factor(c + ridge * np.eye(l))
    except linalg.LinAlgError:
        raise QifConditioningError(f"C_n is singular even after ridge; smallest eigenvalue {eig[0]:.3g}") from None
    q = float(u_bar @ linalg.cho_solve(factor, u_bar))
    return QifState(u_bar, c, max(q, 0.0), ridge, factor)


def marginal_variances(data: LongitudinalDataset, smooth: SmoothedLink, pooling: str) -> list:
    if pooling == "none":
        return [np.ones(int(m)) for m in data.sizes]
    return estimate_marginal_variance(data.split(smooth.residuals_for(data)), pooling)


def qif_objective(data: LongitudinalDataset, param: IndexParam, theta, smooth: SmoothedLink | None, cfg: GeeConfig, variances=None):
    """``(Q_n, U_bar, C_n)`` at ``(beta, theta)``.

    ``smooth`` defaults to the CV-bandwidth smoother at the given point and
    ``variances`` to the estimate from its residuals.
    """
    theta = np.asarray(theta.theta if isinstance(theta, ThetaParam) else theta, dtype=float)
    if smooth is None:
        smooth = _smooth(data, param, theta, choose_bandwidth(data, param, theta, cfg))
    if variances is None:
        variances = marginal_variances(data, smooth, cfg.pooling)
    state = qif_state(extended_scores(data, smooth, variances, cfg.kind))
    return state.q, state.u_bar, state.c


class QifProblem:
    """Objective and finite-difference derivative at fixed ``h`` and ``A``."""

    def __init__(self, data: LongitudinalDataset, kind, anchor: int, h: float, variances):
        self.data = data
        self.kind = CorrelationKind.parse(kind)
        self.anchor = anchor
        self.h = h
        self.variances = variances

    def smooth(self, xi: np.ndarray) -> SmoothedLink:
        param, theta = split_xi(xi, self.anchor, self.data.p)
        return _smooth(self.data, param, theta, self.h)

    def scores(self, xi: np.ndarray, smooth: SmoothedLink | None = None) -> np.ndarray:
        smooth = self.smooth(xi) if smooth is None else smooth
        return extended_scores(self.data, smooth, self.variances, self.kind)

    def state(self, xi: np.ndarray) -> QifState:
        return qif_state(self.scores(xi))

    def derivatives(self, xi: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Central differences of ``U_bar`` and of ``Q_n`` along the coordinates ``idx``.

        The ``Q_n`` difference includes the movement of ``C_n``, which the
        Gauss-Newton gradient ``2 J^T C^{-1} U_bar`` leaves out.
        """
        p = self.data.p
        cols, grad = [], []
        for j in idx:
            step = 1e-6 * max(1.0, abs(xi[j]))
            plus, minus = xi.copy(), xi.copy()
            plus[j] += step
            minus[j] -= step
            if j < p - 1 and max(np.linalg.norm(plus[: p - 1]), np.linalg.norm(minus[: p - 1])) >= 1.0:
                raise DomainError("finite-difference step leaves the index parameter space")
            s_plus, s_minus = self.scores(plus), self.scores(minus)
            cols.append((s_plus.mean(axis=0) - s_minus.mean(axis=0)) / (2 * step))
            grad.append((qif_state(s_plus).q - qif_state(s_minus).q) / (2 * step))
        if not cols:
            return np.zeros((0, 0)), np.zeros(0)
        return np.column_stack(cols), np.asarray(grad)

    def jacobian(self, xi: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.derivatives(xi, idx)[0]


def gauss_newton(
    data: LongitudinalDataset,
    cfg: GeeConfig,
    start: tuple[IndexParam, ThetaParam] | None = None,
    penalty: _Penalty | None = None,
    h: float | None = None,
    method: str = "qif",
) -> FitResult:
    """Damped Gauss-Newton minimization of ``n Q_n`` (plus ``n sum p_lambda``)."""
    p, q, n = data.p, data.q, data.n
    if p < 2:
        raise DomainError("the index needs p >= 2 covariates")
    param, theta = start if start is not None else initial_estimate(data)
    theta = np.asarray(theta.theta if isinstance(theta, ThetaParam) else theta, dtype=float)
    anchor = param.anchor
    if h is None:
        h = choose_bandwidth(data, param, theta, cfg)
    xi = np.concatenate([param.reduced, theta])
    active = np.ones(xi.shape[0], dtype=bool)
    if penalty is not None:
        dead = penalty.penalized & (np.abs(xi) < penalty.threshold)
        xi[dead] = 0.0
        active &= ~dead

    def objective(problem, v, state):
        val = n * state.q
        if penalty is not None:
            val += n * float(np.sum(np.where(penalty.penalized, penalty.value(np.abs(v)), 0.0)))
        return val

    trace = []
    converged = False
    failed = None
    iterations = 0
    state = None
    grad_norm = np.inf
    for k in range(cfg.max_iterations):
        smooth = _smooth(data, *split_xi(xi, anchor, p), h)
        problem = QifProblem(data, cfg.kind, anchor, h, marginal_variances(data, smooth, cfg.pooling))
        try:
            state = qif_state(problem.scores(xi, smooth))
        except QifConditioningError as exc:
            failed = str(exc)
            break
        current = objective(problem, xi, state)
        idx = np.flatnonzero(active)
        iterations = k + 1
        if idx.size == 0:
            converged = True
            break
        try:
            jdot, grad = problem.derivatives(xi, idx)
        except (DomainError, QifConditioningError) as exc:
            failed = str(exc)
            break
        cj = state.c_solve(jdot)
        hess = 2.0 * jdot.T @ cj
        if penalty is not None:
            e = penalty.weights(xi)[idx]
            hess[np.diag_indices_from(hess)] += e
            grad = grad + e * xi[idx]
        grad_norm = float(np.linalg.norm(grad))
        try:
            step = np.zeros_like(xi)
            step[idx] = -linalg.solve(0.5 * (hess + hess.T), grad, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            failed = "Gauss-Newton curvature is singular; consider a ridge or a different anchor"
            break
        factor = cfg.damping
        accepted = None
        for _ in range(21):
            trial = xi + factor * step
            if penalty is not None:
                dead = active & penalty.penalized & (np.abs(trial) < penalty.threshold)
                trial[dead] = 0.0
            if np.linalg.norm(trial[: p - 1]) < 1.0:
                try:
                    t_state = problem.state(trial)
                except QifConditioningError:
                    t_state = None
                if t_state is not None:
                    t_val = objective(problem, trial, t_state)
                    if np.isfinite(t_val) and t_val <= current:
                        accepted = trial
                        break
            factor *= 0.5
        if accepted is None:
            # no decrease along the direction: the current point is a (damped) stationary point
            delta = 0.0
            trace.append(dict(iteration=iterations, step_norm=0.0, score_norm=grad_norm, h=h, rho=float("nan"), objective=current))
            # the kernel makes Q_n only piecewise smooth, so accept a relative predicted decrease below tol
            converged = float(-grad @ step[idx]) <= cfg.tol * max(1.0, current)
            if not converged:
                failed = "step damping exhausted"
            break
        delta = float(np.linalg.norm(accepted - xi))
        change = abs(current - t_val) / n
        if penalty is not None:
            active &= ~(penalty.penalized & (accepted == 0.0))
        xi = accepted
        trace.append(dict(iteration=iterations, step_norm=delta, score_norm=grad_norm, h=h, rho=float("nan"), objective=t_val, damping=factor))
        if delta < cfg.tol or change < cfg.tol**2:
            converged = True
            break
    param, theta = split_xi(xi, anchor, p)
    smooth = _smooth(data, param, theta, h)
    variances = marginal_variances(data, smooth, cfg.pooling)
    info = dict(kind=cfg.kind.value, active=active.copy(), fallback_points=int(smooth.fallback.sum()), variances=variances)
    if state is not None:
        info["objective"] = state.q
        info["ridge"] = state.ridge
    if failed:
        info["failure"] = failed
    reduced_cov = full_cov = None
    try:
        reduced_cov, full_cov = covariance_qif(data, smooth, variances, cfg.kind, active if penalty is not None else None)
    except (np.linalg.LinAlgError, DomainError) as exc:
        info["covariance_error"] = str(exc)
    return FitResult(
        beta=param,
        theta=ThetaParam(theta),
        g_grid=smooth.g_grid(),
        sandwich_cov=reduced_cov,
        full_cov=full_cov,
        iterations=iterations,
        converged=converged,
        score_norm=grad_norm,
        bandwidth=h,
        method=method,
        trace=trace,
        info=info,
    )


def solve_qif(data: LongitudinalDataset, cfg: GeeConfig = GeeConfig(), start=None, h: float | None = None) -> FitResult:
    """Bias-corrected QIF estimate.

    Each iteration re-smooths at the current point and re-estimates the
    marginal variances, takes a Gauss-Newton step with a central-difference
    derivative of ``U_bar`` and halves it (up to 20 times) until ``Q_n``
    does not increase.  ``C_n`` is recomputed at every evaluated point.
    Converges when the step norm falls below ``tol`` or ``|dQ_n| < tol^2``,
    or when no damped step decreases ``n Q_n`` and the predicted decrease
    is below ``tol`` relative to ``n Q_n``.
    """
    return gauss_newton(data, cfg, start=start, h=h, method="qif")


def covariance_qif(data: LongitudinalDataset, smooth: SmoothedLink, variances, kind, active=None):
    """``(Gamma^T Sigma^{-1} Gamma)^{-1} / n`` and its map to ``(beta, theta)``.

    A boolean ``active`` mask restricts ``Gamma`` to those columns; the other
    coordinates get zero variance.

    Raises
    ------
    SingularInformationError
        If ``Gamma_hat`` has rank below ``p - 1 + q`` or ``Sigma_hat`` is singular.
    """
    gamma = gamma_hat(data, smooth, variances, kind)
    d = gamma.shape[1]
    idx = np.arange(d) if active is None else np.flatnonzero(active)
    gamma = gamma[:, idx]
    rank = np.linalg.matrix_rank(gamma)
    if rank < idx.size:
        raise SingularInformationError(f"Gamma_hat has rank {rank} < {idx.size}; QIF covariance undefined")
    scores = extended_scores(data, smooth, variances, kind)
    sigma = scores.T @ scores / data.n
    try:
        factor = linalg.cho_factor(0.5 * (sigma + sigma.T))
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh(sigma)[0]
        raise SingularInformationError(f"Sigma_hat is singular (smallest eigenvalue {eig:.3g})") from None
    info = gamma.T @ linalg.cho_solve(factor, gamma)
    reduced = np.zeros((d, d))
    try:
        reduced[np.ix_(idx, idx)] = linalg.inv(0.5 * (info + info.T)) / data.n
    except linalg.LinAlgError:
        raise SingularInformationError("Gamma^T Sigma^{-1} Gamma is singular") from None
    reduced = 0.5 * (reduced + reduced.T)
    b = block_jacobian(smooth.param, data.q)
    full = b @ reduced @ b.T
    return reduced, 0.5 * (full + full.T)
