"""Local linear smoothing along the single index.

All estimates use the Epanechnikov kernel ``K(u) = 0.75 (1 - u^2)`` on
``|u| <= 1`` with a common bandwidth for the link, its derivative and the
conditional means of ``X`` and ``Z`` given the index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IndexParam, LongitudinalDataset, ThetaParam


class DegenerateSmootherError(ArithmeticError):
    """The local linear system is singular at an evaluation point."""

    def __init__(self, message, t=None, denominator=None):
        super().__init__(message)
        self.t = t
        self.denominator = denominator


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth and a ridge added to the second kernel moment.

    A positive ``ridge`` shrinks the local slope toward zero where the
    design is thin, keeping the weights normalized and continuous in the
    index; ``ridge=0`` is the exact local linear fit.
    """

    bandwidth: float
    ridge: float = 0.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.ridge >= 0:
            raise ValueError(f"ridge must be nonnegative, got {self.ridge}")


@dataclass(frozen=True)
class SmootherEval:
    t: float
    g_hat: float
    g_prime_hat: float
    g1_hat: np.ndarray
    g2_hat: np.ndarray
    effective_mass: float


def kernel_eval(u):
    """Epanechnikov kernel; vectorized."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def _vector(beta) -> np.ndarray:
    return beta.beta if isinstance(beta, IndexParam) else np.asarray(beta, dtype=float).reshape(-1)


def _theta(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, ThetaParam) else np.asarray(theta, dtype=float).reshape(-1)


def _kernel_matrix(t_eval, t_obs, h, exclude=None):
    u = t_obs[None, :] - t_eval[:, None]
    kh = kernel_eval(u / h) / h
    if exclude is not None:
        kh = np.where(exclude, 0.0, kh)
    return u, kh


def _moments(u, kh):
    n_obs = u.shape[1]
    ku = kh * u
    return kh.sum(axis=1) / n_obs, ku.sum(axis=1) / n_obs, (ku * u).sum(axis=1) / n_obs


def _degenerate(s0, denom):
    return denom <= 1e-12 * np.maximum(1.0, s0 * s0)


def _weights(t_eval, t_obs, h, ridge=0.0, exclude=None):
    """Local linear weights for every (evaluation point, observation) pair.

    Returns ``(W, W_tilde, S0, D, ok)``; rows of W/W_tilde where ``ok`` is
    False are zero.
    """
    u, kh = _kernel_matrix(t_eval, t_obs, h, exclude)
    s0, s1, s2 = _moments(u, kh)
    s2 = s2 + ridge
    denom = s0 * s2 - s1 * s1
    ok = ~_degenerate(s0, denom)
    scale = np.where(ok, 1.0 / (t_obs.shape[0] * np.where(ok, denom, 1.0)), 0.0)
    w = kh * (s2[:, None] - u * s1[:, None]) * scale[:, None]
    wt = kh * (u * s0[:, None] - s1[:, None]) * scale[:, None]
    return w, wt, s0, denom, ok


def weight_moments(t, index_values, cfg: KernelConfig):
    """Kernel moments ``S_{n,l}(t) = N^{-1} sum K_h(u - t) (u - t)^l`` for l = 0, 1, 2."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    u, kh = _kernel_matrix(t_arr, np.asarray(index_values, dtype=float).reshape(-1), cfg.bandwidth)
    s = _moments(u, kh)
    if np.ndim(t) == 0:
        return tuple(float(v[0]) for v in s)
    return s


def local_linear_weights(t, index_values, cfg: KernelConfig):
    """Weights ``W`` (level) and ``W_tilde`` (slope) of the local linear fit at ``t``.

    Raises
    ------
    DegenerateSmootherError
        If ``S0 S2 - S1^2`` is not above ``1e-12 max(1, S0^2)`` at some ``t``.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    w, wt, s0, denom, ok = _weights(
        t_arr, np.asarray(index_values, dtype=float).reshape(-1), cfg.bandwidth, cfg.ridge
    )
    if not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        raise DegenerateSmootherError(
            f"local linear fit degenerate at t={t_arr[k]:.6g} (denominator {denom[k]:.3g})",
            t=float(t_arr[k]),
            denominator=float(denom[k]),
        )
    if np.ndim(t) == 0:
        return w[0], wt[0]
    return w, wt


def estimate_g(t, beta, theta, data: LongitudinalDataset, cfg: KernelConfig):
    """Local linear estimates of the link and its derivative at ``t``."""
    w, wt = local_linear_weights(t, data.x @ _vector(beta), cfg)
    resp = data.y - data.z @ _theta(theta)
    return w @ resp, wt @ resp


def estimate_g1_g2(t, beta, data: LongitudinalDataset, cfg: KernelConfig):
    """Smoothed conditional means of ``X`` and ``Z`` given the index at ``t``."""
    w, _ = local_linear_weights(t, data.x @ _vector(beta), cfg)
    return w @ data.x, w @ data.z


def evaluate(t, beta, theta, data: LongitudinalDataset, cfg: KernelConfig) -> SmootherEval:
    """All smoothed quantities at a single point."""
    index = data.x @ _vector(beta)
    w, wt = local_linear_weights(float(t), index, cfg)
    resp = data.y - data.z @ _theta(theta)
    s0, _, _ = weight_moments(float(t), index, cfg)
    return SmootherEval(float(t), float(w @ resp), float(wt @ resp), w @ data.x, w @ data.z, s0)


@dataclass(frozen=True, eq=False)
class SmoothedLink:
    """Smoother output at every observed index point for fixed ``(beta, theta, h)``.

    Rows follow the dataset's stacked row order.
    """

    param: IndexParam
    theta: np.ndarray
    cfg: KernelConfig
    index: np.ndarray
    g: np.ndarray
    g_prime: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    fallback: np.ndarray | None = None

    def residuals_for(self, data: LongitudinalDataset) -> np.ndarray:
        """``Y - G_hat - Z theta`` stacked over subjects."""
        return data.y - self.g - data.z @ self.theta

    def g_grid(self) -> np.ndarray:
        return np.column_stack([self.index, self.g, self.g_prime])


def smooth_observed(
    data: LongitudinalDataset, param: IndexParam, theta, cfg: KernelConfig, strict: bool = True
) -> SmoothedLink:
    """Evaluate the smoother at every observed index value ``X_ij^T beta``.

    With ``strict=False`` a degenerate point (no second distinct index value
    within the bandwidth) falls back to a local constant fit with zero
    slope instead of raising; such rows are flagged in ``fallback``.
    """
    theta = _theta(theta)
    index = data.x @ param.beta
    u, kh = _kernel_matrix(index, index, cfg.bandwidth)
    w, wt, _, denom, ok = _weights(index, index, cfg.bandwidth, cfg.ridge)
    if not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        if strict:
            i = int(data.groups[k])
            j = k - int(data.offsets[i])
            raise DegenerateSmootherError(
                f"local linear fit degenerate at subject {data.subjects[i].id!r} row {j} "
                f"(t={index[k]:.6g}, denominator {denom[k]:.3g})",
                t=float(index[k]),
                denominator=float(denom[k]),
            )
        bad = ~ok
        w[bad] = kh[bad] / kh[bad].sum(axis=1, keepdims=True)
    resp = data.y - data.z @ theta
    return SmoothedLink(
        param=param,
        theta=theta,
        cfg=cfg,
        index=index,
        g=w @ resp,
        g_prime=wt @ resp,
        g1=w @ data.x,
        g2=w @ data.z,
        fallback=~ok,
    )


def is_admissible(data: LongitudinalDataset, beta, h: float) -> bool:
    """True when the full-sample smoother is nondegenerate at all observed points."""
    index = data.x @ _vector(beta)
    return bool(_weights(index, index, h)[4].all())


@dataclass(frozen=True)
class CvPoint:
    bandwidth: float
    error: float
    evaluated: int
    skipped: int
    admissible: bool


def default_grid(data: LongitudinalDataset, beta, size: int = 10) -> np.ndarray:
    """Log-spaced grid on ``[0.5, 3] * sd(index) * N^{-1/5}``."""
    index = data.x @ _vector(beta)
    base = np.std(index) * data.N ** (-0.2)
    if base <= 0:
        raise ValueError("index values have zero spread; cannot build a bandwidth grid")
    return np.geomspace(0.5 * base, 3.0 * base, size)


def cv_scores(data: LongitudinalDataset, beta, theta, grid) -> list:
    """Leave-one-subject-out prediction error for every bandwidth in ``grid``."""
    index = data.x @ _vector(beta)
    resp = data.y - data.z @ _theta(theta)
    same = data.groups[:, None] == data.groups[None, :]
    out = []
    for h in grid:
        h = float(h)
        if not h > 0:
            raise ValueError(f"bandwidths must be positive, got {h}")
        w, _, _, _, ok = _weights(index, index, h, exclude=same)
        err = (resp - w @ resp)[ok]
        error = float(np.mean(err * err)) if err.size else float("inf")
        admissible = bool(_weights(index, index, h)[4].all())
        out.append(CvPoint(h, error, int(ok.sum()), int((~ok).sum()), admissible))
    return out


def select_bandwidth(data: LongitudinalDataset, beta, theta, grid=None) -> float:
    """Bandwidth minimizing leave-one-subject-out CV error over ``grid``.

    The error is averaged over the points where the leave-one-out fit is
    defined.  Near-ties (relative 1e-9, absolute 1e-12 times the response
    scale) go to the smallest bandwidth.
    """
    grid = default_grid(data, beta) if grid is None else np.sort(np.asarray(grid, dtype=float).reshape(-1))
    if grid.size == 0:
        raise ValueError("bandwidth grid is empty")
    scores = [c for c in cv_scores(data, beta, theta, grid) if c.evaluated > 0]
    if not scores:
        raise DegenerateSmootherError("every bandwidth in the grid is degenerate")
    resp = data.y - data.z @ _theta(theta)
    atol = 1e-12 * max(1.0, float(np.mean(resp * resp)))
    best = min(c.error for c in scores)
    return next(c.bandwidth for c in scores if c.error <= best * (1 + 1e-9) + atol)
