"""Working covariance ``V_i = A_i^{1/2} R_i(rho) A_i^{1/2}`` and QIF basis matrices."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import DomainError

CLAMP_MARGIN = 1e-6


class CorrelationKind(str, enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"

    @classmethod
    def parse(cls, value) -> "CorrelationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = "|".join(k.value for k in cls)
            raise DomainError(f"unknown correlation kind {value!r}; expected one of {valid}") from None


class EstimationError(RuntimeError):
    pass


def rho_bounds(kind, m_max: int) -> tuple[float, float]:
    """Open interval of correlation values giving positive definite matrices."""
    kind = CorrelationKind.parse(kind)
    if kind is CorrelationKind.EXCHANGEABLE:
        return (-1.0 / (m_max - 1) if m_max > 1 else -np.inf), 1.0
    if kind is CorrelationKind.AR1:
        return -1.0, 1.0
    return -np.inf, np.inf


def build_correlation(kind, rho: float, m: int) -> np.ndarray:
    kind = CorrelationKind.parse(kind)
    if kind is CorrelationKind.INDEPENDENCE or m == 1:
        return np.eye(m)
    lo, hi = rho_bounds(kind, m)
    if not lo < rho < hi:
        raise DomainError(f"rho={rho} outside ({lo:.6g}, {hi:.6g}) for {kind.value} with m={m}")
    if kind is CorrelationKind.EXCHANGEABLE:
        return np.full((m, m), rho) + (1.0 - rho) * np.eye(m)
    lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return rho ** lag


def estimate_rho(residuals, kind) -> float:
    """Moment estimate of the working correlation parameter.

    ``residuals`` are per-subject standardized residual vectors.  The
    exchangeable estimate averages all within-subject pairwise products,
    the AR(1) estimate averages lag-one products.  The result is clamped
    ``1e-6`` inside the positive definite range.
    """
    kind = CorrelationKind.parse(kind)
    if kind is CorrelationKind.INDEPENDENCE:
        return 0.0
    total, count, m_max = 0.0, 0, 1
    for r in residuals:
        r = np.asarray(r, dtype=float)
        m = r.shape[0]
        m_max = max(m_max, m)
        if m < 2:
            continue
        if kind is CorrelationKind.EXCHANGEABLE:
            s = r.sum()
            total += 0.5 * (s * s - r @ r)
            count += m * (m - 1) // 2
        else:
            total += r[:-1] @ r[1:]
            count += m - 1
    if count == 0:
        raise EstimationError("no subject with at least 2 observations; cannot estimate rho")
    lo, hi = rho_bounds(kind, m_max)
    return float(np.clip(total / count, lo + CLAMP_MARGIN, hi - CLAMP_MARGIN))


# weight of the pooled variance, in rows, when shrinking per-subject variances
SHRINKAGE_DF = 3.0


def estimate_marginal_variance(residuals, pooling: str = "pooled") -> list:
    """Diagonal of ``A_i`` for every subject.

    ``pooled`` uses one variance ``sum r^2 / N``; ``per_subject`` uses
    ``sum_j r_ij^2 / m_i``; ``shrunk`` uses
    ``(sum_j r_ij^2 + nu s^2) / (m_i + nu)``, the per-subject estimate pulled
    toward the pooled ``s^2`` with ``nu = SHRINKAGE_DF`` prior rows.  Zero
    variances are floored at a tiny positive value so ``A_i`` stays
    invertible.
    """
    residuals = [np.asarray(r, dtype=float) for r in residuals]
    if not residuals:
        raise ValueError("no residuals")
    if pooling == "pooled":
        total = sum(float(r @ r) for r in residuals)
        n_obs = sum(r.shape[0] for r in residuals)
        var = max(total / n_obs, np.finfo(float).tiny)
        return [np.full(r.shape[0], var) for r in residuals]
    if pooling == "shrunk":
        total = sum(float(r @ r) for r in residuals)
        n_obs = sum(r.shape[0] for r in residuals)
        pooled = max(total / n_obs, np.finfo(float).tiny)
        nu = SHRINKAGE_DF
        return [np.full(r.shape[0], (float(r @ r) + nu * pooled) / (r.shape[0] + nu)) for r in residuals]
    if pooling == "per_subject":
        return [np.full(r.shape[0], max(float(r @ r) / r.shape[0], np.finfo(float).tiny)) for r in residuals]
    raise DomainError(f"unknown pooling {pooling!r}; expected pooled|per_subject|shrunk")


def default_pooling(sizes) -> str:
    # per-subject variances from m_i ~ 3 rows are too noisy to weight with
    return "pooled"


def basis_matrices(kind, m: int) -> list:
    kind = CorrelationKind.parse(kind)
    if kind is CorrelationKind.INDEPENDENCE:
        return [np.eye(m)]
    if m < 2:
        raise DomainError(f"{kind.value} basis needs m >= 2, got m={m}")
    if kind is CorrelationKind.EXCHANGEABLE:
        return [np.eye(m), np.ones((m, m)) - np.eye(m)]
    off = np.eye(m, k=1) + np.eye(m, k=-1)
    corners = np.zeros((m, m))
    corners[0, 0] = corners[-1, -1] = 1.0
    return [np.eye(m), off, corners]


@dataclass(frozen=True, eq=False)
class WorkingCovariance:
    """Per-subject working covariances sharing one correlation structure.

    ``variances[i]`` is the diagonal of ``A_i``.
    """

    kind: CorrelationKind
    rho: float
    variances: tuple

    def __post_init__(self):
        kind = CorrelationKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is CorrelationKind.INDEPENDENCE:
            object.__setattr__(self, "rho", 0.0)
        variances = tuple(np.asarray(v, dtype=float).reshape(-1) for v in self.variances)
        for i, v in enumerate(variances):
            if not np.all(v > 0):
                raise DomainError(f"subject {i}: marginal variances must be positive")
        object.__setattr__(self, "variances", variances)

    @classmethod
    def identity(cls, sizes) -> "WorkingCovariance":
        return cls(CorrelationKind.INDEPENDENCE, 0.0, tuple(np.ones(int(m)) for m in sizes))

    def correlation(self, i: int) -> np.ndarray:
        return build_correlation(self.kind, self.rho, self.variances[i].shape[0])

    def matrix(self, i: int) -> np.ndarray:
        s = np.sqrt(self.variances[i])
        return self.correlation(i) * np.outer(s, s)

    def inverse_stack(self, subjects, m: int) -> np.ndarray:
        """``V_i^{-1}`` for the given subjects (all of size ``m``), shape (k, m, m)."""
        r_inv = np.linalg.inv(build_correlation(self.kind, self.rho, m))
        s = 1.0 / np.sqrt(np.stack([self.variances[i] for i in subjects]))
        return r_inv[None, :, :] * s[:, :, None] * s[:, None, :]

    @cached_property
    def inverses(self) -> list:
        cache = {}
        out = []
        for i, v in enumerate(self.variances):
            m = v.shape[0]
            if m not in cache:
                cache[m] = np.linalg.inv(build_correlation(self.kind, self.rho, m))
            s = 1.0 / np.sqrt(v)
            out.append(cache[m] * np.outer(s, s))
        return out


def estimate_working_covariance(residuals, kind, pooling: str | None = None) -> WorkingCovariance:
    """Marginal variances, then rho from the standardized residuals.

    ``pooling="none"`` fixes ``A_i = I``; rho is then estimated from
    residuals standardized by the pooled variance.
    """
    residuals = [np.asarray(r, dtype=float) for r in residuals]
    if pooling is None:
        pooling = default_pooling([r.shape[0] for r in residuals])
    variances = estimate_marginal_variance(residuals, "pooled" if pooling == "none" else pooling)
    std = [r / np.sqrt(v) for r, v in zip(residuals, variances)]
    kind = CorrelationKind.parse(kind)
    rho = estimate_rho(std, kind)
    if pooling == "none":
        variances = [np.ones(r.shape[0]) for r in residuals]
    return WorkingCovariance(kind, rho, tuple(variances))
