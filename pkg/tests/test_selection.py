import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from plsim.core import DomainError
from plsim.gee import GeeConfig, _smooth, solve_gee
from plsim.qif import QifProblem, marginal_variances, solve_qif
from plsim.selection import (
    PenaltyConfig,
    bic_value,
    make_penalty,
    penalized_gee_solve,
    penalized_qif_solve,
    scad_derivative,
    scad_penalty,
    tune_lambdas,
)
from plsim.simulation import SimDesign, example1, generate_dataset


@pytest.fixture(scope="module")
def data():
    return generate_dataset(example1(60), 0)


@pytest.fixture(scope="module")
def sparse_data():
    beta0 = np.array([3.0, 2.0, 1.0, 0.0, 0.0, 0.0]) / math.sqrt(14)
    design = SimDesign(80, tuple(beta0), (3.0, 1.5, 0.0, 0.0, 0.0), (3,), (0.5,), "exchangeable", 0.6, 31, "sparse")
    return generate_dataset(design, 0)


@pytest.fixture(scope="module")
def sparse_selection(sparse_data):
    return tune_lambdas(sparse_data, GeeConfig(), PenaltyConfig(grid_size=5))


@pytest.mark.parametrize("x, expected", [(0.3, 0.5), (1.0, 0.85 / 2.7), (2.0, 0.0)])
def test_scad_derivative_branches(x, expected):
    assert scad_derivative(x, 0.5, 3.7) == pytest.approx(expected, abs=1e-12)


@given(st.floats(0.01, 5.0), st.floats(2.1, 6.0))
def test_scad_derivative_continuous_and_supported(lam, c):
    mesh = np.linspace(0.0, 1.5 * c * lam, 2001)
    d = scad_derivative(mesh, lam, c)
    assert np.all(np.diff(d) <= 1e-12)
    assert np.all(d[mesh > c * lam] == 0.0)
    assert np.max(np.abs(np.diff(d))) <= (mesh[1] - mesh[0]) / (c - 1) + 1e-12
    for knot in (lam, c * lam):
        assert scad_derivative(knot - 1e-9, lam, c) == pytest.approx(scad_derivative(knot + 1e-9, lam, c), abs=1e-8)


@given(st.floats(0.01, 5.0), st.floats(2.1, 6.0))
def test_scad_penalty_continuous_and_flat(lam, c):
    for knot in (lam, c * lam):
        assert scad_penalty(knot - 1e-9, lam, c) == pytest.approx(scad_penalty(knot + 1e-9, lam, c), abs=1e-7 * max(1, lam * lam))
    assert scad_penalty(2 * c * lam, lam, c) == pytest.approx((c + 1) * lam * lam / 2)


def test_scad_rejects_small_c():
    with pytest.raises(DomainError):
        scad_derivative(1.0, 0.5, 2.0)


def test_zero_penalty_gee_matches_unpenalized(data):
    cfg = GeeConfig(bandwidth=0.6)
    a = penalized_gee_solve(data, cfg, PenaltyConfig(), 0.0, 0.0)
    b = solve_gee(data, cfg)
    assert_allclose(a.coefficients, b.coefficients, atol=1e-8)


def test_zero_penalty_qif_matches_unpenalized(data):
    cfg = GeeConfig(bandwidth=0.6)
    a = penalized_qif_solve(data, cfg, PenaltyConfig(solver="qif"), 0.0, 0.0)
    b = solve_qif(data, cfg)
    assert_allclose(a.coefficients, b.coefficients, atol=1e-8)


def test_huge_penalty_shrinks_everything(sparse_data):
    fit = penalized_gee_solve(sparse_data, GeeConfig(bandwidth=0.8), PenaltyConfig(), 1e3, 1e3)
    assert np.all(fit.theta.theta == 0)
    unit = np.zeros(sparse_data.p)
    unit[fit.beta.anchor] = 1.0
    assert_allclose(fit.beta.beta, unit)


def test_penalized_qif_not_worse_than_unpenalized_point(sparse_data):
    cfg = GeeConfig(bandwidth=0.8)
    penalty = PenaltyConfig(solver="qif")
    lam1, lam2 = 0.05, 0.1
    base = solve_qif(sparse_data, cfg)
    fit = penalized_qif_solve(sparse_data, cfg, penalty, lam1, lam2, start=(base.beta, base.theta))
    pen = make_penalty(sparse_data.p, sparse_data.q, lam1, lam2, penalty)
    sm = _smooth(sparse_data, base.beta, base.theta.theta, 0.8)
    problem = QifProblem(sparse_data, cfg.kind, base.beta.anchor, 0.8, marginal_variances(sparse_data, sm, cfg.pooling))

    def objective(xi):
        return problem.state(xi).q + float(np.sum(np.where(pen.penalized, pen.value(np.abs(xi)), 0.0)))

    assert fit.beta.anchor == base.beta.anchor
    assert objective(fit.xi) <= objective(base.xi) + 1e-12


def test_bic_values():
    assert bic_value(50.0, 0, 50) == 0.0
    assert bic_value(50.0 * math.e, 0, 50) == pytest.approx(1.0)
    assert bic_value(7.0, 3, 40) - bic_value(7.0, 2, 40) == pytest.approx(math.log(40) / 40)


def test_zero_grid_returns_unpenalized_fit(data):
    cfg = GeeConfig()
    result = tune_lambdas(data, cfg, PenaltyConfig(lambda1_grid=(0.0,), lambda2_grid=(0.0,)))
    plain = solve_gee(data, cfg)
    assert_allclose(result.fit.coefficients, plain.coefficients, atol=1e-12)
    assert len(result.bic_path) == 1


def test_empty_grid_rejected():
    with pytest.raises(DomainError):
        PenaltyConfig(lambda1_grid=())


def test_selection_recovers_sparse_support(sparse_selection):
    result = sparse_selection
    assert list(result.support_beta) == [0, 1, 2]
    assert list(result.support_theta) == [0, 1]
    assert len(result.bic_path) == 25


def test_df_mostly_nonincreasing_in_lambda1(sparse_selection):
    result = sparse_selection
    by_l2 = {}
    for pt in result.bic_path:
        by_l2.setdefault(pt.lambda2, []).append((pt.lambda1, pt.df))
    pairs = ok = 0
    for row in by_l2.values():
        dfs = [df for _, df in sorted(row)]
        for a, b in zip(dfs, dfs[1:]):
            pairs += 1
            ok += b <= a
    assert ok >= 0.8 * pairs
