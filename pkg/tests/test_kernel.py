import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from plsim.core import IndexParam, LongitudinalDataset
from plsim.kernel import (
    DegenerateSmootherError,
    KernelConfig,
    estimate_g,
    estimate_g1_g2,
    kernel_eval,
    local_linear_weights,
    select_bandwidth,
    smooth_observed,
    weight_moments,
)
from plsim.simulation import example1, generate_dataset


def test_kernel_values():
    assert_allclose(kernel_eval([0.0, 1.0, -1.0, 0.5, 1.5]), [0.75, 0.0, 0.0, 0.5625, 0.0])


def test_moments_single_point():
    assert_allclose(weight_moments(0.3, [0.3], KernelConfig(0.5)), (1.5, 0.0, 0.0))


def test_moments_outside_support():
    assert weight_moments(0.0, [2.0, -3.0], KernelConfig(0.5)) == (0.0, 0.0, 0.0)


def test_moments_match_direct_sum():
    t, h = 0.2, 0.4
    pts = np.array([t - h / 2, t, t + h / 2])
    expected = []
    for ell in range(3):
        total = 0.0
        for u in pts:
            v = (u - t) / h
            k = 0.75 * (1 - v * v) / h if abs(v) <= 1 else 0.0
            total += k * (u - t) ** ell
        expected.append(total / 3)
    assert_allclose(weight_moments(t, pts, KernelConfig(h)), expected, rtol=0, atol=1e-14)


design_points = st.tuples(
    st.lists(st.floats(-2, 2), min_size=3, max_size=40, unique=True),
    st.floats(-1.5, 1.5),
    st.floats(0.3, 2.0),
)


@given(design_points)
def test_weight_identities(args):
    values, t, h = args
    values = np.asarray(values)
    cfg = KernelConfig(h)
    try:
        w, wt = local_linear_weights(t, values, cfg)
    except DegenerateSmootherError:
        return
    u = values - t
    assert_allclose(w.sum(), 1.0, atol=1e-9)
    assert_allclose(wt.sum(), 0.0, atol=1e-9 * max(1.0, np.abs(wt).sum()))
    assert_allclose(w @ u, 0.0, atol=1e-9 * max(1.0, np.abs(w * u).sum()))
    assert_allclose(wt @ u, 1.0, atol=1e-9 * max(1.0, np.abs(wt * u).sum()))


def test_slope_weights_antisymmetric_on_mirrored_design():
    t = 0.1
    offsets = np.array([0.05, 0.2, 0.35])
    pts = np.concatenate([t - offsets, t + offsets])
    w, wt = local_linear_weights(t, pts, KernelConfig(0.5))
    assert_allclose(wt[:3], -wt[3:], atol=1e-14)
    assert_allclose(w[:3], w[3:], atol=1e-14)


def test_weights_match_weighted_least_squares():
    rng = np.random.default_rng(4)
    t, h = 0.0, 0.8
    pts = rng.uniform(-0.5, 0.5, 5)
    y = rng.standard_normal(5)
    k = 0.75 * (1 - ((pts - t) / h) ** 2) / h
    design = np.column_stack([np.ones(5), pts - t])
    coef = np.linalg.solve(design.T @ (k[:, None] * design), design.T @ (k * y))
    w, wt = local_linear_weights(t, pts, KernelConfig(h))
    assert_allclose([w @ y, wt @ y], coef, atol=1e-12)


def test_degenerate_point_raises():
    with pytest.raises(DegenerateSmootherError):
        local_linear_weights(0.0, [0.0, 5.0], KernelConfig(0.5))


def _dataset(rng, n=12, m=3, p=2, q=1):
    return LongitudinalDataset.from_arrays(
        rng.standard_normal(n * m), rng.standard_normal((n * m, p)), rng.uniform(size=(n * m, q)), np.repeat(np.arange(n), m)
    )


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_affine_link_reproduced(seed, a, b):
    rng = np.random.default_rng(seed)
    base = _dataset(rng)
    beta = np.array([0.6, 0.8])
    theta = np.array([0.7])
    y = a + b * (base.x @ beta) + base.z @ theta
    data = LongitudinalDataset.from_arrays(y, base.x, base.z, base.groups)
    index = data.x @ beta
    t = np.quantile(index, [0.3, 0.5, 0.7])
    g, gp = estimate_g(t, beta, theta, data, KernelConfig(1.5))
    assert_allclose(g, a + b * t, atol=1e-10 * max(1, abs(a), abs(b)))
    assert_allclose(gp, np.full(3, b), atol=1e-10 * max(1, abs(a), abs(b)))


def test_constant_response():
    rng = np.random.default_rng(2)
    base = _dataset(rng)
    data = LongitudinalDataset.from_arrays(np.full(base.N, 2.5), base.x, base.z, base.groups)
    g, gp = estimate_g(0.1, [0.6, 0.8], [0.0], data, KernelConfig(1.0))
    assert_allclose([g, gp], [2.5, 0.0], atol=1e-12)


def test_conditional_means_constant_covariate():
    rng = np.random.default_rng(3)
    base = _dataset(rng)
    v = np.array([1.5, -2.0])
    x = np.tile(v, (base.N, 1)) + 0.0
    x[:, 0] += np.linspace(-1e-3, 1e-3, base.N)
    data = LongitudinalDataset.from_arrays(base.y, x, base.z, base.groups)
    g1, _ = estimate_g1_g2(float(np.median(data.x @ [1.0, 0.0])), [1.0, 0.0], data, KernelConfig(0.01))
    assert_allclose(g1, [np.median(x[:, 0]), -2.0], atol=1e-9)


def test_conditional_means_affine_z():
    rng = np.random.default_rng(5)
    base = _dataset(rng)
    beta = np.array([0.6, 0.8])
    z = (base.x @ beta)[:, None]
    data = LongitudinalDataset.from_arrays(base.y, base.x, z, base.groups)
    t = float(np.median(z))
    _, g2 = estimate_g1_g2(t, beta, data, KernelConfig(1.0))
    assert_allclose(g2, [t], atol=1e-10)


def test_conditional_means_match_direct_sum():
    rng = np.random.default_rng(6)
    data = _dataset(rng, p=3, q=2)
    beta = np.array([0.48, 0.6, 0.64])
    t, h = 0.2, 1.2
    index = data.x @ beta
    s = [sum(0.75 * max(0.0, 1 - ((u - t) / h) ** 2) / h * (u - t) ** ell for u in index) / data.N for ell in range(3)]
    w = [0.75 * max(0.0, 1 - ((u - t) / h) ** 2) / h * (s[2] - (u - t) * s[1]) / (s[0] * s[2] - s[1] ** 2) / data.N for u in index]
    w = np.array(w)
    g1, g2 = estimate_g1_g2(t, beta, data, KernelConfig(h))
    assert_allclose(g1, w @ data.x, atol=1e-12)
    assert_allclose(g2, w @ data.z, atol=1e-12)


def test_smooth_observed_fallback_flags_isolated_points():
    x = np.array([[0.0, 0.0], [0.01, 0.0], [0.02, 0.0], [5.0, 0.0]])
    data = LongitudinalDataset.from_arrays(np.arange(4.0), x, np.zeros((4, 0)), [1, 1, 2, 2])
    param = IndexParam(np.array([1.0, 0.0]), 0)
    with pytest.raises(DegenerateSmootherError):
        smooth_observed(data, param, np.zeros(0), KernelConfig(0.5))
    sm = smooth_observed(data, param, np.zeros(0), KernelConfig(0.5), strict=False)
    assert list(sm.fallback) == [False, False, False, True]
    assert_allclose(sm.g[3], 3.0)
    assert sm.g_prime[3] == 0.0


def test_ridge_keeps_weights_normalized():
    pts = np.array([0.0, 0.01, 0.3])
    w, _ = local_linear_weights(0.0, pts, KernelConfig(0.5, ridge=1e-3 * 0.25))
    assert_allclose(w.sum(), 1.0, atol=1e-12)


def test_bandwidth_single_grid_point(small_data):
    assert select_bandwidth(small_data, [0.6, 0.8, 0.0], [1.0], grid=[0.7]) == 0.7


def test_bandwidth_tie_goes_to_smallest():
    rng = np.random.default_rng(8)
    base = _dataset(rng, n=20)
    beta = np.array([0.6, 0.8])
    y = 1.0 + 2.0 * (base.x @ beta)
    data = LongitudinalDataset.from_arrays(y, base.x, np.zeros((base.N, 0)), base.groups)
    assert select_bandwidth(data, beta, np.zeros(0), grid=[0.8, 1.2, 2.0]) == 0.8


@pytest.mark.xfail(strict=True, reason="CV optimum exceeds 1.0 in 9 of 50 replications; 82% interior")
def test_bandwidth_interior_on_example1():
    design = example1(60)
    grid = np.round(np.arange(0.1, 1.01, 0.1), 10)
    interior = 0
    for rep in range(50):
        data = generate_dataset(design, rep)
        h = select_bandwidth(data, design.beta0, design.theta0, grid=grid)
        interior += grid[0] < h < grid[-1]
    assert interior >= 45


def test_bandwidth_boundary_choice_is_genuine():
    # whenever the top of the short grid wins, a longer grid picks at least as large an h
    design = example1(60)
    short = np.round(np.arange(0.1, 1.01, 0.1), 10)
    wide = np.round(np.arange(0.1, 3.01, 0.1), 10)
    for rep in range(50):
        data = generate_dataset(design, rep)
        if select_bandwidth(data, design.beta0, design.theta0, grid=short) == short[-1]:
            assert select_bandwidth(data, design.beta0, design.theta0, grid=wide) >= short[-1]
