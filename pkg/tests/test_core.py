import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from plsim.core import (
    DataFormatError,
    DomainError,
    IndexParam,
    LongitudinalDataset,
    Subject,
    choose_anchor,
    embed_beta,
    jacobian,
    read_dataset,
    write_dataset,
)


def test_embed_beta_recovers_anchor_from_reduced():
    assert_allclose(embed_beta([0.6, 0.0], 0), [0.8, 0.6, 0.0])


def test_embed_beta_zero_reduced_gives_unit_anchor():
    assert_allclose(embed_beta([0.0, 0.0], 1), [0.0, 1.0, 0.0])


def test_embed_beta_last_anchor():
    beta = embed_beta(np.array([3.0, 2.0]) / math.sqrt(14), 2)
    assert_allclose(beta, np.array([3.0, 2.0, 1.0]) / math.sqrt(14), rtol=1e-14)
    assert_allclose(np.linalg.norm(beta), 1.0, rtol=1e-15)


@pytest.mark.parametrize("reduced", [[0.8, 0.6], [1.0, 0.0], [0.9, 0.9]])
def test_embed_beta_rejects_outside_unit_ball(reduced):
    with pytest.raises(DomainError):
        embed_beta(reduced, 0)


def test_jacobian_known_rows():
    assert_allclose(jacobian([0.6, 0.0], 0), [[-0.75, 0.0], [1.0, 0.0], [0.0, 1.0]])


def test_jacobian_at_zero_has_zero_anchor_row():
    jac = jacobian([0.0, 0.0, 0.0], 2)
    assert_allclose(jac[2], 0.0)
    assert_allclose(np.delete(jac, 2, axis=0), np.eye(3))


reduced_points = st.integers(2, 6).flatmap(
    lambda p: st.tuples(
        st.lists(st.floats(-1, 1), min_size=p - 1, max_size=p - 1),
        st.floats(0.05, 0.95),
        st.integers(0, p - 1),
    )
)


@given(reduced_points)
def test_jacobian_matches_central_differences(point):
    direction, radius, anchor = point
    d = np.asarray(direction)
    if np.linalg.norm(d) < 1e-3:
        d = np.ones_like(d)
    reduced = radius * d / np.linalg.norm(d)
    step = 1e-6
    fd = np.column_stack(
        [(embed_beta(reduced + step * e, anchor) - embed_beta(reduced - step * e, anchor)) / (2 * step) for e in np.eye(d.size)]
    )
    exact = jacobian(reduced, anchor)
    assert np.linalg.norm(fd - exact) <= 1e-5 * max(np.linalg.norm(exact), 1.0)


def test_choose_anchor_flips_sign():
    r, beta = choose_anchor(np.array([-3.0, 2.0, 1.0]) / math.sqrt(14))
    assert r == 0
    assert_allclose(beta, np.array([3.0, -2.0, -1.0]) / math.sqrt(14))


def test_choose_anchor_normalizes():
    r, beta = choose_anchor([0.0, 0.0, 5.0])
    assert r == 2
    assert_allclose(beta, [0.0, 0.0, 1.0])


def test_choose_anchor_tie_goes_to_first():
    r, _ = choose_anchor(np.array([1.0, 1.0]) / math.sqrt(2))
    assert r == 0


def test_choose_anchor_rejects_zero():
    with pytest.raises(DomainError):
        choose_anchor([0.0, 0.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_index_param_round_trip(values):
    param = IndexParam.from_vector(values)
    again = IndexParam.from_reduced(param.reduced, param.anchor)
    assert_allclose(again.beta, param.beta, atol=1e-12)
    assert param.beta[param.anchor] > 0


def test_index_param_rejects_non_unit():
    with pytest.raises(DomainError):
        IndexParam(np.array([1.0, 1.0]), 0)


def test_subject_rejects_nan():
    with pytest.raises(DomainError):
        Subject([1.0, np.nan], np.ones((2, 2)), np.ones((2, 1)))


def test_dataset_stacking_and_split():
    rng = np.random.default_rng(0)
    data = LongitudinalDataset.from_arrays(
        rng.standard_normal(7), rng.standard_normal((7, 2)), rng.standard_normal((7, 1)), [5, 5, 9, 9, 9, 2, 5]
    )
    assert data.n == 3
    assert list(data.sizes) == [3, 3, 1]
    assert data.N == 7
    parts = data.split(data.y)
    assert [p.shape[0] for p in parts] == [3, 3, 1]


def test_csv_round_trip(tmp_path, small_data):
    path = tmp_path / "d.csv"
    write_dataset(small_data, path)
    again = read_dataset(path)
    assert_allclose(again.y, small_data.y)
    assert_allclose(again.x, small_data.x)
    assert_allclose(again.z, small_data.z)
    assert list(again.sizes) == list(small_data.sizes)


def test_read_dataset_names_bad_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("subject,y,x1,x2,z1\n1,0.5,1,2,3\n1,nan,1,2,3\n")
    with pytest.raises(DataFormatError, match=r"bad\.csv:3"):
        read_dataset(path)


def test_read_dataset_non_numeric(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("subject,y,x1,x2\n1,0.5,1,2\n2,0.1,oops,2\n")
    with pytest.raises(DataFormatError, match=":3:"):
        read_dataset(path)


def test_read_dataset_whitespace_delimited(tmp_path):
    path = tmp_path / "ws.txt"
    path.write_text("subject y x1 x2\n1 0.5 1 2\n1 0.7 2 1\n2 0.1 0 1\n")
    data = read_dataset(path)
    assert data.p == 2 and data.q == 0 and data.N == 3 and data.n == 2
