from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metcross.errors import DataError, ShapeError
from metcross.matching import StationMatch, build_match, pearson, pearson_matrix, transform

from conftest import make_panel
import match_oracle


def random_panels(rng):
    S, G, T = (int(v) for v in rng.integers([1, 1, 3], [9, 9, 40]))
    xs = rng.poisson(rng.uniform(0, 30, (S, 1)), (S, T)).astype(float)
    xg = rng.poisson(rng.uniform(0, 30, (G, 1)), (G, T)).astype(float)
    xs[rng.random(S) < 0.1] = 3.0  # occasional constant series
    return xs, xg


def test_random_panels_match_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        xs, xg = random_panels(rng)
        m = build_match(make_panel(xs, "src"), make_panel(xg, "tgt", prefix="t"), slice(0, xs.shape[1]))
        Si, AJ, We = (np.array(a) for a in match_oracle.match(xg.tolist(), xs.tolist()))
        np.testing.assert_allclose(m.Si, Si, rtol=0, atol=1e-12)
        # compare the argmax only where the oracle's best is clear of float noise
        top2 = np.sort(Si, axis=1)[:, -2:] if Si.shape[1] > 1 else np.c_[Si - 1, Si]
        clear = top2[:, 1] - top2[:, 0] > 1e-9
        np.testing.assert_array_equal(m.AJ[clear], AJ[clear])
        assert np.all(m.AJ.sum(axis=1) == 1) and set(np.unique(m.AJ)) <= {0.0, 1.0}
        np.testing.assert_array_equal(m.We, m.Si * m.AJ)


def test_hand_examples():
    m = StationMatch.from_similarity(np.array([[0.2, 0.9, 0.5], [0.7, 0.7, -1.0]]))
    np.testing.assert_array_equal(m.AJ, [[0, 1, 0], [1, 0, 0]])
    np.testing.assert_array_equal(m.We, [[0, 0.9, 0], [0.7, 0, 0]])
    assert list(m.pairs) == [1, 0]


def test_duplicate_series_pairs_with_itself():
    rng = np.random.default_rng(0)
    xs = rng.random((4, 20))
    xg = np.vstack([xs[2], rng.random(20)])
    m = build_match(make_panel(xs), make_panel(xg, prefix="t"), slice(0, 20))
    assert m.Si[0, 2] == pytest.approx(1.0, abs=1e-12) and m.pairs[0] == 2


def test_pairs_need_not_be_injective():
    m = StationMatch.from_similarity(np.array([[0.1, 0.8], [0.2, 0.9], [0.3, 0.4]]))
    assert list(m.pairs) == [1, 1, 1]


def test_pearson_edge_cases():
    assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(DataError):
        pearson([1], [1])
    with pytest.raises(DataError):
        pearson([1, 2], [1, 2, 3])


def test_only_training_periods_are_read():
    rng = np.random.default_rng(3)
    xs, xg = rng.random((3, 30)), rng.random((2, 30))
    a = build_match(make_panel(xs), make_panel(xg, prefix="t"), range(0, 20))
    xs2, xg2 = xs.copy(), xg.copy()
    xs2[:, 20:] = rng.random((3, 10)) * 100
    xg2[:, 20:] = 5
    b = build_match(make_panel(xs2), make_panel(xg2, prefix="t"), range(0, 20))
    np.testing.assert_array_equal(a.Si, b.Si)


def test_granularity_mismatch():
    with pytest.raises(DataError):
        build_match(make_panel(np.ones((2, 5))), make_panel(np.ones((2, 5)), granularity=60), slice(0, 5))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1, 1)))
def test_matrix_invariants(Si):
    m = StationMatch.from_similarity(Si)
    assert np.all(m.AJ.sum(axis=1) == 1)
    for g in range(m.G):
        assert Si[g, m.pairs[g]] >= Si[g].max()
        assert m.pairs[g] == int(np.flatnonzero(Si[g] == Si[g].max())[0])
    np.testing.assert_array_equal(m.We, Si * m.AJ)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)), elements=st.floats(0, 50)),
       arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)), elements=st.floats(0, 50)))
def test_pearson_range_and_matrix_agrees(a, b):
    T = min(a.shape[1], b.shape[1])
    a, b = a[:, :T], b[:, :T]
    P = pearson_matrix(a, b)
    assert np.all(np.abs(P) <= 1)
    for g in range(a.shape[0]):
        for s in range(b.shape[0]):
            assert P[g, s] == pytest.approx(pearson(a[g], b[s]), abs=1e-9)


def test_transform_examples():
    m = StationMatch.from_similarity(np.array([[0.2, 0.9, 0.5], [0.6, -0.1, 0.3]]))
    src = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(transform(src, "AJ", m), src[m.pairs])
    np.testing.assert_allclose(transform(np.ones(3), "We", m), [0.9, 0.6])
    one_hot = StationMatch.from_similarity(np.array([[0.0, 0.4, -0.2], [0.5, -0.3, 0.0]]))
    np.testing.assert_allclose(transform(src, "Si", one_hot), transform(src, "AJ", one_hot))
    np.testing.assert_allclose(one_hot.operator("Si").sum(axis=1), [1, 1])
    np.testing.assert_array_equal(one_hot.operator("Si", raw_si=True), one_hot.Si)


def test_transform_batched_and_errors():
    rng = np.random.default_rng(1)
    m = StationMatch.from_similarity(rng.uniform(-1, 1, (4, 3)))
    x = rng.random((7, 3, 5))
    out = transform(x, "Si", m)
    assert out.shape == (7, 4, 5)
    np.testing.assert_allclose(out[2], m.operator("Si") @ x[2])
    with pytest.raises(ShapeError):
        transform(rng.random((2, 5)), "AJ", m)
    with pytest.raises(ValueError):
        m.operator("XX")


def test_negative_only_rows_become_zero():
    m = StationMatch.from_similarity(np.array([[-0.5, -0.2]]))
    np.testing.assert_array_equal(m.operator("Si"), [[0, 0]])


def test_csv_output(tmp_path):
    m = StationMatch.from_similarity(np.array([[0.2, 0.9]]), ("t0",), ("a", "b"))
    m.to_csv(tmp_path)
    assert (tmp_path / "pairs.csv").read_text().splitlines()[1] == "t0,b,0.9"
    assert (tmp_path / "Si.csv").read_text().splitlines()[0] == "target_station,a,b"
