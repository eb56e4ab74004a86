import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank_tp.errors import InputError, RankError, ShapeError
from lowrank_tp.linalg import batched_matmul, matmul, relative_error, svd_jacobi, truncated_svd

from oracles import singular_values, tail_energy, tail_energy_eig, triple_loop_matmul


def rng(seed=0):
    return np.random.default_rng(seed)


def test_matmul_identity():
    m = rng().standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_example():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_triple_loop_oracle():
    r = rng(1)
    a, b = r.standard_normal((5, 4)), r.standard_normal((4, 3))
    assert np.allclose(matmul(a, b), triple_loop_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-13)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    r = rng(2)
    a, b, c = r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal((3, 6))
    bound = 1e-10 * np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
    assert np.linalg.norm(matmul(matmul(a, b), c) - matmul(a, matmul(b, c))) <= bound


def test_batched_matmul_cases():
    r = rng(3)
    assert batched_matmul([]) == []
    a, b = r.standard_normal((2, 3)), r.standard_normal((3, 4))
    (only,) = batched_matmul([(a, b)])
    assert np.array_equal(only, matmul(a, b))
    pairs = [(r.standard_normal((i + 1, 3)), r.standard_normal((3, i + 2))) for i in range(3)]
    for got, (x, y) in zip(batched_matmul(pairs), pairs):
        assert np.array_equal(got, matmul(x, y))


def test_batched_matmul_names_index():
    pairs = [(np.ones((2, 2)), np.ones((2, 2))), (np.ones((2, 3)), np.ones((2, 3)))]
    with pytest.raises(ShapeError, match="entry 1"):
        batched_matmul(pairs)


def test_truncated_svd_diag_full_rank():
    w = np.diag([3.0, 2.0, 1.0])
    res = truncated_svd(w, 3)
    assert np.abs(res.left_factor @ res.right_factor - w).max() < 1e-12
    assert res.discarded_energy == 0
    assert list(res.retained_singular_values) == pytest.approx([3, 2, 1], abs=1e-14)


def test_truncated_svd_rank_one():
    r = rng(4)
    w = np.outer(r.standard_normal(5), r.standard_normal(4))
    res = truncated_svd(w, 1)
    assert np.abs(res.left_factor @ res.right_factor - w).max() < 1e-12


def test_truncated_svd_tail_energy_6x4():
    w = rng(5).standard_normal((6, 4))
    res = truncated_svd(w, 2)
    err = np.linalg.norm(w - res.left_factor @ res.right_factor) ** 2
    s = singular_values(w)
    assert err == pytest.approx(s[2] ** 2 + s[3] ** 2, rel=1e-9)
    assert res.discarded_energy == pytest.approx(tail_energy_eig(w, 2), rel=1e-9)


def test_truncated_svd_errors():
    with pytest.raises(RankError):
        truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(RankError):
        truncated_svd(np.ones((3, 2)), 0)
    w = np.ones((3, 3))
    w[0, 0] = np.nan
    with pytest.raises(InputError):
        truncated_svd(w, 1)


def test_svd_does_not_modify_input():
    w = rng(6).standard_normal((3, 7))
    before = w.copy()
    svd_jacobi(w)
    assert np.array_equal(w, before)


@pytest.mark.parametrize("shape", [(7, 3), (3, 7), (5, 5), (1, 4), (4, 1)])
def test_svd_jacobi_matches_lapack(shape):
    w = rng(7).standard_normal(shape)
    u, s, vt = svd_jacobi(w)
    assert np.allclose(s, singular_values(w), rtol=1e-12, atol=1e-13)
    assert relative_error((u * s) @ vt, w) < 1e-13


def test_zero_matrix():
    res = truncated_svd(np.zeros((4, 3)), 2)
    assert np.array_equal(res.left_factor @ res.right_factor, np.zeros((4, 3)))
    assert res.discarded_energy == 0


def test_eckart_young_monotone():
    w = rng(8).standard_normal((9, 6))
    errs = [np.linalg.norm(w - (lambda r: r.left_factor @ r.right_factor)(truncated_svd(w, k))) for k in range(1, 7)]
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


def test_factor_symmetry():
    w = rng(9).standard_normal((8, 5))
    res = truncated_svd(w, 4)
    col = np.linalg.norm(res.left_factor, axis=0)
    row = np.linalg.norm(res.right_factor, axis=1)
    assert np.allclose(col, row, rtol=0, atol=1e-9)
    assert np.allclose(col ** 2, res.retained_singular_values, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), seed=st.integers(0, 2 ** 32 - 1), data=st.data())
def test_tail_energy_property(rows, cols, seed, data):
    k = data.draw(st.integers(1, min(rows, cols)))
    w = np.random.default_rng(seed).standard_normal((rows, cols))
    res = truncated_svd(w, k)
    err = np.linalg.norm(w - res.left_factor @ res.right_factor) ** 2
    want = tail_energy(w, k)
    assert abs(err - want) <= 1e-9 * max(want, 1e-300) + 1e-24
    assert np.all(np.diff(res.retained_singular_values) <= 0)
