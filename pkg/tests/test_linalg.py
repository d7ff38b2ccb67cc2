import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unlearnable.errors import ShapeError
from unlearnable.linalg import RankDeficiencyWarning, column_basis, matmul, max_abs, project_out, qr_thin


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert max_abs(matmul(a, b) - naive_matmul(a, b)) <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_qr_of_orthonormal_columns():
    q, r = qr_thin(np.eye(4)[:, :2])
    assert np.allclose(q, np.eye(4)[:, :2], atol=1e-15)
    assert np.allclose(r, np.eye(2), atol=1e-15)


def test_qr_hand_example():
    # Gram-Schmidt by hand: |(3, 4)| = 5.
    q, r = qr_thin(np.array([[3.0], [4.0]]))
    assert np.allclose(q, [[0.6], [0.8]], atol=1e-15)
    assert np.allclose(r, [[5.0]], atol=1e-15)


def test_qr_random_tolerances():
    rng = np.random.default_rng(0)
    w = rng.uniform(-1, 1, (200, 10))
    q, r = qr_thin(w)
    assert max_abs(q.T @ q - np.eye(10)) <= 1e-10
    assert max_abs(q @ r - w) <= 1e-8 * max_abs(w)
    assert np.allclose(np.tril(r, -1), 0)
    assert np.all(np.diag(r) >= 0)


def test_qr_agrees_with_lapack_up_to_sign():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((30, 6))
    q, r = qr_thin(w)
    q_ref, r_ref = np.linalg.qr(w)
    signs = np.sign(np.diag(r_ref))
    assert np.allclose(q, q_ref * signs, atol=1e-12)
    assert np.allclose(r, r_ref * signs[:, None], atol=1e-12)


def test_qr_rank_deficient_warns_and_keeps_columns():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((20, 4))
    w[:, 3] = w[:, 0] + w[:, 1]
    with pytest.warns(RankDeficiencyWarning):
        q, r = qr_thin(w)
    assert q.shape == (20, 4)
    assert max_abs(q.T @ q - np.eye(4)) <= 1e-10
    assert max_abs(q @ r - w) <= 1e-8 * max_abs(w)


def test_qr_full_rank_is_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        qr_thin(np.random.default_rng(2).standard_normal((9, 3)))


def test_column_basis_drops_dependent_columns():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((20, 4))
    w -= w.mean(axis=1, keepdims=True)  # columns sum to zero: rank 3
    with pytest.warns(RankDeficiencyWarning):
        q = column_basis(w)
    assert q.shape == (20, 3)
    assert np.abs(w - q @ (q.T @ w)).max() <= 1e-10
    full = rng.standard_normal((20, 4))
    assert np.allclose(column_basis(full), qr_thin(full)[0])


def test_qr_wide_matrix_rejected():
    with pytest.raises(ShapeError):
        qr_thin(np.ones((2, 3)))


def test_project_out_empty_basis_and_full_row():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 8))
    assert np.array_equal(project_out(np.zeros((8, 0)), x), x)
    q, _ = qr_thin(rng.standard_normal((8, 2)))
    assert max_abs(project_out(q, q[:, :1].T)) <= 1e-15


def test_project_out_shape_error():
    with pytest.raises(ShapeError):
        project_out(np.eye(4)[:, :2], np.ones((3, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_projection_properties(n, k, seed):
    rng = np.random.default_rng(seed)
    d = 8
    q, _ = qr_thin(rng.standard_normal((d, k))) if k else (np.zeros((d, 0)), None)
    x, y = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    px = project_out(q, x)
    assert max_abs(px @ q) <= 1e-8 if k else True
    assert max_abs(project_out(q, px) - px) <= 1e-8
    # Self-adjoint: <P x, y> = <x, P y>.
    assert max_abs(px @ y.T - x @ project_out(q, y).T) <= 1e-8
    assert np.all(np.linalg.norm(px, axis=1) <= np.linalg.norm(x, axis=1) + 1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_qr_reconstructs_arbitrary_input(w):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        q, r = qr_thin(w)
    assert max_abs(q @ r - w) <= 1e-8 * max(max_abs(w), 1e-300)
    assert max_abs(q.T @ q - np.eye(w.shape[1])) <= 1e-10


@pytest.mark.parametrize("tiny", [1.52759279e-159, 1.11253693e-308])
def test_qr_columns_near_underflow(tiny):
    # Columns many orders of magnitude below max|w| (down to subnormals) must
    # still give an orthonormal q and an exact reconstruction.
    for w in (np.array([[tiny, 1.0], [tiny, tiny], [tiny, tiny]]),
              np.array([[3.0, tiny, tiny]] + [[tiny] * 3] * 3),
              np.array([[tiny] * 3, [tiny] * 3, [tiny, tiny, 3.0]])):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiencyWarning)
            q, r = qr_thin(w)
        assert max_abs(q.T @ q - np.eye(w.shape[1])) <= 1e-10
        assert max_abs(q @ r - w) <= 1e-8 * max_abs(w)
