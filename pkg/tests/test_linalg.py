import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorhjb.linalg import SPDError, batch_sqrt, jacobi_eigh, matrix_sqrt


def test_identity_and_diagonal():
    np.testing.assert_array_equal(matrix_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(matrix_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)


def test_two_by_two_closed_form():
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    r3 = np.sqrt(3.0)
    expected = 0.5 * np.array([[r3 + 1, r3 - 1], [r3 - 1, r3 + 1]])
    S = matrix_sqrt(M)
    np.testing.assert_allclose(S, expected, rtol=1e-14)
    np.testing.assert_allclose(S @ S, M, rtol=1e-14)


def test_rejects_asymmetric_and_indefinite():
    with pytest.raises(SPDError):
        matrix_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(SPDError):
        matrix_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_jacobi_matches_lapack():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(4, 4))
    M = B @ B.T
    w, V = jacobi_eigh(M)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(M), rtol=1e-12)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, M, atol=1e-12)


def test_batch_handles_fields():
    M = np.broadcast_to(np.array([[2.0, 1.0], [1.0, 2.0]]), (5, 7, 2, 2))
    S = batch_sqrt(M)
    assert S.shape == M.shape
    np.testing.assert_allclose(S[3, 2], matrix_sqrt(M[0, 0]), rtol=1e-14)
    np.testing.assert_allclose(batch_sqrt(np.full((4, 1, 1), 9.0))[..., 0, 0], 3.0)


def _spd(n):
    return st.lists(st.floats(-3, 3), min_size=n * n, max_size=n * n).map(lambda v: np.array(v).reshape(n, n)).map(lambda B: B @ B.T + 0.1 * np.eye(n))


@given(st.one_of(_spd(1), _spd(2), _spd(3)))
def test_square_root_property(M):
    S = matrix_sqrt(M)
    assert np.allclose(S, S.T, atol=0)
    np.testing.assert_allclose(S @ S, M, rtol=1e-10, atol=1e-10 * np.abs(M).max())
    assert np.all(np.linalg.eigvalsh(S) > 0)


@given(_spd(2))
def test_batch_closed_form_agrees_with_jacobi(M):
    np.testing.assert_allclose(batch_sqrt(M[None])[0], matrix_sqrt(M), rtol=1e-9, atol=1e-12)
