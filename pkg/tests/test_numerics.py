import numpy as np
import pytest
from hypothesis import given, strategies as st

from sbp_sat_lab.errors import InvalidInputError, SingularSystemError
from sbp_sat_lab.numerics import psd_schur_test, pseudoinverse, solve_dense, symmetric_eigenvalues

def random_split(rng, n, psd: bool):
    B = rng.standard_normal((n, n))
    if psd:
        rank = int(rng.integers(1, n + 1))
        B = rng.standard_normal((rank, n))
        Y = B.T @ B
    else:
        Y = B + B.T
    split = int(rng.integers(1, n)) if n > 1 else 1
    return Y, split


# --- pseudoinverse

def test_pinv_identity():
    assert np.allclose(pseudoinverse(np.eye(3)), np.eye(3), atol=1e-15)


def test_pinv_zero_matrix():
    assert np.array_equal(pseudoinverse(np.zeros((2, 2))), np.zeros((2, 2)))


def test_pinv_truncates_zero_singular_value():
    assert np.allclose(pseudoinverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)


def test_pinv_truncation_threshold_is_relative():
    # 1e-12 of sigma_max sits below the default cutoff and is dropped
    assert pseudoinverse(np.diag([1.0, 1e-12]))[1, 1] == 0.0
    assert pseudoinverse(np.diag([1.0, 1e-12]), rel_tol=1e-13)[1, 1] == pytest.approx(1e12)


@pytest.mark.parametrize("bad", [np.array([[np.nan, 0], [0, 1]]), np.array([[np.inf]])])
def test_pinv_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        pseudoinverse(bad)


@pytest.mark.parametrize("tol", [0.0, 1.0, -1e-3])
def test_pinv_rejects_tolerance_outside_unit_interval(tol):
    with pytest.raises(InvalidInputError):
        pseudoinverse(np.eye(2), tol)


@st.composite
def svd_matrices(draw):
    """Matrices with some exact zero singular values and the rest within 1e4 of sigma_max.

    The Penrose residuals grow like cond * eps * sigma_max, so the 1e-10
    bound is only meaningful for the retained spectrum's conditioning.
    """
    rows, cols = draw(st.integers(1, 8)), draw(st.integers(1, 8))
    k = min(rows, cols)
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    scale = 10.0 ** draw(st.integers(-3, 3))
    sigma = scale * 10.0 ** rng.uniform(-4, 0, k)
    sigma[rng.random(k) < 0.3] = 0.0
    U, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    W, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    return U[:, :k] @ np.diag(sigma) @ W[:k, :]


@given(svd_matrices())
def test_pinv_penrose_identities(m):
    P = pseudoinverse(m)
    smax = np.linalg.svd(m, compute_uv=False).max()
    tol = 1e-10 * max(smax, np.finfo(float).tiny)
    assert np.abs(m @ P @ m - m).max() <= tol
    # the projectors are dimensionless, so their symmetry is checked at 1e-10
    assert np.abs(m @ P - (m @ P).T).max() <= 1e-10
    assert np.abs(P @ m - (P @ m).T).max() <= 1e-10
    if smax > 0:
        assert np.abs(P @ m @ P - P).max() <= 1e-10 * np.abs(P).max()


def test_pinv_matches_numpy_on_rank_deficient(rng):
    A = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))
    assert np.allclose(pseudoinverse(A), np.linalg.pinv(A, rcond=1e-10), atol=1e-10)


# --- eigenvalues

@pytest.mark.parametrize("m, expected", [
    (np.diag([3.0, 1.0, 2.0]), [1, 2, 3]),
    (np.array([[0.0, 1.0], [1.0, 0.0]]), [-1, 1]),
    (np.array([[2.0, 1.0], [1.0, 2.0]]), [1, 3]),
])
def test_symmetric_eigenvalues_examples(m, expected):
    assert np.allclose(symmetric_eigenvalues(m), expected, atol=1e-14)


def test_symmetric_eigenvalues_rejects_non_square():
    with pytest.raises(InvalidInputError):
        symmetric_eigenvalues(np.ones((2, 3)))


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_symmetric_eigenvalues_against_dense_qr_iteration(n, seed):
    # Oracle: numpy's general eigensolver on the symmetric part, sorted.
    a = np.random.default_rng(seed).standard_normal((n, n))
    sym = 0.5 * (a + a.T)
    oracle = np.sort(np.linalg.eigvals(sym).real)
    got = symmetric_eigenvalues(a)
    assert np.all(np.diff(got) >= 0)
    assert np.allclose(got, oracle, atol=1e-10 * max(1.0, np.abs(sym).max()))


# --- solve

@pytest.mark.parametrize("a, b, x", [
    (np.eye(2), [3.0, 4.0], [3.0, 4.0]),
    (np.diag([2.0, 4.0]), [2.0, 8.0], [1.0, 2.0]),
    (np.array([[1.0, 1.0], [0.0, 1.0]]), [3.0, 1.0], [2.0, 1.0]),
])
def test_solve_examples(a, b, x):
    assert np.allclose(solve_dense(a, b), x, atol=1e-15)


def test_solve_singular_reports_pivot():
    with pytest.raises(SingularSystemError) as info:
        solve_dense(np.array([[1.0, 2.0], [2.0, 4.0]]), [1.0, 2.0])
    assert info.value.pivot < 1e-14 * 4


def test_solve_rejects_mismatched_rhs():
    with pytest.raises(InvalidInputError):
        solve_dense(np.eye(3), [1.0, 2.0])


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_solve_residual_on_well_conditioned_systems(n, seed):
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    W, _ = np.linalg.qr(rng.standard_normal((n, n)))
    a = U @ np.diag(np.logspace(0, rng.uniform(0, 6), n)) @ W
    b = rng.standard_normal(n)
    x = solve_dense(a, b)
    norm = np.linalg.norm
    assert norm(a @ x - b) <= 1e-10 * (norm(a, 2) * norm(x) + norm(b))


def test_extended_solve_refines_beyond_double(rng):
    n = 40
    a = (rng.standard_normal((n, n)) + n * np.eye(n)).astype(np.longdouble)
    x_true = rng.standard_normal(n).astype(np.longdouble)
    b = a @ x_true
    x = solve_dense(a, b)
    assert x.dtype == np.longdouble
    assert np.abs(x - x_true).max() < 1e-17


# --- PSD test

def test_psd_identity_blocks():
    r = psd_schur_test([[1.0]], [[0.0]], [[1.0]])
    assert r.is_psd and r.failed_condition is None


def test_psd_range_condition_failure():
    r = psd_schur_test([[0.0]], [[1.0]], [[0.0]])
    assert not r.is_psd and r.failed_condition == "range_condition"


def test_psd_y22_failure_is_reported_first():
    r = psd_schur_test([[-1.0]], [[0.0]], [[-1.0]])
    assert r.failed_condition == "Y22_not_psd"


def test_psd_schur_failure():
    r = psd_schur_test([[1.0]], [[2.0]], [[1.0]])
    assert r.failed_condition == "schur_complement"
    assert r.min_eigenvalue == pytest.approx(-1.0)


def test_psd_rejects_non_conformal_blocks():
    with pytest.raises(InvalidInputError):
        psd_schur_test(np.eye(2), np.ones((2, 3)), np.eye(2))


def test_psd_gram_matrix_matches_eigen_oracle(rng):
    B = rng.standard_normal((7, 7))
    Y = B.T @ B
    r = psd_schur_test(Y[:3, :3], Y[:3, 3:], Y[3:, 3:])
    assert r.is_psd
    assert r.min_eigenvalue == pytest.approx(np.linalg.eigvalsh(Y)[0], abs=1e-10)


def test_psd_agrees_with_eigenvalues_on_200_random_cases(rng):
    for case in range(200):
        n = int(rng.integers(2, 21))
        Y, split = random_split(rng, n, psd=case % 2 == 0)
        scale = max(np.abs(Y[:split, :split]).max(), np.abs(Y[:split, split:]).max(),
                    np.abs(Y[split:, split:]).max())
        direct = np.linalg.eigvalsh(Y)[0] >= -1e-10 * scale
        r = psd_schur_test(Y[:split, :split], Y[:split, split:], Y[split:, split:])
        assert r.is_psd == direct, (case, n, split)
