import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mfopt.numerics import (BandedCholesky, NonConvergence, SingularSystem, as_csr, cg_solve,
                            gram_schmidt, hapod, is_symmetric, max_gen_eig, pod,
                            solve_regularized_interpolation)


def random_spd(n, seed, cond=10.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def laplacian_1d(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def g_norm_sq(S, G):
    return float(np.sum(S * (G @ S)))


def projection_error(S, Q, G):
    R = S - Q @ (Q.T @ (G @ S))
    return g_norm_sq(R, G)


# -- sparse helpers ----------------------------------------------------------------

def test_as_csr_drops_explicit_zeros_and_duplicates():
    A = sp.coo_matrix(([1.0, 2.0, 0.0], ([0, 0, 1], [0, 0, 1])), shape=(2, 2))
    B = as_csr(A)
    assert B.nnz == 1
    assert B[0, 0] == 3.0
    assert np.all(np.diff(B.indptr) >= 0)


def test_is_symmetric():
    assert is_symmetric(laplacian_1d(5))
    assert not is_symmetric(sp.csr_matrix([[1.0, 2.0], [0.0, 1.0]]))


def test_banded_cholesky_whitening_reproduces_inverse_product():
    A = as_csr(laplacian_1d(30) + sp.eye(30))
    F = np.random.default_rng(0).standard_normal((30, 4))
    X = BandedCholesky(A).whiten(F)
    np.testing.assert_allclose(X.T @ X, F.T @ np.linalg.solve(A.toarray(), F), rtol=1e-12)


def test_banded_cholesky_rejects_indefinite():
    with pytest.raises(SingularSystem):
        BandedCholesky(sp.csr_matrix([[1.0, 2.0], [2.0, 1.0]]))


# -- conjugate gradients -------------------------------------------------------------

def test_cg_identity():
    x, _ = cg_solve(sp.identity(3, format="csr"), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(x, [1, 2, 3])


def test_cg_two_by_two_matches_direct_solve():
    A = sp.csr_matrix([[4.0, 1.0], [1.0, 3.0]])
    x, _ = cg_solve(A, np.array([1.0, 2.0]))
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], rtol=1e-12)


def test_cg_diagonal():
    x, _ = cg_solve(sp.diags([2.0, 2.0]).tocsr(), np.array([2.0, 4.0]))
    np.testing.assert_allclose(x, [1.0, 2.0])


def test_cg_zero_rhs_returns_zero():
    x, iters = cg_solve(laplacian_1d(4), np.zeros(4))
    assert iters == 0 and not np.any(x)


def test_cg_budget_exhaustion_raises():
    with pytest.raises(NonConvergence) as info:
        cg_solve(laplacian_1d(200), np.ones(200), max_iter=3)
    assert info.value.iters == 3


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 10_000))
def test_cg_solves_random_spd_systems(n, seed):
    A = random_spd(n, seed, cond=100.0)
    b = np.random.default_rng(seed + 1).standard_normal(n)
    x, _ = cg_solve(sp.csr_matrix(A), b, rtol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-8, atol=1e-10)


# -- POD ------------------------------------------------------------------------------

def test_pod_rank_one_snapshots():
    G = sp.identity(6, format="csr")
    v = np.arange(1.0, 7.0)
    res = pod(np.column_stack([v] * 4), G, 1e-12)
    assert res.rank == 1


def test_pod_orthonormal_snapshots_kept_with_zero_tolerance():
    G = as_csr(laplacian_1d(8) + sp.eye(8))
    S = gram_schmidt(np.random.default_rng(1).standard_normal((8, 4)), G)
    res = pod(S, G, 0.0)
    assert res.rank == 4
    assert projection_error(S, res.modes, G) <= 1e-20


def test_pod_exact_rank_two_matches_dense_svd():
    rng = np.random.default_rng(2)
    G = as_csr(laplacian_1d(10) + sp.eye(10))
    S = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 5))
    res = pod(S, G, 1e-12)
    L = np.linalg.cholesky(G.toarray())
    sv = np.linalg.svd(L.T @ S, compute_uv=False)
    assert res.rank == int(np.sum(sv > 1e-10 * sv[0])) == 2
    np.testing.assert_allclose(res.singular_values, sv[:2], rtol=1e-10)


def test_pod_empty_and_zero_input():
    G = sp.identity(3, format="csr")
    assert pod(np.zeros((3, 0)), G, 1e-3).rank == 0
    assert pod(np.zeros((3, 2)), G, 1e-3).rank == 0
    with pytest.raises(ValueError):
        pod(np.ones((3, 2)), G, -1.0)


def test_pod_reaches_tolerance_below_gram_resolution():
    """Tolerances far below the eigenvalue resolution of the Gram matrix are
    reached by refining on the projection remainder."""
    G = as_csr(laplacian_1d(40) + sp.eye(40))
    rng = np.random.default_rng(3)
    S = rng.standard_normal((40, 12)) * np.geomspace(1, 1e-9, 12)
    eps = 1e-20 * g_norm_sq(S, G)
    res = pod(S, G, eps)
    assert projection_error(S, res.modes, G) < eps


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 12), rel=st.sampled_from([1e-2, 1e-6, 1e-12]))
def test_pod_modes_orthonormal_sorted_and_within_tolerance(seed, m, rel):
    rng = np.random.default_rng(seed)
    G = as_csr(laplacian_1d(15) + sp.eye(15))
    S = rng.standard_normal((15, m)) * np.geomspace(1, 1e-4, m)
    eps = rel * g_norm_sq(S, G)
    res = pod(S, G, eps)
    gram = res.modes.T @ (G @ res.modes)
    assert np.max(np.abs(gram - np.eye(res.rank)), initial=0.0) <= 1e-10
    assert np.all(np.diff(res.singular_values) <= 0)
    assert projection_error(S, res.modes, G) < eps


# -- HaPOD ----------------------------------------------------------------------------

def _same_span(A, B, G):
    return projection_error(A, B, G) <= 1e-18 * max(1.0, g_norm_sq(A, G)) and \
        projection_error(B, A, G) <= 1e-18 * max(1.0, g_norm_sq(B, G))


def test_hapod_single_chunk_equals_pod():
    G = as_csr(laplacian_1d(12) + sp.eye(12))
    S = np.random.default_rng(4).standard_normal((12, 5))
    eps = 1e-8 * g_norm_sq(S, G)
    a, b = hapod([S], G, eps), pod(S, G, eps)
    assert a.rank == b.rank
    assert _same_span(a.modes, b.modes, G)


def test_hapod_duplicate_chunks_span_one_chunk():
    G = as_csr(laplacian_1d(12) + sp.eye(12))
    S = np.random.default_rng(5).standard_normal((12, 3))
    eps = 1e-10 * g_norm_sq(S, G)
    a = hapod([S, S], G, eps)
    b = pod(np.hstack([S, S]), G, eps)
    assert a.rank == b.rank == 3
    assert _same_span(a.modes, b.modes, G)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n_chunks=st.integers(2, 5), rel=st.sampled_from([1e-3, 1e-8, 1e-14]))
def test_hapod_error_bound(seed, n_chunks, rel):
    rng = np.random.default_rng(seed)
    G = as_csr(laplacian_1d(20) + sp.eye(20))
    chunks = [rng.standard_normal((20, 4)) * np.geomspace(1, 1e-5, 4) for _ in range(n_chunks)]
    S = np.hstack(chunks)
    eps = rel * g_norm_sq(S, G)
    res = hapod(chunks, G, eps)
    assert projection_error(S, res.modes, G) < eps


def test_hapod_argument_checks():
    G = sp.identity(3, format="csr")
    with pytest.raises(ValueError):
        hapod([], G, 1.0)
    with pytest.raises(ValueError):
        hapod([np.ones((3, 1))], G, 0.0)
    with pytest.raises(ValueError):
        hapod([np.ones((3, 1))], G, 1.0, omega=1.0)


# -- generalized eigenvalues ------------------------------------------------------------

def test_max_gen_eig_identical_pencil():
    A = as_csr(laplacian_1d(10) + sp.eye(10))
    assert max_gen_eig(A, A) == pytest.approx(1.0, rel=1e-10)


def test_max_gen_eig_diagonal_ratio():
    lam = max_gen_eig(sp.diags([2.0, 8.0]).tocsr(), sp.diags([1.0, 2.0]).tocsr())
    assert lam == pytest.approx(4.0, rel=1e-10)


def test_max_gen_eig_matches_dense_solver():
    A = random_spd(20, 6)
    Bh = np.random.default_rng(7).standard_normal((20, 20))
    B = Bh @ Bh.T
    ref = sla.eigh(B, A, eigvals_only=True)[-1]
    lam = max_gen_eig(sp.csr_matrix(B), sp.csr_matrix(A), tol=1e-12)
    assert lam == pytest.approx(ref, rel=1e-8)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_max_gen_eig_invariant_under_joint_scaling(seed, c):
    A = random_spd(8, seed)
    B = random_spd(8, seed + 1, cond=50.0)
    a = max_gen_eig(sp.csr_matrix(B), sp.csr_matrix(A), tol=1e-12)
    b = max_gen_eig(sp.csr_matrix(c * B), sp.csr_matrix(c * A), tol=1e-12)
    assert b == pytest.approx(a, rel=1e-8)


# -- regularized interpolation ----------------------------------------------------------

def test_interpolation_identity_no_regularization():
    Y = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(solve_regularized_interpolation(np.eye(3), 0.0, Y), Y)


def test_interpolation_identity_unit_regularization():
    Y = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(solve_regularized_interpolation(np.eye(3), 1.0, Y), Y / 2)


def test_interpolation_random_spd_matches_dense_solve():
    A = random_spd(7, 8, cond=1e4)
    Y = np.random.default_rng(9).standard_normal((7, 3))
    ref = np.linalg.solve(A + 1e-12 * np.eye(7), Y)
    np.testing.assert_allclose(solve_regularized_interpolation(A, 1e-12, Y), ref, rtol=1e-9)


def test_interpolation_singular_and_bad_eta():
    with pytest.raises(SingularSystem):
        solve_regularized_interpolation(np.ones((3, 3)), 0.0, np.ones(3))
    with pytest.raises(ValueError):
        solve_regularized_interpolation(np.eye(2), -1.0, np.ones(2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), eta=st.sampled_from([0.0, 1e-12, 1e-6, 1.0]))
def test_interpolation_residual_equals_ridge_term(seed, eta):
    A = random_spd(6, seed, cond=1e3)
    Y = np.random.default_rng(seed + 1).standard_normal((6, 2))
    alpha = solve_regularized_interpolation(A, eta, Y)
    np.testing.assert_allclose(A @ alpha + eta * alpha, Y, atol=1e-10)
