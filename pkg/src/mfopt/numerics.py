"""Linear algebra kernels shared by the full-order, reduced and kernel models.

Sparse matrices are plain :class:`scipy.sparse.csr_matrix` objects; every
routine here is a pure function of its inputs.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NonConvergence(RuntimeError):
    """Raised when an iterative method exhausts its iteration budget."""

    def __init__(self, message, iters):
        super().__init__(message)
        self.iters = iters


class SingularSystem(np.linalg.LinAlgError):
    pass


def as_csr(A):
    """Return `A` as a CSR matrix with sorted, duplicate-free indices."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def is_symmetric(A, rtol=1e-14):
    A = sp.csr_matrix(A)
    diff = abs(A - A.T)
    if diff.nnz == 0:
        return True
    scale = abs(A).max()
    return diff.max() <= rtol * scale


class BandedCholesky:
    """Cholesky factorization ``A[p][:, p] = L L^T`` of a sparse SPD matrix.

    The permutation ``p`` is a reverse Cuthill-McKee ordering, which keeps
    ``L`` banded.  :meth:`whiten` returns ``X = L^{-1} F[p]``, so that
    ``X^T X = F^T A^{-1} F`` without forming that product explicitly.
    """

    def __init__(self, A):
        A = as_csr(A)
        n = A.shape[0]
        self.perm = reverse_cuthill_mckee(A, symmetric_mode=True)
        Ap = A[self.perm][:, self.perm].tocoo()
        keep = Ap.row >= Ap.col
        rows, cols, vals = Ap.row[keep], Ap.col[keep], Ap.data[keep]
        self.bandwidth = int(np.max(rows - cols, initial=0))
        ab = np.zeros((self.bandwidth + 1, n))
        ab[rows - cols, cols] = vals
        try:
            self._lower = sla.cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("matrix is not positive definite") from exc

    def whiten(self, F):
        F = np.asarray(F, dtype=float)
        if F.size == 0:
            return F.copy()
        return sla.solve_banded((self.bandwidth, 0), self._lower, F[self.perm])


def cg_solve(A, b, rtol=1e-12, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients for an SPD matrix.

    Returns ``(x, iters)`` with ``||A x - b|| <= rtol * ||b||``.  A zero
    right-hand side returns the exact zero solution without iterating.
    """
    if rtol <= 0:
        raise ValueError("rtol must be positive")
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = max(10 * n, 100)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0

    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x if x0 is not None else b.copy()
    target = rtol * bnorm
    if np.linalg.norm(r) <= target:
        return x, 0
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            # recursive residual drifts; confirm against the true one
            r_true = b - A @ x
            if np.linalg.norm(r_true) <= target:
                return x, it
            r = r_true
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergence(f"CG did not reach rtol={rtol:g} in {max_iter} iterations", max_iter)


@dataclass(frozen=True)
class PodResult:
    modes: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self):
        return self.modes.shape[1]


def gram_schmidt(V, G, against=None, atol=1e-13, passes=2):
    """G-orthonormalize the columns of `V`, optionally against the columns of
    an already G-orthonormal `against`.

    Columns whose remaining norm falls below ``atol`` times their initial norm
    are dropped.
    """
    V = np.asarray(V, dtype=float)
    n, m = V.shape
    base = against if against is not None else np.zeros((n, 0))
    Q = np.empty((n, base.shape[1] + m))
    Q[:, : base.shape[1]] = base
    k = base.shape[1]
    for j in range(m):
        v = V[:, j].copy()
        initial = np.sqrt(max(v @ (G @ v), 0.0))
        if initial == 0.0:
            continue
        for _ in range(passes):
            if k:
                v -= Q[:, :k] @ (Q[:, :k].T @ (G @ v))
        nrm = np.sqrt(max(v @ (G @ v), 0.0))
        if nrm <= atol * initial:
            continue
        Q[:, k] = v / nrm
        k += 1
    return Q[:, base.shape[1]:k].copy()


def _check_snapshots(S):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2:
        raise ValueError("snapshots must be an n x m matrix")
    if not np.all(np.isfinite(S)):
        raise ValueError("snapshot matrix contains non-finite entries")
    return S


def _energy(S, G):
    return float(np.sum(S * (G @ S)))


def _project_out(S, Q, G):
    for _ in range(2):
        S = S - Q @ (Q.T @ (G @ S))
    return S


def _gram_modes(S, G, eps):
    GS = G @ S
    C = S.T @ GS
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    lam_max = evals[0] if evals.size else 0.0
    if lam_max <= 0.0:
        return np.zeros((S.shape[0], 0))
    nonzero = int(np.sum(evals > 1e-14 * lam_max))
    evals = np.clip(evals, 0.0, None)
    # tail[r] = energy discarded when keeping r modes
    tail = np.concatenate([np.cumsum(evals[::-1])[::-1], [0.0]])
    r = nonzero
    while r > 0 and tail[r - 1] < eps:
        r -= 1
    if r == 0:
        return np.zeros((S.shape[0], 0))
    return gram_schmidt(S @ (evecs[:, :r] / np.sqrt(evals[:r])), G)


def pod(snapshots, G, eps, max_refinements=3):
    """Method-of-snapshots POD in the inner product induced by `G`.

    The rank is the smallest one for which the summed squared projection
    error of all snapshots stays strictly below `eps` (with ``eps = 0``
    every numerically nonzero mode is kept).

    The Gram-matrix eigenproblem only resolves singular values down to about
    ``1e-8`` relative to the largest one.  When the remaining error is still
    above `eps`, the same procedure is repeated on the projection remainder.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    S = _check_snapshots(snapshots)
    n, m = S.shape
    empty = PodResult(np.zeros((n, 0)), np.zeros(0))
    if m == 0:
        return empty
    Q = _gram_modes(S, G, eps)
    if Q.shape[1] == 0:
        return empty
    R = _project_out(S, Q, G)
    for _ in range(max_refinements):
        rest = _energy(R, G)
        if rest < eps or rest <= 0.0:
            break
        extra = gram_schmidt(_gram_modes(R, G, eps), G, against=Q)
        if extra.shape[1] == 0:
            break
        Q = np.hstack([Q, extra])
        R = _project_out(R, extra, G)

    # rotate onto the principal directions of the projected snapshots
    U, sv, _ = np.linalg.svd(Q.T @ (G @ S), full_matrices=False)
    keep = sv > 0.0
    energy = sv**2
    # drop trailing directions the bound does not need
    tail = np.concatenate([np.cumsum(energy[::-1])[::-1], [0.0]])
    rest = _energy(R, G)
    r = int(np.sum(keep))
    while r > 0 and tail[r - 1] + rest < eps:
        r -= 1
    if r == 0:
        return empty
    return PodResult(Q @ U[:, :r], sv[:r])


def hapod(snapshot_chunks, G, eps_pod, omega=0.9):
    """Incremental (chain-topology) hierarchical approximate POD.

    Chunk ``j`` is compressed together with the singular-value-weighted modes
    of the previous node.  Squared local errors add up along the chain, so the
    intermediate nodes share ``omega**2 * eps_pod`` and the last node gets the
    remaining ``(1 - omega**2) * eps_pod``.
    """
    chunks = [_check_snapshots(c) for c in snapshot_chunks]
    if not chunks:
        raise ValueError("hapod needs at least one chunk")
    if eps_pod <= 0:
        raise ValueError("eps_pod must be positive")
    if not 0.0 < omega < 1.0:
        raise ValueError("omega must lie in (0, 1)")
    L = len(chunks)
    if L == 1:
        return pod(chunks[0], G, eps_pod)

    inner_tol = omega**2 * eps_pod / (L - 1)
    last_tol = (1.0 - omega**2) * eps_pod
    carried = np.zeros((chunks[0].shape[0], 0))
    result = None
    for j, chunk in enumerate(chunks):
        tol = last_tol if j == L - 1 else inner_tol
        result = pod(np.hstack([carried, chunk]), G, tol)
        carried = result.modes * result.singular_values
    return result


def max_gen_eig(B, A, tol=1e-10, solve=None, max_iter=1000, seed=0):
    """Largest eigenvalue of the pencil ``B x = lambda A x``.

    Power iteration on ``A^{-1} B``.  Inner solves use :func:`cg_solve` unless
    a ``solve(rhs)`` callable is supplied.  The Rayleigh quotient approaches
    the top eigenvalue from below, so the geometric tail of the remaining
    increments is added to the returned value.
    """
    if solve is None:
        def solve(rhs):
            return cg_solve(A, rhs, rtol=1e-12)[0]

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[0])
    x /= np.sqrt(x @ (A @ x))
    lam = x @ (B @ x)
    prev_delta = None
    for it in range(max_iter):
        y = solve(B @ x)
        y_norm = np.sqrt(y @ (A @ y))
        if y_norm == 0.0:
            return 0.0
        x = y / y_norm
        lam_new = x @ (B @ x)
        delta = abs(lam_new - lam)
        lam = lam_new
        if prev_delta is not None and prev_delta > 0.0:
            rho = min(delta / prev_delta, 0.999)
            tail = delta * rho / (1.0 - rho)
            if tail <= tol * abs(lam) and it >= 2:
                return lam + tail
        elif delta == 0.0 and it >= 2:
            return lam
        prev_delta = delta
    raise NonConvergence("power iteration did not converge", max_iter)


def solve_regularized_interpolation(A, eta, Y):
    """Solve ``(A + eta I) alpha = Y`` for a symmetric kernel matrix.

    Cholesky first; if a pivot drops below ``1e-14`` (relative to the largest
    diagonal entry) the system is solved by QR instead.
    """
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    n = A.shape[0]
    K = A + eta * np.eye(n)
    scale = max(np.max(np.abs(np.diag(K))), np.finfo(float).tiny)
    try:
        c, low = sla.cho_factor(K, lower=True, check_finite=True)
        pivots = np.diag(c) ** 2
        if np.min(pivots) >= 1e-14 * scale:
            return sla.cho_solve((c, low), Y)
    except np.linalg.LinAlgError:
        pass
    Q, R = np.linalg.qr(K)
    rdiag = np.abs(np.diag(R))
    if rdiag.size == 0 or np.min(rdiag) <= np.finfo(float).eps * scale * n:
        raise SingularSystem("regularized kernel system is numerically singular")
    return sla.solve_triangular(R, Q.T @ Y)
