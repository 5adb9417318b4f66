"""Reduced-basis surrogate: Galerkin-projected primal/adjoint solves, the
reduced objective and gradient, basis extension by HaPOD and the offline
data for residual dual norms."""
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from mfopt.fom import Trajectory
from mfopt.numerics import SingularSystem, gram_schmidt, hapod


class TrainingBuffer:
    """Ring buffer of the most recent ``(mu, reduced primal coefficients)`` pairs.

    `dirty` is set by every push or clear and reset by :meth:`mark_trained`.
    """

    def __init__(self, capacity=10, n_rb=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.n_rb = n_rb
        self._entries = deque(maxlen=capacity)
        self.dirty = False

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self):
        return list(self._entries)

    def push(self, mu, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if self.n_rb is not None and coeffs.shape[1] != self.n_rb:
            raise ValueError(f"coefficient dimension {coeffs.shape[1]} does not match N_RB={self.n_rb}")
        self._entries.append((np.array(mu, dtype=float), coeffs.copy()))
        self.dirty = True

    def clear(self):
        self._entries.clear()
        self.dirty = True

    def mark_trained(self):
        self.dirty = False


@dataclass(frozen=True)
class ResidualOffline:
    """Offline data for residual dual norms in the energy product.

    Image members are the functionals ``f^q``, ``a^q(psi_n, .)``,
    ``(psi_n, .)_{L2}`` and ``d(psi_n, .)``.  Online norms are evaluated
    through the triangular factor `tri` of one QR decomposition ``X = Q R`` of
    the whitened members (``X = L^{-1} F`` with ``K_V = L L^T``), since
    ``||F c||_{V'} = ||R c||``.  The primal members form a leading block of
    columns, so `tri_pr` is the leading block of ``R``; `tri_ad` holds the
    columns of every member except the loads.  The adjoint set additionally
    carries the per-step output functionals ``M_D g^k`` through `cross_ad`
    (their component in ``range(Q)``) and `tail_ad` (squared norm of the
    remainder).
    """
    n_f: int
    n_a: int
    n_rb: int
    tri: np.ndarray
    cross_ad: np.ndarray
    tail_ad: np.ndarray

    @property
    def tri_pr(self):
        n_pr = self.n_f + (self.n_a + 1) * self.n_rb
        return self.tri[:n_pr, :n_pr]

    @property
    def tri_ad(self):
        return self.tri[:, self.n_f:]

    @property
    def gram(self):
        """Gram matrix of all members in the dual pairing."""
        return self.tri.T @ self.tri

    # member layout: [f_1..f_Qf | a^1 psi | ... | a^Q psi | M psi | M_D psi]
    def f_slice(self):
        return slice(0, self.n_f)

    def a_slice(self, q):
        start = self.n_f + q * self.n_rb
        return slice(start, start + self.n_rb)

    def m_slice(self):
        start = self.n_f + self.n_a * self.n_rb
        return slice(start, start + self.n_rb)

    def d_slice(self):
        start = self.n_f + (self.n_a + 1) * self.n_rb
        return slice(start, start + self.n_rb)


def build_residual_offline(fom, basis):
    forms = fom.forms
    n_rb = basis.shape[1]
    cols = [np.column_stack(forms.loads)]
    cols += [Aq @ basis for Aq in forms.stiffness]
    cols += [forms.mass @ basis, forms.output_product @ basis]
    X = fom.energy_factor.whiten(np.hstack(cols))
    _, W = fom.output_functionals()
    m = X.shape[1]

    # R-only QR of [X | W]: the top-right block is Q^T W and the bottom-right
    # block carries the norms of the output functionals outside range(Q)
    R_aug = np.linalg.qr(np.hstack([X, W]), mode="r")
    top = min(m, R_aug.shape[0])
    R = R_aug[:top, :m]
    cross = R_aug[:top, m:]
    tail = np.sum(R_aug[top:, m:] ** 2, axis=0)

    return ResidualOffline(len(forms.loads), len(forms.stiffness), n_rb, R, cross, tail)


@dataclass
class RbModel:
    """Reduced model on a ``K_V``-orthonormal basis of the state space.

    Primal and adjoint share the basis.  Instances are treated as values:
    :meth:`extend` returns a new model and leaves this one untouched.
    """
    fom: object
    basis: np.ndarray
    buffer: TrainingBuffer = None
    residual: ResidualOffline = field(init=False, repr=False)

    def __post_init__(self):
        fom, Phi = self.fom, self.basis
        forms = fom.forms
        if self.buffer is None:
            self.buffer = TrainingBuffer(n_rb=self.n_rb)
        self.buffer.n_rb = self.n_rb
        self.energy_r = Phi.T @ (forms.energy @ Phi)
        self.mass_r = Phi.T @ (forms.mass @ Phi)
        self.stiffness_r = [Phi.T @ (Aq @ Phi) for Aq in forms.stiffness]
        self.loads_r = [Phi.T @ fq for fq in forms.loads]
        self.output_r = Phi.T @ (forms.output_product @ Phi)
        G = fom.g_ref.steps
        MDG = (forms.output_product @ G.T)
        self.output_terms = (Phi.T @ MDG).T                       # L^k, rows k = 1..K
        if self.n_rb:
            # D-orthogonal projection of g_ref; J is evaluated as
            # |u - c|_D^2 + |g_perp|_D^2, which avoids cancellation near optima
            self.g_coeffs = sla.solve(self.output_r, self.output_terms.T, assume_a="pos").T
            G_perp = G - self.g_coeffs @ Phi.T
        else:
            self.g_coeffs = np.zeros((fom.K, 0))
            G_perp = G
        self.g_perp_sq = np.einsum("kn,kn->k", G_perp, (forms.output_product @ G_perp.T).T)
        self.g_sq = np.einsum("kn,nk->k", G, MDG)
        self.residual = build_residual_offline(fom, Phi)

    @classmethod
    def empty(cls, fom, capacity=10):
        return cls(fom, np.zeros((fom.dim, 0)), TrainingBuffer(capacity))

    @property
    def n_rb(self):
        return self.basis.shape[1]

    @property
    def K(self):
        return self.fom.K

    @property
    def dt(self):
        return self.fom.dt

    def reconstruct(self, traj):
        """Lift a reduced trajectory to the full space."""
        return Trajectory(traj.values @ self.basis.T, traj.role)

    def project(self, traj):
        """``K_V``-orthogonal projection coefficients of a full trajectory."""
        return Trajectory(traj.values @ (self.fom.forms.energy @ self.basis), traj.role)

    # -- reduced operators -----------------------------------------------------
    def A_r(self, mu):
        th = self.fom.forms.theta_a(mu)
        out = np.zeros((self.n_rb, self.n_rb))
        for t, Aq in zip(th, self.stiffness_r):
            out += t * Aq
        return out

    def f_r(self, mu):
        th = self.fom.forms.theta_f(mu)
        return sum(t * fq for t, fq in zip(th, self.loads_r))

    def _propagator(self, mu):
        S = self.mass_r / self.dt + self.A_r(mu)
        try:
            fac = sla.cho_factor(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("reduced system matrix is not positive definite") from exc
        E = sla.cho_solve(fac, self.mass_r / self.dt)
        return fac, E

    # -- solves ------------------------------------------------------------------
    def solve_primal(self, mu):
        mu = self.fom.check_parameter(mu)
        U = np.zeros((self.K + 1, self.n_rb))
        if self.n_rb == 0:
            return Trajectory(U, "primal")
        fac, E = self._propagator(mu)
        h = sla.cho_solve(fac, self.f_r(mu))
        b = self.fom.b
        Et = E.T.copy()
        for k in range(1, self.K + 1):
            U[k] = U[k - 1] @ Et + b[k] * h
        return Trajectory(U, "primal")

    def solve_adjoint(self, mu, u):
        mu = self.fom.check_parameter(mu)
        if u.role != "primal" or u.values.shape != (self.K + 1, self.n_rb):
            raise ValueError("adjoint solve needs a reduced primal trajectory of matching size")
        P = np.zeros((self.K + 1, self.n_rb))
        if self.n_rb == 0:
            return Trajectory(P, "adjoint")
        fac, E = self._propagator(mu)
        Z = sla.cho_solve(fac, 2.0 * self.output_r @ (u.steps - self.g_coeffs).T).T
        Et = E.T.copy()
        # row j holds p^{j+1}; row K is p^{K+1} = 0
        for k in range(self.K, 0, -1):
            P[k - 1] = P[k] @ Et + Z[k - 1]
        return Trajectory(P, "adjoint")

    def solve_sensitivity(self, mu, u, i):
        """Reduced parameter derivative ``d u_RB / d mu_i``."""
        mu = self.fom.check_parameter(mu)
        dU = np.zeros((self.K + 1, self.n_rb))
        if self.n_rb == 0:
            return Trajectory(dU, "primal")
        fac, E = self._propagator(mu)
        forms = self.fom.forms
        dA = sum(d * Aq for d, Aq in zip(forms.dtheta_a(mu)[:, i], self.stiffness_r))
        df = sum(d * fq for d, fq in zip(forms.dtheta_f(mu)[:, i], self.loads_r))
        rhs = np.outer(self.fom.b[1:], df) - u.steps @ dA.T
        Z = sla.cho_solve(fac, rhs.T).T
        Et = E.T.copy()
        for k in range(1, self.K + 1):
            dU[k] = dU[k - 1] @ Et + Z[k - 1]
        return Trajectory(dU, "primal")

    # -- objective ---------------------------------------------------------------
    def misfit(self, U):
        """``dt sum_k |Phi u^k - g^k|_D^2`` for reduced rows ``k = 1..K``."""
        diff = U - self.g_coeffs
        return self.dt * (np.einsum("kn,kn->", diff, diff @ self.output_r) + np.sum(self.g_perp_sq))

    def objective(self, mu, u):
        return self.misfit(u.steps) + self.fom.regularizer(mu)

    def gradient(self, mu, u, p):
        forms = self.fom.forms
        U, P = u.steps, p.steps
        a_terms = np.array([np.einsum("kn,kn->", U, P @ Aq) for Aq in self.stiffness_r])
        f_terms = np.array([self.fom.b[1:] @ (P @ fq) for fq in self.loads_r])
        grad = self.dt * (forms.dtheta_f(mu).T @ f_terms - forms.dtheta_a(mu).T @ a_terms)
        return grad + self.fom.regularizer_grad(mu)

    def eval_output(self, mu):
        mu = self.fom.check_parameter(mu)
        u = self.solve_primal(mu)
        p = self.solve_adjoint(mu, u)
        return self.objective(mu, u), self.gradient(mu, u, p), u, p

    def push_training(self, mu, u):
        self.buffer.push(mu, u.values)

    # -- residual dual norms -------------------------------------------------------
    def residual_pr_sq(self, mu, U, exact=False):
        """Squared dual norms of the primal residual of reduced rows ``U`` (``k = 0..K``)."""
        return self._residual_sq(mu, U, None, exact)

    def residual_sens_sq(self, mu, U, dU, i, exact=False):
        """Squared dual norms of the residual of the sensitivity equation for
        direction `i`, evaluated at reduced trajectories ``U`` and ``dU``."""
        return self._residual_sq(mu, U, (dU, i), exact)

    def _residual_sq(self, mu, U, sens, exact):
        forms, off, dt = self.fom.forms, self.residual, self.dt
        U = np.asarray(U, dtype=float)
        b = self.fom.b[1:]
        th_a = forms.theta_a(mu)
        if sens is None:
            # r^k = b_k f - a(u^k) - (u^k - u^{k-1}, .)/dt
            w_f, X, dth, Y = forms.theta_f(mu), U, None, None
        else:
            # R^k = b_k f_mu - a_mu(u^k) - a(du^k) - (du^k - du^{k-1}, .)/dt
            dU, i = sens
            X = np.asarray(dU, dtype=float)
            w_f, dth, Y = forms.dtheta_f(mu)[:, i], forms.dtheta_a(mu)[:, i], U
        M_rows = X[1:] - X[:-1]
        if exact:
            Phi = self.basis
            f = sum(w * fq for w, fq in zip(w_f, forms.loads))
            r = np.outer(b, f) - (forms.A(mu) @ (X[1:] @ Phi.T).T).T
            if Y is not None:
                r -= (forms.dA(mu, sens[1]) @ (Y[1:] @ Phi.T).T).T
            r -= (forms.mass @ (M_rows @ Phi.T).T).T / dt
            z = self.fom.riesz(r.T)
            return np.einsum("nk,kn->k", z, r)
        R = off.tri_pr
        V = np.outer(R[:, off.f_slice()] @ w_f, b)
        for q in range(off.n_a):
            Rq = R[:, off.a_slice(q)]
            V -= th_a[q] * (Rq @ X[1:].T)
            if Y is not None and dth[q] != 0.0:
                V -= dth[q] * (Rq @ Y[1:].T)
        V -= R[:, off.m_slice()] @ M_rows.T / dt
        return np.sum(V * V, axis=0)

    def residual_ad_sq(self, mu, U, P, exact=False):
        """Squared dual norms of the adjoint residual for reduced rows ``U`` (primal,
        ``k = 0..K``) and ``P`` (adjoint, ``k = 1..K+1``)."""
        forms, off, dt = self.fom.forms, self.residual, self.dt
        U, P = np.asarray(U, dtype=float), np.asarray(P, dtype=float)
        th_a = forms.theta_a(mu)
        Pk, Pdiff = P[:-1], P[:-1] - P[1:]
        if exact:
            Phi = self.basis
            r = 2.0 * (forms.output_product @ (U[1:] @ Phi.T - self.fom.g_ref.steps).T).T
            r -= (forms.A(mu) @ (Pk @ Phi.T).T).T
            r -= (forms.mass @ (Pdiff @ Phi.T).T).T / dt
            z = self.fom.riesz(r.T)
            return np.einsum("nk,kn->k", z, r)
        # tri_ad acts on the member layout without loads
        R = off.tri_ad
        shift = off.n_f
        V = -2.0 * off.cross_ad
        if self.n_rb:
            for q in range(off.n_a):
                s = off.a_slice(q)
                V = V - th_a[q] * (R[:, s.start - shift:s.stop - shift] @ Pk.T)
            s = off.m_slice()
            V = V - R[:, s.start - shift:s.stop - shift] @ Pdiff.T / dt
            s = off.d_slice()
            V = V + 2.0 * (R[:, s.start - shift:s.stop - shift] @ U[1:].T)
        return np.sum(V * V, axis=0) + 4.0 * off.tail_ad

    # -- extension -------------------------------------------------------------------
    def extend(self, mu, u_h=None, p_h=None, eps_rel=1e-24, eps_abs=None,
               chunk_size=100, omega=0.9, adjoint_noise=1e-30):
        """Return a model whose basis additionally captures the FOM primal and
        adjoint trajectories at `mu`.

        Snapshots are deflated against the current basis and compressed by
        HaPOD (separately for primal and adjoint) to a squared projection
        error below ``eps_abs``, or ``eps_rel`` times the snapshot energy when
        no absolute tolerance is given.  The training buffer of the returned
        model is empty.

        The adjoint is driven by ``u - g_ref``, which near the target is a
        small difference of two large trajectories and carries rounding noise
        of relative size about ``|u|_D / |u - g_ref|_D`` times the unit
        roundoff.  Its relative tolerance is therefore floored at
        ``adjoint_noise * |u|_D^2 / |u - g_ref|_D^2``; below that the
        snapshots hold no information worth keeping.
        """
        mu = self.fom.check_parameter(mu)
        if u_h is None or p_h is None:
            _, _, u_h, p_h = self.fom.eval_output(mu)
        G = self.fom.forms.energy
        Phi = self.basis
        MD = self.fom.forms.output_product
        U = u_h.steps
        diff = U - self.fom.g_ref.steps
        u_sq = float(np.sum(U * (MD @ U.T).T))
        diff_sq = float(np.sum(diff * (MD @ diff.T).T))
        noise = adjoint_noise * u_sq / diff_sq if diff_sq > 0.0 else np.inf
        new = []
        for traj, floor in ((u_h, 0.0), (p_h, noise)):
            S = traj.steps.T
            energy = float(np.sum(S * (G @ S)))
            if energy == 0.0:
                continue
            eps = eps_abs if eps_abs is not None else max(eps_rel, floor) * energy
            if eps >= energy:
                continue
            for _ in range(2):
                S = S - Phi @ (Phi.T @ (G @ S))
            chunks = [S[:, j:j + chunk_size] for j in range(0, S.shape[1], chunk_size)]
            modes = hapod(chunks, G, eps, omega=omega).modes
            if modes.shape[1]:
                new.append(modes)
        if new:
            added = gram_schmidt(np.hstack(new), G, against=Phi)
            Phi = np.hstack([Phi, added])
        return RbModel(self.fom, Phi, TrainingBuffer(self.buffer.capacity))
