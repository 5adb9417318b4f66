"""Full-order model: implicit-Euler primal/adjoint solves, objective, adjoint
gradient and the stability constants of the error estimators."""
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mfopt.numerics import BandedCholesky, NonConvergence, as_csr, cg_solve, max_gen_eig


def forcing(t):
    """Heater ramp ``b(t) = min(2t, 1)``."""
    return np.minimum(2.0 * np.asarray(t, dtype=float), 1.0)


@dataclass
class Trajectory:
    """Time-indexed coefficient rows.

    Primal trajectories store ``k = 0..K`` (row ``k`` is time index ``k``);
    adjoint trajectories store ``k = 1..K+1`` (row ``k - 1``).  Either way
    ``steps`` gives the rows for ``k = 1..K``.
    """
    values: np.ndarray
    role: str = "primal"

    def __post_init__(self):
        if self.role not in ("primal", "adjoint"):
            raise ValueError(f"unknown trajectory role {self.role!r}")

    @property
    def K(self):
        return self.values.shape[0] - 1

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def steps(self):
        return self.values[1:] if self.role == "primal" else self.values[:-1]

    def at(self, k):
        return self.values[k] if self.role == "primal" else self.values[k - 1]

    @classmethod
    def zeros(cls, K, dim, role="primal"):
        return cls(np.zeros((K + 1, dim)), role)


@dataclass(frozen=True)
class ConstantsBundle:
    alpha_lb: float
    gamma_amu_ub: np.ndarray
    gamma_d: float
    gamma_l: float


class SolverError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class FomModel:
    """High-fidelity model on the free nodes of the finite-element space.

    `solver` selects how the implicit-Euler and Riesz systems are solved:
    ``"direct"`` factorizes each system matrix once and reuses it over all
    time steps, ``"cg"`` runs Jacobi-preconditioned CG per step.
    """
    forms: object
    K: int
    dt: float
    mu_hat: np.ndarray
    lam: float
    bounds: np.ndarray
    g_ref: Trajectory | None = None
    solver: str = "direct"
    cg_rtol: float = 1e-12
    _riesz_lu: object = field(default=None, init=False, repr=False)
    _gamma_d: float | None = field(default=None, init=False, repr=False)
    _gamma_l: float | None = field(default=None, init=False, repr=False)
    _energy_chol: BandedCholesky | None = field(default=None, init=False, repr=False)
    _whitened_output: tuple | None = field(default=None, init=False, repr=False)
    _g_norm: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.K < 1 or self.dt <= 0:
            raise ValueError("need K >= 1 and dt > 0")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        if self.solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")
        self.mu_hat = np.asarray(self.mu_hat, dtype=float)
        self.bounds = np.asarray(self.bounds, dtype=float)
        self.b = forcing(self.dt * np.arange(self.K + 1))
        self.b[0] = 0.0
        if self.g_ref is None:
            self.g_ref = Trajectory.zeros(self.K, self.dim)

    @property
    def dim(self):
        return self.forms.mass.shape[0]

    @property
    def n_params(self):
        return self.forms.n_params

    @property
    def T(self):
        return self.K * self.dt

    def check_parameter(self, mu):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_params,):
            raise ValueError(f"parameter must have {self.n_params} entries")
        if np.any(mu < self.bounds[0] - 1e-14) or np.any(mu > self.bounds[1] + 1e-14):
            raise ValueError(f"parameter {mu} outside the admissible box")
        return mu

    # -- linear solves ---------------------------------------------------
    def _factorize(self, A):
        if self.solver == "direct":
            lu = spla.splu(sp.csc_matrix(A))
            return lu.solve
        def solve(rhs, x0=None):
            return cg_solve(A, rhs, rtol=self.cg_rtol, x0=x0)[0]
        return solve

    def _stepper(self, mu):
        Mdt = self.forms.mass / self.dt
        return Mdt, self._factorize(as_csr(Mdt + self.forms.A(mu)))

    def riesz(self, rhs):
        """Riesz representatives in the energy product (columns of `rhs`)."""
        rhs = np.asarray(rhs, dtype=float)
        if self.solver == "direct":
            if self._riesz_lu is None:
                self._riesz_lu = spla.splu(sp.csc_matrix(self.forms.energy))
            return self._riesz_lu.solve(rhs)
        if rhs.ndim == 1:
            return cg_solve(self.forms.energy, rhs, rtol=self.cg_rtol)[0]
        return np.column_stack([cg_solve(self.forms.energy, c, rtol=self.cg_rtol)[0]
                                for c in rhs.T])

    @property
    def energy_factor(self):
        if self._energy_chol is None:
            self._energy_chol = BandedCholesky(self.forms.energy)
        return self._energy_chol

    def output_functionals(self):
        """Columns ``M_D g^k`` for ``k = 1..K`` and their whitened images."""
        key = id(self.g_ref.values)
        if self._whitened_output is None or self._whitened_output[0] != key:
            G = np.ascontiguousarray((self.forms.output_product @ self.g_ref.steps.T))
            self._whitened_output = (key, G, self.energy_factor.whiten(G))
        return self._whitened_output[1], self._whitened_output[2]

    # -- trajectories ------------------------------------------------------
    def solve_primal(self, mu):
        mu = self.check_parameter(mu)
        Mdt, solve = self._stepper(mu)
        f = self.forms.f(mu)
        U = np.zeros((self.K + 1, self.dim))
        for k in range(1, self.K + 1):
            try:
                U[k] = solve(Mdt @ U[k - 1] + self.b[k] * f)
            except NonConvergence as exc:
                raise SolverError(f"primal solve failed at time step {k}: {exc}", k) from exc
        return Trajectory(U, "primal")

    def solve_adjoint(self, mu, u):
        mu = self.check_parameter(mu)
        if u.role != "primal" or u.values.shape != (self.K + 1, self.dim):
            raise ValueError("adjoint solve needs a primal trajectory of matching size")
        Mdt, solve = self._stepper(mu)
        MD = self.forms.output_product
        rhs = 2.0 * (MD @ (u.steps - self.g_ref.steps).T).T
        P = np.zeros((self.K + 1, self.dim))
        # row j holds p^{j+1}; row K is p^{K+1} = 0
        for k in range(self.K, 0, -1):
            try:
                P[k - 1] = solve(Mdt @ P[k] + rhs[k - 1])
            except NonConvergence as exc:
                raise SolverError(f"adjoint solve failed at time step {k}: {exc}", k) from exc
        return Trajectory(P, "adjoint")

    def solve_sensitivity(self, mu, u, i):
        """Parameter derivative ``d u / d mu_i`` of the primal trajectory."""
        mu = self.check_parameter(mu)
        Mdt, solve = self._stepper(mu)
        dA = self.forms.dA(mu, i)
        df = self.forms.df(mu, i)
        dU = np.zeros((self.K + 1, self.dim))
        for k in range(1, self.K + 1):
            dU[k] = solve(Mdt @ dU[k - 1] + self.b[k] * df - dA @ u.values[k])
        return Trajectory(dU, "primal")

    # -- objective -----------------------------------------------------------
    def regularizer(self, mu):
        return self.lam * float(np.sum((np.asarray(mu) - self.mu_hat) ** 2))

    def regularizer_grad(self, mu):
        return 2.0 * self.lam * (np.asarray(mu) - self.mu_hat)

    def objective(self, mu, u):
        diff = u.steps - self.g_ref.steps
        misfit = np.einsum("kn,kn->", diff, (self.forms.output_product @ diff.T).T)
        return self.dt * misfit + self.regularizer(mu)

    def gradient(self, mu, u, p):
        """Adjoint gradient ``d_mu_i J = dt sum_k [b_k f_mu_i(p^k) - a_mu_i(u^k, p^k)] + lam dR``."""
        U, P = u.steps, p.steps
        dth_a = self.forms.dtheta_a(mu)
        dth_f = self.forms.dtheta_f(mu)
        a_terms = np.array([np.einsum("kn,kn->", U, (Aq @ P.T).T) for Aq in self.forms.stiffness])
        f_terms = np.array([self.b[1:] @ (P @ fq) for fq in self.forms.loads])
        return self.dt * (dth_f.T @ f_terms - dth_a.T @ a_terms) + self.regularizer_grad(mu)

    def eval_output(self, mu):
        mu = self.check_parameter(mu)
        u = self.solve_primal(mu)
        p = self.solve_adjoint(mu, u)
        return self.objective(mu, u), self.gradient(mu, u, p), u, p

    # -- constants -----------------------------------------------------------
    def _theta_ratios(self, mu):
        th = self.forms.theta_a(mu)
        th_bar = self.forms.theta_a(self.forms.mu_bar)
        if np.any(th <= 0) or np.any(th_bar <= 0):
            raise ValueError("min/max-theta bounds need positive coefficient functions")
        return th, th_bar

    def alpha_lb(self, mu):
        th, th_bar = self._theta_ratios(mu)
        return float(np.min(th / th_bar))

    def gamma_amu_ub(self, mu):
        _, th_bar = self._theta_ratios(mu)
        return np.max(np.abs(self.forms.dtheta_a(mu)) / th_bar[:, None], axis=0)

    @property
    def gamma_d(self):
        if self._gamma_d is None:
            self._gamma_d = max_gen_eig(self.forms.output_product, self.forms.energy,
                                        tol=1e-10, solve=self.riesz)
        return self._gamma_d

    @property
    def gamma_l(self):
        # sup_k ||l^k||_{V'}; kept for completeness, no estimator uses it
        if self._gamma_l is None:
            G = 2.0 * (self.forms.output_product @ self.g_ref.steps.T)
            R = self.riesz(G)
            self._gamma_l = float(np.sqrt(np.max(np.sum(G * R, axis=0), initial=0.0)))
        return self._gamma_l

    def constants(self, mu):
        mu = self.check_parameter(mu)
        return ConstantsBundle(self.alpha_lb(mu), self.gamma_amu_ub(mu), self.gamma_d, self.gamma_l)

    # -- norms ---------------------------------------------------------------
    def s_norm(self, rows):
        """``(dt sum_k ||u^k||_V^2)^{1/2}`` over the given full-space rows."""
        X = np.asarray(rows)
        return float(np.sqrt(self.dt * np.einsum("kn,kn->", X, (self.forms.energy @ X.T).T)))

    def g_ref_s_norm(self):
        key = id(self.g_ref.values)
        if self._g_norm is None or self._g_norm[0] != key:
            self._g_norm = (key, self.s_norm(self.g_ref.steps))
        return self._g_norm[1]


def reference_cache_key(forms, K, dt, mu_hat):
    h = hashlib.sha256()
    for arr in (forms.mass.data, forms.energy.data, forms.loads[0]):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.array([K, dt, *mu_hat], dtype=float).tobytes())
    return h.hexdigest()[:16]


def build_fom(forms, K, dt, mu_hat, lam, bounds, solver="direct", cache_dir=None):
    """Create the FOM and attach ``g_ref`` = primal solution at ``mu_hat``."""
    model = FomModel(forms, K, dt, mu_hat, lam, bounds, solver=solver)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"gref_{reference_cache_key(forms, K, dt, model.mu_hat)}.npy"
        if path.exists():
            model.g_ref = Trajectory(np.load(path), "primal")
            return model
    model.g_ref = model.solve_primal(model.mu_hat)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, model.g_ref.values)
    return model
