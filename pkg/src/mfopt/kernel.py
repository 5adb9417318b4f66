"""Gaussian-kernel surrogate for reduced primal trajectories.

The model maps a parameter to all reduced coefficients at once (time steps
stacked into one vector) and is differentiated analytically, so the
objective gradient follows from the chain rule without an adjoint solve.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from mfopt.fom import Trajectory
from mfopt.numerics import solve_regularized_interpolation


class StampMismatch(ValueError):
    pass


def normalize(mu, bounds):
    """Affine map of the parameter box onto ``[-1, 1]^P``; returns the image
    and the (diagonal) Jacobian."""
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    scale = 2.0 / (hi - lo)
    return scale * (np.asarray(mu, dtype=float) - lo) - 1.0, scale


def gaussian(X, Y, width):
    d2 = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
    return np.exp(-width * d2)


@dataclass(frozen=True)
class KernelModel:
    centers: np.ndarray          # normalized, n_c x P
    coeffs: np.ndarray           # n_c x (K+1) N_RB
    width: float
    eta: float
    bounds: np.ndarray
    n_rb: int
    K: int
    train_error: float = 0.0
    # objective data: coefficient blocks whitened with the reduced output product
    _white: np.ndarray = field(default=None, repr=False, compare=False)
    _white_g: np.ndarray = field(default=None, repr=False, compare=False)
    _g_floor: float = field(default=0.0, repr=False, compare=False)

    @classmethod
    def zero(cls, rb, width=0.01, eta=1e-12):
        """The zero operator on the current reduced space."""
        P = rb.fom.n_params
        return cls(np.zeros((0, P)), np.zeros((0, (rb.K + 1) * rb.n_rb)), width, eta,
                   rb.fom.bounds, rb.n_rb, rb.K, 0.0, *_objective_data(rb, np.zeros((0, (rb.K + 1) * rb.n_rb))))

    @property
    def n_centers(self):
        return self.centers.shape[0]

    def _kernel_rows(self, mu):
        """Kernel values and their parameter derivatives, stacked ``(1 + P) x n_c``."""
        x, jac = normalize(mu, self.bounds)
        if self.n_centers == 0:
            return np.zeros((1 + x.size, 0))
        diff = x[None, :] - self.centers
        k = np.exp(-self.width * np.sum(diff * diff, axis=1))
        dk = (-2.0 * self.width * diff * jac[None, :]) * k[:, None]
        return np.vstack([k, dk.T])

    def _shape(self, flat):
        out = flat.reshape(-1, self.K + 1, self.n_rb)
        out[:, 0, :] = 0.0
        return out

    def predict(self, mu):
        rows = self._kernel_rows(mu)[:1]
        return Trajectory(self._shape(rows @ self.coeffs)[0], "primal")

    def predict_grad(self, mu):
        rows = self._kernel_rows(mu)[1:]
        return [Trajectory(v, "primal") for v in self._shape(rows @ self.coeffs)]

    def check_stamp(self, rb):
        if rb.n_rb != self.n_rb or rb.K != self.K:
            raise StampMismatch(f"kernel model built for N_RB={self.n_rb}, reduced model has {rb.n_rb}")


def _objective_data(rb, coeffs):
    """Blocks ``alpha_i`` (rows k = 1..K) and the g_ref coefficients, both
    multiplied by a Cholesky factor of the reduced output product."""
    n_c, N, K = coeffs.shape[0], rb.n_rb, rb.K
    floor = rb.dt * float(np.sum(rb.g_perp_sq))
    if N == 0:
        return np.zeros((n_c, 0)), np.zeros(0), floor
    L = sla.cholesky(rb.output_r, lower=True)
    blocks = coeffs.reshape(n_c, K + 1, N)[:, 1:, :] @ L
    white_g = (rb.g_coeffs @ L).ravel()
    return blocks.reshape(n_c, K * N), white_g, floor


def train(buffer, rb, width=0.01, eta=1e-12, previous=None):
    """Fit the kernel interpolant to the buffer contents.

    When the buffer is unchanged since the last call, `previous` is returned
    as is.
    """
    if previous is not None and not buffer.dirty:
        previous.check_stamp(rb)
        return previous
    entries = buffer.entries
    if not entries:
        raise ValueError("training buffer is empty")
    if buffer.n_rb != rb.n_rb or any(c.shape != (rb.K + 1, rb.n_rb) for _, c in entries):
        raise StampMismatch("training data does not match the reduced model dimension")
    bounds = rb.fom.bounds
    X = np.array([normalize(mu, bounds)[0] for mu, _ in entries])
    Y = np.array([c.ravel() for _, c in entries])
    A = gaussian(X, X, width)
    alpha = solve_regularized_interpolation(A, eta, Y)
    fit = A @ alpha
    norms = np.linalg.norm(Y, axis=1)
    err = np.linalg.norm(fit - Y, axis=1) / np.where(norms > 0, norms, 1.0)
    buffer.mark_trained()
    return KernelModel(X, alpha, width, eta, bounds, rb.n_rb, rb.K, float(np.max(err)),
                       *_objective_data(rb, alpha))


def eval_output_ml(model, rb, mu, with_trajectory=True):
    """Surrogate objective and its chain-rule gradient.

    Returns ``(J_ML, grad_ML, u_ml)``; `u_ml` is None when
    ``with_trajectory`` is false.
    """
    model.check_stamp(rb)
    mu = rb.fom.check_parameter(mu)
    rows = model._kernel_rows(mu)
    fom = rb.fom
    if model.n_centers and model.n_rb:
        W = rows @ model._white
        res = W[0] - model._white_g
        J = rb.dt * (res @ res) + model._g_floor
        grad = 2.0 * rb.dt * (W[1:] @ res)
    else:
        # zero operator: u_ML = 0
        J = rb.dt * float(np.sum(rb.g_sq))
        grad = np.zeros(fom.n_params)
    J += fom.regularizer(mu)
    grad = grad + fom.regularizer_grad(mu)
    u = model.predict(mu) if with_trajectory else None
    return J, grad, u
