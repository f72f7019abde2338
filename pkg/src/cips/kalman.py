"""Exact finite-dimensional references: Kalman-Bucy filter and Riccati solvers.

These are the ground-truth oracles against which every ensemble method in
the package is compared, so accuracy choices here (RK4 for Riccati
integration, per-step re-symmetrization) are deliberately conservative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import is_positive_definite, symmetrize
from .exceptions import ConvergenceError, FilterDivergenceError
from .models import FilterModel, LQProblem, ObservationPath, lq_matrices


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector and SPD covariance of a Gaussian conditional law."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class BeliefPath:
    """Gaussian belief on a uniform time grid."""

    times: np.ndarray   # (K + 1,)
    means: np.ndarray   # (K + 1, d)
    covs: np.ndarray    # (K + 1, d, d)

    def __getitem__(self, k: int) -> GaussianBelief:
        return GaussianBelief(mean=self.means[k], cov=self.covs[k])

    @property
    def terminal(self) -> GaussianBelief:
        return self[-1]


@dataclass(frozen=True)
class RiccatiPath:
    """Symmetric matrix path on a uniform time grid (value or dual Riccati)."""

    times: np.ndarray    # (K + 1,), ascending
    values: np.ndarray   # (K + 1, d, d)

    def at_index(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def filter_riccati_rhs(Sigma: np.ndarray, A: np.ndarray, H: np.ndarray,
                       Sigma_B: np.ndarray, obs_noise_var: float) -> np.ndarray:
    """d Sigma / dt for the Kalman-Bucy covariance."""
    HtH = H.T @ H / obs_noise_var
    return A @ Sigma + Sigma @ A.T + Sigma_B - Sigma @ HtH @ Sigma


def kalman_bucy_run(
    model: FilterModel,
    obs: ObservationPath,
    belief0: GaussianBelief | None = None,
) -> BeliefPath:
    """Euler-discretized Kalman-Bucy filter along an observation path.

    The mean is updated with gain K = Sigma H^T / sigma_w^2 and innovation
    dZ - H m dt; the covariance follows the filter Riccati equation with
    re-symmetrization each step.  Raises if the covariance loses positive
    definiteness (too-coarse dt or an inconsistent model).
    """
    if model.linear is None:
        raise ValueError("kalman_bucy_run requires a model with a linear descriptor")
    spec = model.linear
    A, H, Sigma_B = spec.A, spec.H, spec.Sigma_B
    r = model.obs_noise_scale**2
    dt = obs.dt

    if belief0 is None:
        belief0 = GaussianBelief(mean=spec.m0, cov=spec.Sigma0)
    m = np.asarray(belief0.mean, dtype=float).copy()
    Sigma = symmetrize(np.asarray(belief0.cov, dtype=float))

    K_steps = obs.num_steps
    d = model.dim_state
    means = np.empty((K_steps + 1, d))
    covs = np.empty((K_steps + 1, d, d))
    means[0], covs[0] = m, Sigma

    for k in range(K_steps):
        gain = Sigma @ H.T / r
        innovation = obs.increments[k] - (H @ m) * dt
        m = m + (A @ m) * dt + gain @ innovation
        Sigma = Sigma + filter_riccati_rhs(Sigma, A, H, Sigma_B, r) * dt
        Sigma = 0.5 * (Sigma + Sigma.T)
        if not is_positive_definite(Sigma):
            raise FilterDivergenceError(
                f"covariance lost positive definiteness at step {k + 1}"
            )
        means[k + 1], covs[k + 1] = m, Sigma
    return BeliefPath(times=obs.times, means=means, covs=covs)


def control_riccati_rhs(P: np.ndarray, A: np.ndarray, B: np.ndarray,
                        C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """-dP/dt of the backward value Riccati equation."""
    BRinvBt = B @ np.linalg.solve(R, B.T)
    return A.T @ P + P @ A + C.T @ C - P @ BRinvBt @ P


def dual_riccati_rhs(S: np.ndarray, A: np.ndarray, B: np.ndarray,
                     C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """dS/dt of the dual Riccati equation for S = P^{-1}."""
    BRinvBt = B @ np.linalg.solve(R, B.T)
    return A @ S + S @ A.T - BRinvBt + S @ (C.T @ C) @ S


def _rk4_matrix_step(X: np.ndarray, rhs, h: float) -> np.ndarray:
    # overflow on divergent problems is tolerated here; callers detect the
    # nonfinite result and raise ConvergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = rhs(X)
        k2 = rhs(X + 0.5 * h * k1)
        k3 = rhs(X + 0.5 * h * k2)
        k4 = rhs(X + h * k3)
        out = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (out + out.T)


def solve_dre_backward(lq: LQProblem, dt: float, oracle_only: bool = False) -> RiccatiPath:
    """Backward RK4 integration of the value Riccati equation from P_T.

    The returned path is indexed forward in time: ``values[k]`` is P at
    ``t = k * dt`` and ``values[-1] = P_T``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, B, C = lq_matrices(lq, oracle_only=oracle_only)
    num_steps = int(round(lq.horizon / dt))
    if abs(num_steps * dt - lq.horizon) > 1e-9 * max(1.0, lq.horizon):
        raise ValueError(f"horizon {lq.horizon} is not a multiple of dt {dt}")

    def rhs(P):  # d P / d tau with tau = T - t
        return control_riccati_rhs(P, A, B, C, lq.R)

    d = lq.dim_state
    values = np.empty((num_steps + 1, d, d))
    values[num_steps] = lq.P_T
    P = lq.P_T.copy()
    for j in range(num_steps):
        P = _rk4_matrix_step(P, rhs, dt)
        if not np.all(np.isfinite(P)):
            raise ConvergenceError(f"Riccati integration blew up {j + 1} steps before T")
        values[num_steps - 1 - j] = P
    times = dt * np.arange(num_steps + 1)
    return RiccatiPath(times=times, values=values)


def solve_dual_dre(lq: LQProblem, dt: float, oracle_only: bool = False) -> RiccatiPath:
    """Backward integration of the dual Riccati equation from S_T = P_T^{-1}."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, B, C = lq_matrices(lq, oracle_only=oracle_only)
    num_steps = int(round(lq.horizon / dt))
    if abs(num_steps * dt - lq.horizon) > 1e-9 * max(1.0, lq.horizon):
        raise ValueError(f"horizon {lq.horizon} is not a multiple of dt {dt}")

    def rhs(S):  # d S / d tau = -(dS/dt) with tau = T - t
        return -dual_riccati_rhs(S, A, B, C, lq.R)

    d = lq.dim_state
    S_T = symmetrize(np.linalg.inv(lq.P_T))
    values = np.empty((num_steps + 1, d, d))
    values[num_steps] = S_T
    S = S_T.copy()
    for j in range(num_steps):
        S = _rk4_matrix_step(S, rhs, dt)
        if not np.all(np.isfinite(S)):
            raise ConvergenceError(f"dual Riccati integration blew up {j + 1} steps before T")
        values[num_steps - 1 - j] = S
    times = dt * np.arange(num_steps + 1)
    return RiccatiPath(times=times, values=values)


def solve_are(
    lq: LQProblem,
    tol: float = 1e-10,
    dt: float = 1e-2,
    max_horizon: float = 1e3,
    oracle_only: bool = False,
) -> np.ndarray:
    """Stationary solution of the value Riccati equation.

    Integrates the backward equation from P_T until the time derivative is
    negligible relative to P; near the stationary point RK4 converges to the
    exact algebraic root, so the residual is limited only by ``tol``.
    """
    A, B, C = lq_matrices(lq, oracle_only=oracle_only)

    def rhs(P):
        return control_riccati_rhs(P, A, B, C, lq.R)

    P = lq.P_T.copy()
    t = 0.0
    while t < max_horizon:
        P = _rk4_matrix_step(P, rhs, dt)
        t += dt
        if not np.all(np.isfinite(P)):
            raise ConvergenceError("Riccati integration blew up before reaching stationarity")
        if np.linalg.norm(rhs(P), "fro") < tol * max(np.linalg.norm(P, "fro"), 1e-300):
            return P
    raise ConvergenceError(
        f"no stationary Riccati solution within horizon {max_horizon}; "
        "check stabilizability/detectability of the problem"
    )


def lqr_gain(lq: LQProblem, P: np.ndarray, oracle_only: bool = False) -> np.ndarray:
    """Feedback gain -R^{-1} B^T P for a given value matrix P."""
    _, B, _ = lq_matrices(lq, oracle_only=oracle_only)
    return -np.linalg.solve(lq.R, B.T @ P)
