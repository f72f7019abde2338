"""Backward ensemble solver for the LQ optimal control problem.

N copies of the open-loop model are simulated backward from T with
exploration noise shaped by R^{-1} and a coupling term built from the
ensemble's own covariance.  The empirical covariance S^(N)_t tracks the
inverse P_t^{-1} of the value Riccati matrix, so the LQR gain falls out of
ensemble statistics in a single backward pass with no Riccati solve and no
outer iteration.

Everything runs under oracle access: when the explicit (A, B, C) matrices
are withheld, dynamics are evaluated per particle through f(., 0), input
injection through f(0, .), and C-products through unit-vector probes of the
cost oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .exceptions import FilterDivergenceError, NotPositiveDefiniteError
from .linear_ensemble import empirical_moments
from .models import LQProblem, lq_matrices

_JITTER_REL = 1e-9


@dataclass(frozen=True)
class DualEnsembleState:
    """Backward ensemble at reverse time t."""

    particles: np.ndarray  # (N, d)
    time: float

    def __post_init__(self):
        x = np.asarray(self.particles, dtype=float)
        object.__setattr__(self, "particles", x)
        if not np.all(np.isfinite(x)):
            raise ValueError("dual ensemble contains nonfinite coordinates")

    @property
    def num_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        _, S = empirical_moments(self.particles)
        return S


@dataclass(frozen=True)
class GainPath:
    """Feedback gain matrices on a uniform time grid."""

    times: np.ndarray   # (K + 1,), ascending
    gains: np.ndarray   # (K + 1, m, d)


class _LQOps:
    """Matrix products through explicit matrices or per-point oracle calls."""

    def __init__(self, lq: LQProblem, oracle_only: bool = False):
        self.lq = lq
        explicit = lq.A is not None and lq.B is not None and lq.C is not None
        self._probe = oracle_only or not explicit
        if self._probe:
            # Column-probe recovery of B and C; the drift itself is evaluated
            # per particle through the oracle.
            self.A = None
            _, self.B, self.C = lq_matrices(lq, oracle_only=True)
        else:
            self.A, self.B, self.C = lq.A, lq.B, lq.C

    def drift(self, states: np.ndarray) -> np.ndarray:
        """A @ Y^i for every row of ``states``."""
        if not self._probe:
            return states @ self.A.T
        zu = np.zeros(self.lq.dim_input)
        return np.stack([np.asarray(self.lq.dynamics(row, zu), dtype=float) for row in states])

    def inject(self, inputs: np.ndarray) -> np.ndarray:
        """B @ xi^i for every row of ``inputs``."""
        return inputs @ self.B.T

    def ctc_apply(self, states: np.ndarray) -> np.ndarray:
        """C^T C @ v for every row of ``states``."""
        return states @ (self.C.T @ self.C).T


def dual_enkf_init(lq: LQProblem, num_particles: int, rng: RngStream) -> DualEnsembleState:
    """Terminal ensemble: i.i.d. draws from N(0, P_T^{-1}) at reverse time T."""
    d = lq.dim_state
    if num_particles <= d:
        raise ValueError(
            f"need more than d={d} particles for a nonsingular empirical covariance"
        )
    chol = np.linalg.cholesky(lq.P_T)
    z = rng.standard_normal((num_particles, d))
    # cov(L^{-T} z) = (L L^T)^{-1} = P_T^{-1}
    particles = np.linalg.solve(chol.T, z.T).T
    return DualEnsembleState(particles=particles, time=lq.horizon)


def dual_enkf_backward_step(
    st: DualEnsembleState,
    dt: float,
    lq: LQProblem,
    rng: RngStream,
    ops: _LQOps | None = None,
) -> DualEnsembleState:
    """One reverse-Euler step from t to t - dt.

    Y^i <- Y^i - [A Y^i + S^(N) C^T C (Y^i + n^(N)) / 2] dt - B xi^i with
    exploration noise xi^i ~ N(0, R^{-1} dt) i.i.d. across particles.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ops = ops or _LQOps(lq, oracle_only=False)
    y = st.particles
    n_mean, S = empirical_moments(y)

    coupling = 0.5 * ops.ctc_apply(y + n_mean) @ S.T
    chol_R = np.linalg.cholesky(lq.R)
    z = rng.standard_normal((y.shape[0], lq.dim_input))
    xi = np.sqrt(dt) * np.linalg.solve(chol_R.T, z.T).T   # cov R^{-1} dt

    y_new = y - (ops.drift(y) + coupling) * dt - ops.inject(xi)
    if not np.all(np.isfinite(y_new)):
        raise FilterDivergenceError(
            f"dual ensemble became nonfinite stepping to t={st.time - dt:.6g}"
        )
    return DualEnsembleState(particles=y_new, time=st.time - dt)


def _solve_spd_with_jitter(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = S.shape[0]
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        jitter = _JITTER_REL * np.trace(S) / d
        try:
            return np.linalg.solve(S + jitter * np.eye(d), rhs)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                "empirical covariance singular even after jitter"
            ) from exc


def dual_particles(st: DualEnsembleState) -> np.ndarray:
    """Transformed particles X^i = (S^(N))^{-1} (Y^i - n^(N)), shape (N, d)."""
    n_mean, S = empirical_moments(st.particles)
    return _solve_spd_with_jitter(S, (st.particles - n_mean).T).T


def value_matrix(st: DualEnsembleState) -> np.ndarray:
    """Ensemble estimate of the value matrix: (1/(N-1)) sum_i X^i (X^i)^T."""
    x = dual_particles(st)
    P = x.T @ x / (st.num_particles - 1)
    return 0.5 * (P + P.T)


def extract_gain(st: DualEnsembleState, lq: LQProblem, ops: _LQOps | None = None) -> np.ndarray:
    """Feedback gain -(1/(N-1)) sum_i R^{-1} (B^T X^i)(X^i)^T, shape (m, d)."""
    ops = ops or _LQOps(lq, oracle_only=False)
    x = dual_particles(st)
    btx = x @ ops.B                       # (N, m) rows B^T X^i
    accum = btx.T @ x / (st.num_particles - 1)
    return -np.linalg.solve(lq.R, accum)


def hamiltonian(st: DualEnsembleState, x: np.ndarray, alpha: np.ndarray, lq: LQProblem) -> float:
    """Ensemble Hamiltonian |c(x)|^2/2 + a^T R a/2 + x^T P^(N) f(x, a)."""
    x = np.asarray(x, dtype=float)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    cx = np.asarray(lq.cost_output(x), dtype=float)
    costate = value_matrix(st) @ x
    return float(
        0.5 * cx @ cx + 0.5 * alpha @ lq.R @ alpha
        + costate @ np.asarray(lq.dynamics(x, alpha), dtype=float)
    )


def hamiltonian_policy(st: DualEnsembleState, x: np.ndarray, lq: LQProblem) -> np.ndarray:
    """Control minimizing the ensemble Hamiltonian at state x.

    The Hamiltonian is quadratic in the control with known Hessian R, so
    m + 1 oracle queries recover the linear coefficient exactly:
    g_j = H(x, e_j) - H(x, 0) - R_jj / 2 and the minimizer is -R^{-1} g.
    """
    x = np.asarray(x, dtype=float)
    m = lq.dim_input
    h0 = hamiltonian(st, x, np.zeros(m), lq)
    g = np.empty(m)
    for j in range(m):
        ej = np.zeros(m)
        ej[j] = 1.0
        g[j] = hamiltonian(st, x, ej, lq) - h0 - 0.5 * lq.R[j, j]
    return -np.linalg.solve(lq.R, g)


@dataclass(frozen=True)
class DualEnkfRun:
    """Gain and empirical-covariance paths from one backward sweep."""

    gain_path: GainPath
    times: np.ndarray        # (K + 1,), ascending
    cov_path: np.ndarray     # (K + 1, d, d) empirical S^(N)
    final_state: DualEnsembleState


def run_dual_enkf(
    lq: LQProblem,
    num_particles: int,
    dt: float,
    rng: RngStream,
    oracle_only: bool = False,
) -> DualEnkfRun:
    """Single backward sweep from T to 0, recording S^(N) and the gain.

    One pass over the grid is the whole algorithm; there is no outer
    iteration to tune.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    num_steps = int(round(lq.horizon / dt))
    if abs(num_steps * dt - lq.horizon) > 1e-9 * max(1.0, lq.horizon):
        raise ValueError(f"horizon {lq.horizon} is not a multiple of dt {dt}")
    ops = _LQOps(lq, oracle_only=oracle_only)

    st = dual_enkf_init(lq, num_particles, rng)
    d, m = lq.dim_state, lq.dim_input
    covs = np.empty((num_steps + 1, d, d))
    gains = np.empty((num_steps + 1, m, d))
    covs[num_steps] = st.cov
    gains[num_steps] = extract_gain(st, lq, ops)
    for j in range(num_steps):
        st = dual_enkf_backward_step(st, dt, lq, rng, ops)
        k = num_steps - 1 - j
        covs[k] = st.cov
        gains[k] = extract_gain(st, lq, ops)
    times = dt * np.arange(num_steps + 1)
    return DualEnkfRun(
        gain_path=GainPath(times=times, gains=gains),
        times=times,
        cov_path=covs,
        final_state=st,
    )


def relative_value_mse(
    cov_path: np.ndarray,
    oracle_values: np.ndarray,
    dt: float,
    horizon: float,
) -> float:
    """Time-averaged relative Frobenius error of P^(N) = (S^(N))^{-1}.

    (1/T) * int ||P_t - P^(N)_t||_F^2 / ||P_t||_F^2 dt, trapezoid-discretized
    on the grid.
    """
    ratios = np.empty(cov_path.shape[0])
    for k in range(cov_path.shape[0]):
        P_n = np.linalg.inv(cov_path[k])
        diff = oracle_values[k] - P_n
        ratios[k] = np.sum(diff * diff) / np.sum(oracle_values[k] * oracle_values[k])
    weights = np.full(ratios.shape[0], dt)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    return float(ratios @ weights / horizon)
