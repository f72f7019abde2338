"""Filtering/control model constructors and truth-path simulation.

A :class:`FilterModel` packages the drift, diffusion and observation
functions of a continuous-time state-space model

    dX_t = a(X_t) dt + sigma_B(X_t) dB_t,      X_0 ~ p0,
    dZ_t = h(X_t) dt + sigma_w dW_t,

together with a prior sampler.  All function oracles are batched: they map
``(n, d)`` arrays of states to arrays with leading dimension ``n``.  The
observation-noise scale ``sigma_w`` defaults to 1 (unit-noise observation
model); filters consume it as a scaling of the Z-increment weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

from .core import RngStream, is_positive_definite, symmetrize
from .exceptions import FilterDivergenceError


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Explicit matrices of a linear Gaussian model (when available)."""

    A: np.ndarray        # (d, d)
    H: np.ndarray        # (m, d)
    sigma_B: np.ndarray  # (d, q)
    m0: np.ndarray       # (d,)
    Sigma0: np.ndarray   # (d, d)

    @property
    def Sigma_B(self) -> np.ndarray:
        """Process-noise covariance sigma_B @ sigma_B.T."""
        return self.sigma_B @ self.sigma_B.T


@dataclass(frozen=True)
class FilterModel:
    """Nonlinear filtering model given through function oracles."""

    dim_state: int
    dim_obs: int
    drift: Callable[[np.ndarray], np.ndarray]          # (n,d) -> (n,d)
    diffusion: Callable[[np.ndarray], np.ndarray]      # (n,d) -> (d,q) or (n,d,q)
    observation: Callable[[np.ndarray], np.ndarray]    # (n,d) -> (n,m)
    sample_prior: Callable[[RngStream, int], np.ndarray]  # -> (n,d)
    obs_noise_scale: float = 1.0
    linear: LinearGaussianSpec | None = None

    def diffusion_term(self, x: np.ndarray, db: np.ndarray) -> np.ndarray:
        """sigma_B(x) @ db per row; supports constant or state-dependent sigma_B."""
        sig = self.diffusion(x)
        if sig.ndim == 2:
            return db @ sig.T
        return np.einsum("ndq,nq->nd", sig, db)

    def diffusion_width(self, x: np.ndarray) -> int:
        """Number of independent Wiener components q."""
        sig = self.diffusion(x[:1] if x.ndim == 2 else x)
        return sig.shape[-1]


@dataclass(frozen=True)
class ObservationPath:
    """Observation increments on a uniform time grid."""

    dt: float
    increments: np.ndarray  # (K, m); row k is Z_{t_{k+1}} - Z_{t_k}
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(self.increments)):
            raise ValueError("observation increments must be finite")

    @property
    def num_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def horizon(self) -> float:
        return self.num_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.num_steps + 1)

    def cumulative(self) -> np.ndarray:
        """Z_t on the grid, starting from 0: shape (K + 1, m)."""
        m = self.increments.shape[1]
        return np.vstack([np.zeros((1, m)), np.cumsum(self.increments, axis=0)])


@dataclass(frozen=True)
class Density1D:
    """Gaussian mixture density on the real line."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("means", "variances", "weights"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.variances <= 0):
            raise ValueError("mixture variances must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) ** 2 / (2.0 * self.variances)
        comps = np.exp(-z) / np.sqrt(2.0 * np.pi * self.variances)
        return comps @ self.weights

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / np.sqrt(2.0 * self.variances)
        return (0.5 * (1.0 + erf(z))) @ self.weights

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        second = self.weights @ (self.variances + self.means**2)
        return float(second - self.mean() ** 2)

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal(n)

    def support_grid(self, num_points: int = 2001, num_sigmas: float = 8.0) -> np.ndarray:
        """Uniform grid covering ``num_sigmas`` mixture standard deviations."""
        spread = num_sigmas * np.sqrt(self.variance())
        lo = float(self.means.min()) - spread
        hi = float(self.means.max()) + spread
        return np.linspace(lo, hi, num_points)


@dataclass(frozen=True)
class LQProblem:
    """Finite-horizon linear quadratic problem accessed through oracles.

    ``dynamics(x, u)`` evaluates A x + B u and ``cost_output(x)`` evaluates
    C x at single points; the quadratic weights R (on the input) and P_T
    (terminal) are known matrices.  ``A``, ``B``, ``C`` may be attached for
    cross-checks but every solver can also run purely on the oracles.
    """

    dim_state: int
    dim_input: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    cost_output: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray
    P_T: np.ndarray
    horizon: float
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    C: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "R", symmetrize(self.R))
        object.__setattr__(self, "P_T", symmetrize(self.P_T))
        if not is_positive_definite(self.R):
            raise ValueError("R must be symmetric positive definite")
        if not is_positive_definite(self.P_T):
            raise ValueError("P_T must be symmetric positive definite")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


def recover_lq_matrices(lq: LQProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reconstruct (A, B, C) from the oracles by probing unit vectors.

    Column j of A is dynamics(e_j, 0) - dynamics(0, 0); column j of B is
    dynamics(0, e_j) - dynamics(0, 0); column j of C is cost(e_j) - cost(0).
    Legitimate because the oracles are linear.
    """
    d, m = lq.dim_state, lq.dim_input
    zx, zu = np.zeros(d), np.zeros(m)
    f0 = np.asarray(lq.dynamics(zx, zu), dtype=float)
    c0 = np.asarray(lq.cost_output(zx), dtype=float)
    A = np.empty((d, d))
    C = np.empty((c0.shape[0], d))
    for j in range(d):
        ej = np.zeros(d)
        ej[j] = 1.0
        A[:, j] = np.asarray(lq.dynamics(ej, zu), dtype=float) - f0
        C[:, j] = np.asarray(lq.cost_output(ej), dtype=float) - c0
    B = np.empty((d, m))
    for j in range(m):
        ej = np.zeros(m)
        ej[j] = 1.0
        B[:, j] = np.asarray(lq.dynamics(zx, ej), dtype=float) - f0
    return A, B, C


def lq_matrices(lq: LQProblem, oracle_only: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Explicit matrices when attached, otherwise oracle recovery."""
    if not oracle_only and lq.A is not None and lq.B is not None and lq.C is not None:
        return lq.A, lq.B, lq.C
    return recover_lq_matrices(lq)


def make_linear_gaussian(
    A: np.ndarray,
    H: np.ndarray,
    sigma_B: np.ndarray,
    m0: np.ndarray,
    Sigma0: np.ndarray,
    obs_noise_scale: float = 1.0,
) -> FilterModel:
    """Linear Gaussian filtering model with populated linear descriptor."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    sigma_B = np.atleast_2d(np.asarray(sigma_B, dtype=float))
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    Sigma0 = symmetrize(np.atleast_2d(np.asarray(Sigma0, dtype=float)))

    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError(f"A must be square, got {A.shape}")
    if H.shape[1] != d:
        raise ValueError(f"H has {H.shape[1]} columns, expected {d}")
    if sigma_B.shape[0] != d:
        raise ValueError(f"sigma_B has {sigma_B.shape[0]} rows, expected {d}")
    if m0.shape != (d,):
        raise ValueError(f"m0 has shape {m0.shape}, expected ({d},)")
    if Sigma0.shape != (d, d):
        raise ValueError(f"Sigma0 has shape {Sigma0.shape}, expected ({d}, {d})")
    if not is_positive_definite(Sigma0):
        raise ValueError("Sigma0 must be symmetric positive definite")
    if obs_noise_scale <= 0:
        raise ValueError("obs_noise_scale must be positive")

    spec = LinearGaussianSpec(A=A, H=H, sigma_B=sigma_B, m0=m0, Sigma0=Sigma0)
    sqrt_Sigma0 = np.linalg.cholesky(Sigma0)

    def drift(x):
        return x @ A.T

    def diffusion(x):
        return sigma_B

    def observation(x):
        return x @ H.T

    def sample_prior(rng, n):
        return m0 + rng.standard_normal((n, d)) @ sqrt_Sigma0.T

    model = FilterModel(
        dim_state=d,
        dim_obs=H.shape[0],
        drift=drift,
        diffusion=diffusion,
        observation=observation,
        sample_prior=sample_prior,
        obs_noise_scale=float(obs_noise_scale),
        linear=spec,
    )
    _check_linear_descriptor(model)
    return model


def _check_linear_descriptor(model: FilterModel, num_points: int = 10, tol: float = 1e-12):
    """Descriptor/oracle agreement at random points (construction invariant)."""
    spec = model.linear
    rng = RngStream(0x11EA4)
    x = rng.standard_normal((num_points, model.dim_state))
    scale = max(1.0, np.abs(x).max())
    if np.abs(model.drift(x) - x @ spec.A.T).max() > tol * scale * max(1.0, np.abs(spec.A).max()):
        raise ValueError("linear descriptor disagrees with drift oracle")
    if np.abs(model.observation(x) - x @ spec.H.T).max() > tol * scale * max(1.0, np.abs(spec.H).max()):
        raise ValueError("linear descriptor disagrees with observation oracle")


def make_static_param(d: int, sigma0: float, sigma_w: float) -> FilterModel:
    """Static parameter-estimation model: frozen state, identity observation.

    State X ~ N(0, sigma0^2 I_d) never moves; dZ = X dt + sigma_w dW.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if sigma0 <= 0 or sigma_w <= 0:
        raise ValueError("sigma0 and sigma_w must be positive")
    A = np.zeros((d, d))
    H = np.eye(d)
    sigma_B = np.zeros((d, d))
    m0 = np.zeros(d)
    Sigma0 = sigma0**2 * np.eye(d)
    return make_linear_gaussian(A, H, sigma_B, m0, Sigma0, obs_noise_scale=sigma_w)


def static_posterior(sigma0: float, sigma_w: float, z1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact time-1 posterior (mean, covariance) of the static model given Z_1."""
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    gain = sigma0**2 / (sigma0**2 + sigma_w**2)
    mean = gain * z1
    cov = (sigma0**2 * sigma_w**2) / (sigma0**2 + sigma_w**2) * np.eye(z1.shape[0])
    return mean, cov


def make_bimodal(sigma2: float) -> Density1D:
    """Equal-weight two-Gaussian mixture centered at -1 and +1."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return Density1D(means=[-1.0, 1.0], variances=[sigma2, sigma2], weights=[0.5, 0.5])


def simulate_truth_and_observations(
    model: FilterModel,
    dt: float,
    horizon: float,
    rng: RngStream,
) -> tuple[np.ndarray, ObservationPath]:
    """Euler-Maruyama truth path and its observation increments.

    Returns the state path with shape ``(K + 1, d)`` and an
    :class:`ObservationPath` with ``Delta Z_k = h(X_k) dt + sigma_w dW_k``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    num_steps = int(round(horizon / dt))
    if abs(num_steps * dt - horizon) > 1e-12 * max(1.0, abs(horizon)):
        raise ValueError(f"horizon {horizon} is not a multiple of dt {dt}")

    d, m = model.dim_state, model.dim_obs
    x = model.sample_prior(rng, 1)
    q = model.diffusion_width(x)
    states = np.empty((num_steps + 1, d))
    states[0] = x[0]
    increments = np.empty((num_steps, m))
    sqdt = np.sqrt(dt)
    for k in range(num_steps):
        h_val = model.observation(x)[0]
        dw = sqdt * rng.standard_normal(m)
        increments[k] = h_val * dt + model.obs_noise_scale * dw
        db = sqdt * rng.standard_normal((1, q))
        x = x + model.drift(x) * dt + model.diffusion_term(x, db)
        if not np.all(np.isfinite(x)):
            raise FilterDivergenceError(
                f"state became nonfinite at step {k + 1}; reduce dt or check the model"
            )
        states[k + 1] = x[0]
    return states, ObservationPath(dt=dt, increments=increments)


def make_lq_canonical(d: int, rng: RngStream) -> LQProblem:
    """Random controllable-canonical LQ problem of dimension ``d``.

    Companion-form A with standard-normal last row, B = e_d, and identity
    C, R, P_T.  Horizon defaults to 10.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    A = np.zeros((d, d))
    A[: d - 1, 1:] = np.eye(d - 1)
    A[d - 1, :] = rng.standard_normal(d)
    B = np.zeros((d, 1))
    B[d - 1, 0] = 1.0
    C = np.eye(d)
    R = np.eye(1)
    P_T = np.eye(d)

    def dynamics(x, u):
        return A @ np.asarray(x, dtype=float) + B @ np.atleast_1d(np.asarray(u, dtype=float))

    def cost_output(x):
        return C @ np.asarray(x, dtype=float)

    return LQProblem(
        dim_state=d,
        dim_input=1,
        dynamics=dynamics,
        cost_output=cost_output,
        R=R,
        P_T=P_T,
        horizon=10.0,
        A=A,
        B=B,
        C=C,
    )


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[B, AB, ..., A^{d-1} B] stacked column-wise."""
    d = A.shape[0]
    blocks = [B]
    for _ in range(d - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)
