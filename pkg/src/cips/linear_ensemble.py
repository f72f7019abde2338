"""Exact linear-Gaussian ensemble filters: square-root, perturbed, deterministic.

All three are particle realizations of mean-field processes whose deviation
dynamics (G_t, sigma_t, sigma'_t) satisfy the same consistency equation

    G S + S G^T + sigma sigma^T + sigma' sigma'^T = Ricc(S),

so they share the Kalman-Bucy filter as their mean-field limit and differ
only in how much randomness the coupling injects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .exceptions import FilterDivergenceError, NotPositiveDefiniteError
from .fpf import Ensemble
from .kalman import filter_riccati_rhs
from .models import FilterModel

VARIANT_TAGS = ("sqrt", "perturbed", "deterministic")

# One-shot diagonal jitter applied before declaring an empirical covariance
# singular (deterministic variant only).
_JITTER_REL = 1e-9


def empirical_moments(particles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and unbiased (N-1)-normalized covariance."""
    x = np.asarray(particles, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("empirical moments require at least 2 particles")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    return mean, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class LinearVariant:
    """Tag selecting one exact linear ensemble filter."""

    tag: str

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown variant {self.tag!r}; expected one of {VARIANT_TAGS}")

    def triple(
        self,
        A: np.ndarray,
        H: np.ndarray,
        Sigma_B: np.ndarray,
        Sigma_bar: np.ndarray,
        obs_noise_var: float = 1.0,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Deviation dynamics (G, sigma sigma^T, sigma' sigma'^T) for this variant."""
        HtH = H.T @ H / obs_noise_var
        gain_sq = Sigma_bar @ HtH @ Sigma_bar
        if self.tag == "perturbed":
            G = A - Sigma_bar @ HtH
            return G, Sigma_B, gain_sq
        if self.tag == "sqrt":
            G = A - 0.5 * Sigma_bar @ HtH
            return G, Sigma_B, np.zeros_like(Sigma_B)
        G = A - 0.5 * Sigma_bar @ HtH + 0.5 * Sigma_B @ np.linalg.inv(Sigma_bar)
        return G, np.zeros_like(Sigma_B), np.zeros_like(Sigma_B)


def consistency_residual(
    variant: LinearVariant,
    A: np.ndarray,
    H: np.ndarray,
    Sigma_B: np.ndarray,
    Sigma_bar: np.ndarray,
    obs_noise_var: float = 1.0,
) -> float:
    """Frobenius residual of the consistency equation for a variant's triple."""
    G, ssT, spspT = variant.triple(A, H, Sigma_B, Sigma_bar, obs_noise_var)
    lhs = G @ Sigma_bar + Sigma_bar @ G.T + ssT + spspT
    rhs = filter_riccati_rhs(Sigma_bar, A, H, Sigma_B, obs_noise_var)
    return float(np.linalg.norm(lhs - rhs, "fro"))


def _stable_inverse(Sigma: np.ndarray) -> np.ndarray:
    """Inverse with a single diagonal-jitter retry, mirroring the step policy."""
    d = Sigma.shape[0]
    try:
        return np.linalg.inv(Sigma)
    except np.linalg.LinAlgError:
        jitter = _JITTER_REL * np.trace(Sigma) / d
        try:
            return np.linalg.inv(Sigma + jitter * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                "empirical covariance singular even after jitter"
            ) from exc


def linear_enkf_step(
    ens: Ensemble,
    dz: np.ndarray,
    dt: float,
    model: FilterModel,
    variant: LinearVariant,
    rng: RngStream,
) -> Ensemble:
    """One Euler step of the selected exact linear ensemble filter.

    * ``sqrt``: symmetrized innovation dZ - H (X^i + m)/2 dt, process noise on.
    * ``perturbed``: innovation dZ - H X^i dt - dW^i with per-particle
      observation-noise draws dW^i ~ N(0, sigma_w^2 dt I).
    * ``deterministic``: no sampled noise at all; the process-noise effect is
      reproduced by the drift term Sigma_B Sigma^{-1} (X^i - m) / 2.
    """
    if model.linear is None:
        raise ValueError("linear_enkf_step requires a model with a linear descriptor")
    if dt <= 0:
        raise ValueError("dt must be positive")
    spec = model.linear
    A, H, sigma_B = spec.A, spec.H, spec.sigma_B
    r = model.obs_noise_scale**2
    dz = np.atleast_1d(np.asarray(dz, dtype=float))

    x = ens.particles
    n = x.shape[0]
    mean, Sigma = empirical_moments(x)
    gain = Sigma @ H.T / r                     # (d, m)

    hx = x @ H.T                               # (N, m)
    hm = H @ mean

    if variant.tag == "sqrt":
        innovation = dz - 0.5 * (hx + hm) * dt
        db = np.sqrt(dt) * rng.standard_normal((n, sigma_B.shape[1]))
        move = db @ sigma_B.T + innovation @ gain.T
    elif variant.tag == "perturbed":
        dw = np.sqrt(dt) * model.obs_noise_scale * rng.standard_normal((n, H.shape[0]))
        innovation = dz - hx * dt - dw
        db = np.sqrt(dt) * rng.standard_normal((n, sigma_B.shape[1]))
        move = db @ sigma_B.T + innovation @ gain.T
    else:  # deterministic
        innovation = dz - 0.5 * (hx + hm) * dt
        Sigma_inv = _stable_inverse(Sigma)
        spread = 0.5 * (x - mean) @ (spec.Sigma_B @ Sigma_inv).T * dt
        move = spread + innovation @ gain.T

    x_new = x + (x @ A.T) * dt + move
    if not np.all(np.isfinite(x_new)):
        raise FilterDivergenceError(
            f"ensemble became nonfinite after step at t={ens.time:.6g}"
        )
    return Ensemble(particles=x_new, time=ens.time + dt)
