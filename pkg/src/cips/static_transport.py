"""Static Gaussian update maps and the deterministic heat-flow transport demo.

Two ways to move a prior sample to the conditional law of X given Y = y in a
jointly Gaussian model: the symmetric optimal-transport affine map and the
random perturbed-observation map.  Both reproduce the conditional mean and
covariance of the exact Bayes update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, psd_factor, sym_sqrt, symmetrize
from .exceptions import NotPositiveDefiniteError
from .fpf import Ensemble
from .kalman import GaussianBelief


@dataclass(frozen=True)
class JointGaussian:
    """Jointly Gaussian (X, Y) given by means and covariance blocks."""

    mean_x: np.ndarray   # (d,)
    mean_y: np.ndarray   # (m,)
    cov_x: np.ndarray    # (d, d)
    cov_xy: np.ndarray   # (d, m)
    cov_y: np.ndarray    # (m, m)

    def __post_init__(self):
        mean_x = np.atleast_1d(np.asarray(self.mean_x, dtype=float))
        mean_y = np.atleast_1d(np.asarray(self.mean_y, dtype=float))
        cov_x = symmetrize(np.atleast_2d(np.asarray(self.cov_x, dtype=float)))
        cov_y = symmetrize(np.atleast_2d(np.asarray(self.cov_y, dtype=float)))
        cov_xy = np.atleast_2d(np.asarray(self.cov_xy, dtype=float))
        object.__setattr__(self, "mean_x", mean_x)
        object.__setattr__(self, "mean_y", mean_y)
        object.__setattr__(self, "cov_x", cov_x)
        object.__setattr__(self, "cov_xy", cov_xy)
        object.__setattr__(self, "cov_y", cov_y)
        d, m = mean_x.shape[0], mean_y.shape[0]
        if cov_x.shape != (d, d) or cov_y.shape != (m, m) or cov_xy.shape != (d, m):
            raise ValueError("covariance block shapes are inconsistent")
        joint = self.joint_cov()
        eigmin = np.linalg.eigvalsh(joint).min()
        if eigmin < -1e-10 * max(np.trace(joint), 1.0):
            raise NotPositiveDefiniteError(
                f"joint covariance has eigenvalue {eigmin:.3e}"
            )
        try:
            np.linalg.cholesky(cov_y)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("cov_y must be positive definite") from exc

    @property
    def dim_x(self) -> int:
        return self.mean_x.shape[0]

    @property
    def dim_y(self) -> int:
        return self.mean_y.shape[0]

    def joint_cov(self) -> np.ndarray:
        top = np.hstack([self.cov_x, self.cov_xy])
        bottom = np.hstack([self.cov_xy.T, self.cov_y])
        return np.vstack([top, bottom])

    def gain(self) -> np.ndarray:
        """Best-linear-estimator gain K = cov_xy cov_y^{-1}."""
        return np.linalg.solve(self.cov_y.T, self.cov_xy.T).T

    def sample(self, rng: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
        """n joint draws; returns (x, y) with shapes (n, d) and (n, m)."""
        d = self.dim_x
        mean = np.concatenate([self.mean_x, self.mean_y])
        factor = psd_factor(self.joint_cov())
        z = rng.standard_normal((n, factor.shape[1]))
        xy = mean + z @ factor.T
        return xy[:, :d], xy[:, d:]


def blue_update(jg: JointGaussian, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and covariance of X given Y = y.

    mean = E[X] + K (y - E[Y]) with K = cov_xy cov_y^{-1}; for a Gaussian
    joint this is the exact Bayes posterior, otherwise the best linear
    estimator.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    K = jg.gain()
    mean = jg.mean_x + K @ (y - jg.mean_y)
    cov = jg.cov_x - K @ jg.cov_xy.T
    return mean, symmetrize(cov, rtol=1e-9)


@dataclass(frozen=True)
class AffineMap:
    """Affine update x0 -> matrix (x0 - mean_x) + gain (y - mean_y) + mean_x."""

    matrix: np.ndarray  # (d, d) symmetric PSD transport factor
    gain: np.ndarray    # (d, m)
    mean_x: np.ndarray
    mean_y: np.ndarray

    def __call__(self, x0: np.ndarray, y: np.ndarray) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        shift = self.gain @ (y - self.mean_y) + self.mean_x
        return (x0 - self.mean_x) @ self.matrix.T + shift


def ot_affine_map(jg: JointGaussian) -> AffineMap:
    """Deterministic optimal-transport update map for a Gaussian joint.

    The matrix part is the unique symmetric PSD solution A of
    A cov_x A = cov_x - K cov_y K^T, computed by the two-square-roots
    formula A = cov_x^{-1/2} (cov_x^{1/2} M cov_x^{1/2})^{1/2} cov_x^{-1/2}.
    """
    K = jg.gain()
    M = symmetrize(jg.cov_x - K @ jg.cov_y @ K.T, rtol=1e-9)
    root_x = sym_sqrt(jg.cov_x)
    root_x_inv = np.linalg.inv(root_x)
    inner = sym_sqrt(root_x @ M @ root_x)
    A = symmetrize(root_x_inv @ inner @ root_x_inv, rtol=1e-6)
    return AffineMap(matrix=A, gain=K, mean_x=jg.mean_x, mean_y=jg.mean_y)


def perturbed_enkf_map(
    jg: JointGaussian,
    y: np.ndarray,
    rng: RngStream,
    size: int,
) -> np.ndarray:
    """Random perturbed-observation update samples.

    Draws ``size`` independent joint samples (x0, y0) and maps each to
    x0 + K (y - y0); the output is distributed as the conditional law of X
    given Y = y when the joint is Gaussian.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    K = jg.gain()
    x0, y0 = jg.sample(rng, size)
    return x0 + (y - y0) @ K.T


def heat_transport_step(
    ens: Ensemble,
    t: float,
    dt: float,
    prior: GaussianBelief,
) -> Ensemble:
    """Forward-Euler step of the deterministic heat-flow transport.

    Particles follow dx/dt = -grad log p_t(x) where p_t = N(m0, Sigma0 + 2tI)
    is the heat-kernel evolution of the Gaussian prior, so the velocity field
    is (Sigma0 + 2tI)^{-1} (x - m0).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    d = ens.dim
    spread = symmetrize(np.asarray(prior.cov, dtype=float)) + 2.0 * t * np.eye(d)
    m0 = np.atleast_1d(np.asarray(prior.mean, dtype=float))
    velocity = np.linalg.solve(spread, (ens.particles - m0).T).T
    return Ensemble(particles=ens.particles + dt * velocity, time=ens.time + dt)
