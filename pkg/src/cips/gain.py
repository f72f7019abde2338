"""Gain-function approximation from particles.

The gain at a particle is the gradient of the solution of the
probability-weighted Poisson equation

    -(1/rho) div(rho grad phi) = h - hbar,        hbar = E_rho[h],

with one scalar equation per observation component.  Three approximations
are provided (constant gain, Galerkin on a basis, diffusion map), plus an
exact integral-formula solver in one dimension used as ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import RngStream
from .exceptions import GainSolveError
from .models import Density1D


def _as_obs_matrix(h_values: np.ndarray) -> np.ndarray:
    """Normalize observation values to shape (N, m)."""
    h = np.asarray(h_values, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    return h


def _as_particle_matrix(particles: np.ndarray) -> np.ndarray:
    x = np.asarray(particles, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class GainField:
    """Per-particle d x m gain matrices, possibly shared by all particles."""

    values: np.ndarray   # (d, m) if constant else (N, d, m)
    constant: bool

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("gain field contains nonfinite entries")

    def per_particle(self, num_particles: int | None = None) -> np.ndarray:
        """Gains broadcast to shape (N, d, m)."""
        if self.constant:
            if num_particles is None:
                raise ValueError("num_particles required to broadcast a constant gain")
            return np.broadcast_to(self.values, (num_particles,) + self.values.shape)
        if num_particles is not None and self.values.shape[0] != num_particles:
            raise ValueError("gain field holds a different particle count")
        return self.values


@dataclass(frozen=True)
class BasisSet:
    """Differentiable scalar basis functions psi_l with explicit gradients.

    Each function maps (N, d) -> (N,), each gradient (N, d) -> (N, d).
    """

    functions: Sequence[Callable[[np.ndarray], np.ndarray]]
    gradients: Sequence[Callable[[np.ndarray], np.ndarray]]

    def __post_init__(self):
        if len(self.functions) != len(self.gradients):
            raise ValueError("functions and gradients must pair up")
        if len(self.functions) == 0:
            raise ValueError("basis must contain at least one function")

    def __len__(self) -> int:
        return len(self.functions)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Psi matrix, shape (N, M)."""
        return np.stack([np.asarray(f(x), dtype=float) for f in self.functions], axis=1)

    def evaluate_gradients(self, x: np.ndarray) -> np.ndarray:
        """Gradient stack, shape (N, M, d)."""
        return np.stack([np.asarray(g(x), dtype=float) for g in self.gradients], axis=1)

    def validate(self, dim: int, rng: RngStream | None = None,
                 num_points: int = 5, tol: float = 1e-5) -> None:
        """Check gradients against central finite differences at random points."""
        rng = rng or RngStream(0xBA515)
        pts = rng.standard_normal((num_points, dim))
        step = 1e-6
        grads = self.evaluate_gradients(pts)
        for k in range(dim):
            shift = np.zeros(dim)
            shift[k] = step
            fd = (self.evaluate(pts + shift) - self.evaluate(pts - shift)) / (2 * step)
            err = np.abs(fd - grads[:, :, k]).max()
            if err > tol * max(1.0, np.abs(grads).max()):
                raise ValueError(
                    f"basis gradient disagrees with finite differences in "
                    f"coordinate {k}: max error {err:.3e}"
                )


def coordinate_basis(dim: int) -> BasisSet:
    """The d coordinate functions x_1, ..., x_d."""

    def make(j):
        def func(x):
            return x[:, j]

        def grad(x):
            g = np.zeros_like(x)
            g[:, j] = 1.0
            return g

        return func, grad

    funcs, grads = zip(*(make(j) for j in range(dim)))
    basis = BasisSet(functions=list(funcs), gradients=list(grads))
    basis.validate(dim)
    return basis


def polynomial_basis_1d(degrees: Sequence[int]) -> BasisSet:
    """Monomials x^k (k >= 1) on the real line, as a basis for d = 1."""

    def make(k):
        if k < 1:
            raise ValueError("degrees must be >= 1 (constants have zero gradient)")

        def func(x):
            return x[:, 0] ** k

        def grad(x):
            return (k * x[:, 0] ** (k - 1))[:, None]

        return func, grad

    funcs, grads = zip(*(make(k) for k in degrees))
    basis = BasisSet(functions=list(funcs), gradients=list(grads))
    basis.validate(1)
    return basis


def gaussian_bump_basis_1d(centers: Sequence[float], width: float) -> BasisSet:
    """Gaussian bumps exp(-(x - c)^2 / (2 w^2)) for d = 1."""
    if width <= 0:
        raise ValueError("width must be positive")

    def make(c):
        def func(x):
            return np.exp(-((x[:, 0] - c) ** 2) / (2 * width**2))

        def grad(x):
            val = np.exp(-((x[:, 0] - c) ** 2) / (2 * width**2))
            return (-(x[:, 0] - c) / width**2 * val)[:, None]

        return func, grad

    funcs, grads = zip(*(make(c) for c in centers))
    basis = BasisSet(functions=list(funcs), gradients=list(grads))
    basis.validate(1)
    return basis


def constant_gain(particles: np.ndarray, h_values: np.ndarray) -> GainField:
    """Expected-gain approximation: empirical state/observation cross-covariance.

    K = (1/N) sum_i X^i (h(X^i) - h^{(N)})^T, arranged d x m.  For a linear
    observation h = Hx and Gaussian particles this converges to the Kalman
    gain Sigma H^T.
    """
    x = _as_particle_matrix(particles)
    h = _as_obs_matrix(h_values)
    n = x.shape[0]
    if n < 2:
        raise ValueError("constant gain requires at least 2 particles")
    centered = h - h.mean(axis=0)
    gain = x.T @ centered / n
    return GainField(values=gain, constant=True)


# Relative ridge applied to the Galerkin normal matrix only when it is
# numerically singular; a well-conditioned system is solved exactly.
GALERKIN_RIDGE_REL = 1e-8
_COND_LIMIT = 1e12


def _solve_gram(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A kappa = b, adding a relative ridge only if A is ill-conditioned."""
    M = A.shape[0]
    cond = np.linalg.cond(A)
    if np.isfinite(cond) and cond < _COND_LIMIT:
        return np.linalg.solve(A, b)
    ridge = GALERKIN_RIDGE_REL * np.trace(A) / M
    if ridge <= 0:
        raise GainSolveError(
            "Galerkin system is singular even after ridge "
            "(all basis gradients vanish on the ensemble)"
        )
    return np.linalg.solve(A + ridge * np.eye(M), b)


def galerkin_gain(particles: np.ndarray, h_values: np.ndarray, basis: BasisSet) -> GainField:
    """Weak-form gain approximation on the span of the basis.

    Assembles b_k = (1/N) sum_i (h(X^i) - h^{(N)}) psi_k(X^i) and the Gram
    matrix A_kl = (1/N) sum_i grad psi_l . grad psi_k, solves A kappa = b per
    observation component, and evaluates K^i = sum_l kappa_l grad psi_l(X^i).
    """
    x = _as_particle_matrix(particles)
    h = _as_obs_matrix(h_values)
    n, d = x.shape
    if n < 2:
        raise ValueError("galerkin gain requires at least 2 particles")

    psi = basis.evaluate(x)                  # (N, M)
    grads = basis.evaluate_gradients(x)      # (N, M, d)
    A = np.einsum("nkd,nld->kl", grads, grads) / n
    centered = h - h.mean(axis=0)            # (N, m)
    b = psi.T @ centered / n                 # (M, m)
    kappa = _solve_gram(A, b)                # (M, m)
    values = np.einsum("nmd,mj->ndj", grads, kappa)
    return GainField(values=values, constant=False)


def variational_gain_linear(particles: np.ndarray, h_values: np.ndarray,
                            basis: BasisSet) -> GainField:
    """Empirical-risk minimizer over linear combinations of the basis.

    Minimizes J(f) = (1/N) sum_i [ |grad f(X^i)|^2 / 2 - f(X^i)(h_i - hbar) ]
    for f = sum_l theta_l psi_l by solving the normal equations.  With a
    linear parameterization the minimizer coincides with the Galerkin
    solution; this entry point keeps the optimization route explicit.
    """
    x = _as_particle_matrix(particles)
    h = _as_obs_matrix(h_values)
    n, d = x.shape
    if n < 2:
        raise ValueError("variational gain requires at least 2 particles")
    grads = basis.evaluate_gradients(x)      # (N, M, d)
    m_basis = len(basis)
    design = grads.reshape(n, m_basis, d)
    # Normal matrix assembled from the stacked gradient design matrix.
    G = np.transpose(design, (1, 0, 2)).reshape(m_basis, n * d)
    A = G @ G.T / n
    psi = basis.evaluate(x)
    centered = h - h.mean(axis=0)
    b = psi.T @ centered / n
    theta = _solve_gram(A, b)
    values = np.einsum("nmd,mj->ndj", grads, theta)
    return GainField(values=values, constant=False)


def empirical_objective(particles: np.ndarray, h_values: np.ndarray,
                        basis: BasisSet, theta: np.ndarray) -> np.ndarray:
    """Empirical variational objective J^(N)(f_theta), one value per obs component."""
    x = _as_particle_matrix(particles)
    h = _as_obs_matrix(h_values)
    n = x.shape[0]
    grads = basis.evaluate_gradients(x)
    psi = basis.evaluate(x)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    grad_f = np.einsum("nmd,mj->ndj", grads, theta)
    f_val = psi @ theta
    centered = h - h.mean(axis=0)
    quad = 0.5 * np.einsum("ndj,ndj->j", grad_f, grad_f) / n
    lin = np.einsum("nj,nj->j", f_val, centered) / n
    return quad - lin


@dataclass(frozen=True)
class DiffusionMapState:
    """Kernel matrices and fixed-point solution of the diffusion-map solve."""

    eps: float
    sweeps: int | None                # sweeps performed; None for a direct solve
    phi: np.ndarray                   # (N, m) fixed-point values
    kernel: np.ndarray                # g_ij Gaussian kernel
    sym_kernel: np.ndarray            # k_ij symmetric normalization
    transition: np.ndarray            # T_ij row-stochastic Markov matrix
    stationary: np.ndarray            # pi_i stationary weights


def auto_bandwidth(particles: np.ndarray) -> float:
    """Rule-of-thumb kernel bandwidth: median pairwise sq. distance / (4 log N)."""
    x = _as_particle_matrix(particles)
    n = x.shape[0]
    d2 = _pairwise_sq_dists(x)
    med = float(np.median(d2[np.triu_indices(n, k=1)]))
    if med <= 0:
        return 1.0
    return med / (4.0 * max(np.log(n), 1.0))


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


MAX_SWEEPS = 10_000
SWEEP_TOL = 1e-9


def diffusion_map_gain(
    particles: np.ndarray,
    h_values: np.ndarray,
    eps: float | str,
    num_sweeps: int | None = None,
    phi_prev: np.ndarray | None = None,
) -> tuple[GainField, DiffusionMapState]:
    """Diffusion-map gain approximation.

    Builds the Gaussian kernel g_ij = exp(-|X^i - X^j|^2 / (4 eps)), its
    symmetric normalization k_ij, the row-stochastic Markov matrix T and its
    stationary weights pi, then solves the fixed-point equation

        Phi = T Phi + eps (h - hbar),      hbar = sum_i pi_i h(X^i),

    warm-started from ``phi_prev``.  With ``num_sweeps`` given, exactly that
    many fixed-point sweeps are executed; with ``num_sweeps=None`` the
    fixed point is computed directly (a rank-one-pinned linear solve that
    equals the limit of the sweeps, which converge since T is a strict
    contraction on the mean-zero subspace).  Gains are read off as

        K^i = sum_j s_ij X^j,  s_ij = T_ij (r_j - sum_k T_ik r_k) / (2 eps),

    with r = Phi + eps h.  Vector observations share the kernel and solve
    one fixed-point problem per component.
    """
    x = _as_particle_matrix(particles)
    h = _as_obs_matrix(h_values)
    n, d = x.shape
    m = h.shape[1]
    if n < 2:
        raise ValueError("diffusion map gain requires at least 2 particles")
    if isinstance(eps, str):
        if eps != "auto":
            raise ValueError(f"unknown bandwidth spec {eps!r}")
        eps = auto_bandwidth(x)
    eps = float(eps)
    if eps <= 0:
        raise GainSolveError("kernel bandwidth eps must be positive")

    d2 = _pairwise_sq_dists(x)
    g = np.exp(-d2 / (4.0 * eps))
    row = g.sum(axis=1)
    # Diagonal entries are exp(0) = 1, so row sums cannot vanish; but if all
    # off-diagonal mass underflows the map degenerates to the identity.
    if np.all(row - 1.0 < n * 1e-300):
        raise GainSolveError(
            "kernel has no off-diagonal mass: particles too spread for "
            f"eps={eps:.3e}; try eps around {auto_bandwidth(x):.3e}"
        )
    k = g / np.sqrt(np.outer(row, row))
    deg = k.sum(axis=1)
    T = k / deg[:, None]
    pi = deg / deg.sum()

    hbar = pi @ h                                  # (m,)
    rhs = eps * (h - hbar)                         # (N, m)
    phi = np.zeros((n, m)) if phi_prev is None else np.array(phi_prev, dtype=float).reshape(n, m)

    if num_sweeps is not None:
        if num_sweeps < 1:
            raise ValueError("num_sweeps must be >= 1")
        sweeps = int(num_sweeps)
        for _ in range(sweeps):
            phi = T @ phi + rhs
    else:
        # Direct fixed point: pin the pi-average (conserved by the sweep
        # iteration) and solve (I - T + 1 pi^T) Phi = rhs + 1 (pi^T Phi_prev).
        sweeps = None
        pinned = np.eye(n) - T + np.outer(np.ones(n), pi)
        phi = np.linalg.solve(pinned, rhs + np.outer(np.ones(n), pi @ phi))

    r = phi + eps * h                              # (N, m)
    Tr = T @ r                                     # (N, m)
    # K^i = (1/2eps) [ sum_j T_ij r_j X^j - (T r)_i sum_j T_ij X^j ]
    TrX = np.einsum("ij,jm,jd->idm", T, r, x)
    TX = T @ x                                     # (N, d)
    values = (TrX - np.einsum("im,id->idm", Tr, TX)) / (2.0 * eps)
    field = GainField(values=values, constant=False)
    state = DiffusionMapState(
        eps=eps, sweeps=sweeps, phi=phi, kernel=g, sym_kernel=k,
        transition=T, stationary=pi,
    )
    return field, state


def exact_gain_1d(
    density: Density1D,
    h: Callable[[np.ndarray], np.ndarray],
    x_points: np.ndarray,
    num_grid: int = 4001,
    max_refinements: int = 6,
    rel_tol: float = 1e-8,
) -> np.ndarray:
    """Exact scalar gain by the integral formula.

    K(x) = (1/rho(x)) * int_{-inf}^x (hbar - h(y)) rho(y) dy is the unique
    decaying solution of -(rho K)' = (h - hbar) rho.  Quadrature uses the
    trapezoid rule on a grid spanning 8 mixture standard deviations, refined
    until the values at ``x_points`` stabilize.
    """
    x_points = np.atleast_1d(np.asarray(x_points, dtype=float))
    prev = None
    for level in range(max_refinements):
        grid = density.support_grid(num_points=num_grid * 2**level - (2**level - 1))
        if x_points.min() < grid[0] or x_points.max() > grid[-1]:
            raise ValueError("query points fall outside the supported density grid")
        rho = density.pdf(grid)
        hg = np.asarray(h(grid), dtype=float)
        steps = np.diff(grid)
        trap = np.zeros_like(grid)
        trap[:-1] += 0.5 * steps
        trap[1:] += 0.5 * steps
        hbar = float((hg * rho) @ trap) / float(rho @ trap)
        increments = 0.5 * ((hbar - hg[1:]) * rho[1:] + (hbar - hg[:-1]) * rho[:-1]) * steps
        # Cumulate from the nearer edge on each half so that truncation and
        # round-off stay proportional to the local tail mass (a left-only
        # cumulation leaves an O(eps) residue that explodes after dividing
        # by the vanishing right-tail density).
        cum_left = np.concatenate([[0.0], np.cumsum(increments)])
        cum_right = np.concatenate([np.cumsum(increments[::-1])[::-1], [0.0]])
        mid = 0.5 * (grid[0] + grid[-1])
        cum = np.where(grid <= mid, cum_left, -cum_right)
        rho_at = density.pdf(x_points)
        if np.any(rho_at < 1e-300):
            raise ValueError("density underflows (< 1e-300) at a query point")
        vals = np.interp(x_points, grid, cum) / rho_at
        if prev is not None:
            scale = max(np.abs(vals).max(), 1.0)
            if np.abs(vals - prev).max() <= rel_tol * scale:
                return vals
        prev = vals
    return prev
