"""Seeded randomness and symmetric-matrix primitives shared by all modules.

Conventions enforced here and relied on everywhere else:

* every random draw flows through an :class:`RngStream`, so a pipeline is a
  pure function of its seed;
* empirical reductions are done in particle-index order (no pairwise /
  threaded summation), which makes single-threaded runs bit-reproducible;
* near-PSD matrices with round-off eigenvalues in ``[-1e-10 * trace, 0)``
  are repaired by clipping, anything more negative is an error.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NotPositiveDefiniteError

# Eigenvalues of a nominally PSD matrix may dip below zero by round-off.
# Relative clip threshold for the repair policy:
PSD_CLIP_REL = 1e-10

SYMMETRY_RTOL = 1e-12


class RngStream:
    """Counter-based random stream with derivable sub-streams.

    Wraps ``numpy.random.Generator`` (PCG64) seeded through a
    ``SeedSequence``.  The same ``seed`` always yields the same sample
    sequence.  ``substream(i)`` derives an independent stream; nested
    derivation is supported and the full derivation path identifies the
    stream, so per-particle / per-replicate streams do not collide.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        self.seed = int(seed)
        self._path = tuple(int(p) for p in _path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._path))
        )

    def substream(self, index: int) -> "RngStream":
        """Independent stream derived from this one by integer index."""
        return RngStream(self.seed, self._path + (int(index),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __getattr__(self, name):
        # Delegate sampling methods (standard_normal, random, integers, ...).
        return getattr(self._gen, name)

    def __repr__(self):  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self._path})"


def symmetrize(mat: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Validate symmetry of ``mat`` and return (mat + mat.T) / 2.

    Raises ``ValueError`` if the relative asymmetry exceeds ``rtol``.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    scale = max(np.abs(mat).max(), 1.0)
    asym = np.abs(mat - mat.T).max()
    if asym > rtol * scale:
        raise ValueError(
            f"matrix is not symmetric: max asymmetry {asym:.3e} "
            f"exceeds {rtol:.1e} * {scale:.3e}"
        )
    return 0.5 * (mat + mat.T)


def is_positive_definite(mat: np.ndarray) -> bool:
    """Cholesky-based SPD check (symmetry is assumed)."""
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


def _clipped_eigh(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric PSD matrix, applying the clip policy.

    Eigenvalues in ``[-PSD_CLIP_REL * trace, 0)`` are set to 0; smaller ones
    raise :class:`NotPositiveDefiniteError`.
    """
    eigval, eigvec = np.linalg.eigh(mat)
    tol = PSD_CLIP_REL * max(np.trace(mat), 0.0)
    if eigval.min() < -tol:
        raise NotPositiveDefiniteError(
            f"eigenvalue {eigval.min():.6e} below -{PSD_CLIP_REL:.0e} * trace "
            f"(= {-tol:.6e})"
        )
    return np.clip(eigval, 0.0, None), eigvec


def sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Unique symmetric PSD square root R of a symmetric PSD matrix, R @ R = mat."""
    mat = symmetrize(mat)
    eigval, eigvec = _clipped_eigh(mat)
    root = (eigvec * np.sqrt(eigval)) @ eigvec.T
    return 0.5 * (root + root.T)


def psd_factor(mat: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.T = mat for sampling.

    Uses Cholesky when ``mat`` is PD, otherwise the eigenvalue-clipped
    factor (handles semidefinite covariances such as exact zeros).
    """
    mat = symmetrize(mat)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        eigval, eigvec = _clipped_eigh(mat)
        return eigvec * np.sqrt(eigval)


def sample_gaussian(
    rng: RngStream,
    mean: np.ndarray,
    cov: np.ndarray,
    size: int | None = None,
) -> np.ndarray:
    """Draw from N(mean, cov).

    Returns shape ``(d,)`` for ``size=None``, else ``(size, d)``.  ``cov``
    must be symmetric PSD; degenerate directions produce exactly the mean
    component (zero covariance gives back ``mean``).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ValueError(
            f"dimension mismatch: mean has length {d}, cov has shape {cov.shape}"
        )
    factor = psd_factor(cov)
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, factor.shape[1]))
    out = mean + z @ factor.T
    return out[0] if size is None else out
