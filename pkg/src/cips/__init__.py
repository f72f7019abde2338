"""Controlled interacting particle systems for optimal filtering and LQ control.

Subpackages cover the exact finite-dimensional references (Kalman-Bucy,
Riccati), the feedback-particle and ensemble-Kalman filter families, gain
function approximation from particles, importance-sampling baselines, static
Gaussian transport maps, the backward dual ensemble solver for LQ problems,
and a benchmark CLI that emits reproducible CSV tables.
"""

__version__ = "0.1.0"

from . import core, models, kalman, gain, fpf, sir, linear_ensemble
from . import static_transport, dual_enkf, bench

__all__ = [
    "core",
    "models",
    "kalman",
    "gain",
    "fpf",
    "sir",
    "linear_ensemble",
    "static_transport",
    "dual_enkf",
    "bench",
    "__version__",
]
