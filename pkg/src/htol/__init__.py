"""htol: heavy-tailed piecewise Ornstein-Uhlenbeck laboratory.

Simulates piecewise OU processes driven by Brownian, alpha-stable and
compound-Poisson noise, classifies their ergodic regime from model
parameters, verifies drift (Foster-Lyapunov) inequalities numerically,
and validates the many-server queue scaling limits they arise from.
"""

__version__ = "0.1.0"

from htol.levy_noise import (
    CompoundPoissonSpec,
    IsotropicStableSpec,
    LevySpec,
    StableAxisSpec,
    ThetaCInterval,
    effective_drift,
    stable_kernel_constant,
    theta_c,
)
from htol.matrix_core import (
    LyapunovCertificate,
    check_q,
    find_q,
    solve_lyapunov,
    validate_m_matrix,
)
from htol.sde_engine import (
    PathConfig,
    PathEnsemble,
    PiecewiseOUModel,
    drift,
    simulate_ensemble,
    simulate_path,
    stationary_sample,
)

__all__ = [
    "CompoundPoissonSpec",
    "IsotropicStableSpec",
    "LevySpec",
    "LyapunovCertificate",
    "PathConfig",
    "PathEnsemble",
    "PiecewiseOUModel",
    "StableAxisSpec",
    "ThetaCInterval",
    "check_q",
    "drift",
    "effective_drift",
    "find_q",
    "simulate_ensemble",
    "simulate_path",
    "solve_lyapunov",
    "stable_kernel_constant",
    "stationary_sample",
    "theta_c",
]
