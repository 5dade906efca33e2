"""Buffered asynchronous federated learning with momentum approximation."""

__version__ = "0.1.0"

from .config import DelayConfig, ExperimentSpec, SimConfig, TaskConfig, reference_config
from .engine import RunResult, run, simulate_staleness
from .momentum import (
    LightweightState,
    MaDiagnostics,
    MomentumMatrix,
    WeightVector,
    build_momentum_matrix,
    compute_diagnostics,
    lightweight_step,
    solve_lightweight,
    solve_ma_weights,
)
from .privacy import DpConfig
from .staleness import DelayDistribution, StalenessMatrix, VersionOneHot

__all__ = [
    "__version__",
    "DelayConfig",
    "DelayDistribution",
    "DpConfig",
    "ExperimentSpec",
    "LightweightState",
    "MaDiagnostics",
    "MomentumMatrix",
    "RunResult",
    "SimConfig",
    "StalenessMatrix",
    "TaskConfig",
    "VersionOneHot",
    "WeightVector",
    "build_momentum_matrix",
    "compute_diagnostics",
    "lightweight_step",
    "reference_config",
    "run",
    "simulate_staleness",
    "solve_lightweight",
    "solve_ma_weights",
]
