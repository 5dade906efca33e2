"""Server optimisers: FedAvg, FedAvgM and FedAdam.

Each optimiser consumes a *drive* vector. In baseline modes the drive is
the raw aggregate ``r_t`` and the optimiser runs its own first-moment
recursion. Momentum-approximation modes pass the already-approximated
momentum and set ``premomentum=True``, which bypasses that recursion.
FedAdam's second moment always sees the raw aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DivergedError, InvalidParameter

OptimizerKind = Literal["fedavg", "fedavgm", "fedadam"]


@dataclass
class ServerOptState:
    """Mutable optimiser state for one run.

    Attributes:
        kind: Optimiser family.
        beta: First-moment decay. Negative values are allowed for the
            baseline tuning grid.
        beta2: Second-moment decay (FedAdam only).
        eps: Adaptivity constant added to ``sqrt(v)``.
        first: First-moment buffer (None for fedavg).
        second: Second-moment diagonal (FedAdam only).
        steps: Number of steps taken.
    """

    kind: OptimizerKind
    beta: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-3
    first: np.ndarray | None = None
    second: np.ndarray | None = None
    steps: int = 0

    @classmethod
    def create(cls, kind: OptimizerKind, dim: int, beta: float = 0.9, beta2: float = 0.99, eps: float = 1e-3) -> "ServerOptState":
        if kind not in ("fedavg", "fedavgm", "fedadam"):
            raise InvalidParameter(f"unknown optimizer {kind!r}")
        if not -1.0 < beta < 1.0:
            raise InvalidParameter(f"beta must lie in (-1, 1), got {beta}")
        if not 0.0 <= beta2 < 1.0:
            raise InvalidParameter(f"beta2 must lie in [0, 1), got {beta2}")
        if eps <= 0:
            raise InvalidParameter(f"eps must be > 0, got {eps}")
        first = None if kind == "fedavg" else np.zeros(dim)
        second = np.zeros(dim) if kind == "fedadam" else None
        return cls(kind=kind, beta=beta, beta2=beta2, eps=eps, first=first, second=second)

    def preconditioner(self) -> np.ndarray | float:
        """Elementwise H; 1 for the non-adaptive optimisers."""
        if self.kind == "fedadam":
            return np.sqrt(self.second) + self.eps
        return 1.0


def server_step(
    state: ServerOptState,
    theta: np.ndarray,
    drive: np.ndarray,
    eta: float,
    *,
    raw: np.ndarray | None = None,
    premomentum: bool = False,
) -> np.ndarray:
    """One server update; returns the new model and mutates ``state``.

    Args:
        state: Optimiser state.
        theta: Current model.
        drive: Raw aggregate, or approximated momentum when ``premomentum``.
        eta: Server learning rate.
        raw: Raw aggregate for the FedAdam second moment. Defaults to
            ``drive``, which is only correct in baseline modes.
        premomentum: True when ``drive`` is already a momentum estimate.
    """
    if not np.all(np.isfinite(drive)):
        raise DivergedError("non-finite server drive", iteration=state.steps + 1)
    raw = drive if raw is None else raw
    if state.kind == "fedavg":
        step = drive
    elif premomentum:
        step = drive
    else:
        state.first = state.beta * state.first + (1.0 - state.beta) * drive
        step = state.first
    if state.kind == "fedadam":
        state.second = state.beta2 * state.second + (1.0 - state.beta2) * raw * raw
        step = step / (np.sqrt(state.second) + state.eps)
    state.steps += 1
    return theta - eta * step


def ema_update(ema: np.ndarray, theta: np.ndarray, decay: float) -> np.ndarray:
    """Exponential moving average of parameters."""
    if not 0.0 <= decay < 1.0:
        raise InvalidParameter(f"EMA decay must lie in [0, 1), got {decay}")
    return decay * ema + (1.0 - decay) * theta
