"""Client-level differential privacy for updates and version one-hots.

Each client uploads its clipped update concatenated with a scaled version
one-hot ``gamma * e_s``. The concatenation has L2 norm at most
``S = sqrt(S_delta**2 + gamma**2)``, so one Gaussian mechanism with std
``sigma * S`` covers both parts. ``gamma`` is chosen so the effective
noise multiplier on the one-hot part is a target ``xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation, InvalidParameter, SensitivityViolation
from .tolerances import TOL


def clip(delta: np.ndarray, bound: float) -> np.ndarray:
    """Scale ``delta`` down to norm ``bound`` if it is longer."""
    if bound <= 0:
        raise InvalidParameter(f"clip bound must be > 0, got {bound}")
    norm = float(np.linalg.norm(delta))
    if norm <= bound:
        return np.array(delta, dtype=np.float64, copy=True)
    return np.asarray(delta, dtype=np.float64) * (bound / norm)


def calibrate_gamma(sigma: float, xi: float, clip_bound: float) -> tuple[float, float]:
    """One-hot scale ``gamma`` and total sensitivity ``S`` for a target ``xi``.

    ``gamma = sigma / sqrt(xi**2 - sigma**2) * S_delta`` makes the noise on
    the one-hot part, relative to its magnitude, equal ``xi``:
    ``sigma * S / gamma = xi``.
    """
    if sigma <= 0 or clip_bound <= 0:
        raise InvalidParameter("sigma and clip bound must be > 0")
    if not xi > sigma:
        raise InvalidParameter(f"one-hot noise xi={xi} must exceed sigma={sigma}")
    gamma = sigma / math.sqrt(xi * xi - sigma * sigma) * clip_bound
    total = math.sqrt(clip_bound * clip_bound + gamma * gamma)
    if not math.isclose(sigma * total / gamma, xi, rel_tol=1e-10):
        raise InvalidParameter("calibration failed to reproduce xi")
    return gamma, total


def gamma_for_sensitivity_ratio(clip_bound: float, ratio: float) -> float:
    """``gamma`` such that ``S = ratio * S_delta``; ``ratio`` must exceed 1."""
    if ratio <= 1:
        raise InvalidParameter(f"sensitivity ratio must be > 1, got {ratio}")
    return clip_bound * math.sqrt(ratio * ratio - 1.0)


def xi_for_sensitivity_ratio(sigma: float, ratio: float) -> float:
    """Target one-hot noise ``xi`` that yields ``S = ratio * S_delta``."""
    return sigma * ratio / math.sqrt(ratio * ratio - 1.0)


class DpConfig(BaseModel):
    """Client-level DP settings.

    ``gamma`` and ``sensitivity`` are derived and echoed into run summaries.
    ``project_simplex`` projects noised W rows onto the probability simplex;
    it exists for ablations only.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    clip_bound: float = Field(gt=0)
    noise_multiplier: float = Field(ge=TOL.dp_noise_floor)
    one_hot_noise: float = Field(gt=0)
    project_simplex: bool = False

    @model_validator(mode="after")
    def _check_xi(self) -> "DpConfig":
        if not self.one_hot_noise > self.noise_multiplier:
            raise ValueError(f"one_hot_noise ({self.one_hot_noise}) must exceed noise_multiplier ({self.noise_multiplier})")
        return self

    @property
    def gamma(self) -> float:
        return calibrate_gamma(self.noise_multiplier, self.one_hot_noise, self.clip_bound)[0]

    @property
    def sensitivity(self) -> float:
        return calibrate_gamma(self.noise_multiplier, self.one_hot_noise, self.clip_bound)[1]

    @classmethod
    def from_sensitivity_ratio(cls, clip_bound: float, noise_multiplier: float, ratio: float = 1.1) -> "DpConfig":
        """Config whose total sensitivity is ``ratio * clip_bound``."""
        return cls(
            clip_bound=clip_bound,
            noise_multiplier=noise_multiplier,
            one_hot_noise=xi_for_sensitivity_ratio(noise_multiplier, ratio),
        )


@dataclass(frozen=True)
class PrivatePayload:
    """Clipped update plus scaled version one-hot, with its norm certificate.

    The one-hot part is kept implicit (version and gamma) and expanded on
    demand; its norm is exactly ``gamma``.
    """

    delta: np.ndarray
    version: int
    horizon: int
    gamma: float
    bound: float

    def __post_init__(self) -> None:
        if not 1 <= self.version <= self.horizon:
            raise ContractViolation(f"version {self.version} outside [1, {self.horizon}]")
        norm = math.sqrt(float(self.delta @ self.delta) + self.gamma * self.gamma)
        if norm > self.bound * (1.0 + TOL.payload_slack):
            raise SensitivityViolation(f"payload norm {norm!r} exceeds certified bound {self.bound!r}")

    def one_hot_part(self) -> np.ndarray:
        e = np.zeros(self.horizon)
        e[self.version - 1] = self.gamma
        return e

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.delta, self.one_hot_part()])


def make_payload(delta: np.ndarray, version: int, horizon: int, dp: DpConfig) -> PrivatePayload:
    gamma, total = calibrate_gamma(dp.noise_multiplier, dp.one_hot_noise, dp.clip_bound)
    return PrivatePayload(clip(delta, dp.clip_bound), version, horizon, gamma, total)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` (sort-based)."""
    n = v.shape[0]
    if n == 0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    k = ind[cond][-1]
    return np.maximum(v - css[k - 1] / k, 0.0)


def privatize_round(
    payloads: list[PrivatePayload],
    cohort: int,
    dp: DpConfig,
    rng: np.random.Generator,
    t: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Noised aggregate ``r_t`` and noised W row from exactly C payloads.

    Gaussian noise with std ``sigma * S`` is added to each sum before the
    ``1/C`` (update) and ``1/(C gamma)`` (one-hot) scaling. The W row is
    returned as is, negatives included, unless ``dp.project_simplex`` is set,
    in which case its first ``t`` entries are projected onto the simplex.
    """
    if len(payloads) != cohort:
        raise ContractViolation(f"expected {cohort} payloads, got {len(payloads)}")
    first = payloads[0]
    d, horizon = first.delta.shape[0], first.horizon
    gamma, total = first.gamma, first.bound
    delta_sum = np.zeros(d)
    onehot_sum = np.zeros(horizon)
    for pl in payloads:
        norm = math.sqrt(float(pl.delta @ pl.delta) + pl.gamma * pl.gamma)
        if norm > total * (1.0 + TOL.payload_slack) or pl.bound != total:
            raise SensitivityViolation(f"payload norm {norm!r} exceeds certified bound {total!r}")
        delta_sum += pl.delta
        onehot_sum[pl.version - 1] += pl.gamma
    std = dp.noise_multiplier * total
    r_t = (delta_sum + rng.normal(0.0, std, size=d)) / cohort
    w_row = (onehot_sum + rng.normal(0.0, std, size=horizon)) / (cohort * gamma)
    if dp.project_simplex and t is not None:
        w_row[:t] = project_to_simplex(w_row[:t])
    return r_t, w_row
