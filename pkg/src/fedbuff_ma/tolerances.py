"""Numerical tolerance constants used across the package.

Every threshold that decides rank, equality or convergence lives here so
that tests and diagnostics agree on one convention.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    """Central record of numerical thresholds.

    Attributes:
        svd_rtol: Relative rank threshold. A singular value counts toward the
            rank when it exceeds ``svd_rtol * s_max * max(rows, cols)``.
        svd_max_dim: Largest matrix dimension accepted by :func:`svd`.
        full_rank_residual: Residual bound asserted when W is full rank.
        light_consistency: Relative tolerance between the light-weight buffer
            and the explicit product of history and coefficients.
        payload_slack: Relative slack on the DP sensitivity certificate.
        dp_noise_floor: Smallest admissible noise multiplier.
        triangular_rcond: Reciprocal 1-norm condition estimate above which a
            lower-triangular system with nonzero diagonal is solved by
            substitution instead of the SVD. At this level no singular value
            comes near the rank cutoff for any dimension up to a few
            thousand, so both routes give the same (unique) solution.
    """

    svd_rtol: float = 1e-10
    svd_max_dim: int = 8192
    full_rank_residual: float = 1e-8
    light_consistency: float = 1e-8
    payload_slack: float = 1e-12
    dp_noise_floor: float = 1e-12
    triangular_rcond: float = 1e-3


TOL = Tolerances()
