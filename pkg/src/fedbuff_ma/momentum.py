"""Momentum weights, momentum approximation solvers and their diagnostics.

A momentum optimiser applied to a sequence of aggregated updates
``r_1..r_T`` (the columns of R) takes the step ``R M^T 1`` in total, where
``M[t, s] = beta**(t - s) * (1 - beta)``. Under buffered asynchrony the
received updates mix stale versions through W, so plain momentum applies
``M W`` instead of ``M``. Momentum approximation picks coefficients
``a_t`` so that ``a_t^T W`` matches row t of M as closely as possible and
steps along ``R a_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidParameter
from .linalg import (
    LowerTriangular,
    as_matrix,
    as_vector,
    frobenius_sq,
    least_squares_min_norm,
    lower_triangular_min_norm,
    numerical_rank,
    singular_values,
    svd,
)
from .staleness import StalenessMatrix


class MomentumMatrix:
    """Lower-triangular matrix of momentum weights ``beta**(t-s) * (1-beta)``."""

    def __init__(self, beta: float, horizon: int) -> None:
        if not 0.0 <= beta < 1.0:
            raise InvalidParameter(f"momentum beta must lie in [0, 1), got {beta}")
        if horizon < 1:
            raise InvalidParameter(f"horizon must be >= 1, got {horizon}")
        self.beta = float(beta)
        lag = np.subtract.outer(np.arange(horizon), np.arange(horizon))
        dense = np.where(lag >= 0, self.beta ** np.maximum(lag, 0) * (1.0 - self.beta), 0.0)
        self.matrix = LowerTriangular.from_dense(dense)
        self._dense = self.matrix.to_dense()
        self._dense.flags.writeable = False

    @property
    def horizon(self) -> int:
        return self.matrix.dim

    def row(self, t: int) -> np.ndarray:
        """Row ``t`` (1-based), full length."""
        return self.matrix.row(t)

    def prefix(self, t: int) -> np.ndarray:
        return self._dense[:t, :t]

    def dense(self) -> np.ndarray:
        return self._dense.copy()


def build_momentum_matrix(beta: float, horizon: int) -> MomentumMatrix:
    return MomentumMatrix(beta, horizon)


def _dense(m) -> np.ndarray:
    """Accept StalenessMatrix, MomentumMatrix, LowerTriangular or arrays."""
    if isinstance(m, (StalenessMatrix, MomentumMatrix)):
        return m.dense()
    if isinstance(m, LowerTriangular):
        return m.to_dense()
    return as_matrix(m)


def _prefix(m, t: int) -> np.ndarray:
    if isinstance(m, (StalenessMatrix, MomentumMatrix)):
        if t > m.horizon:
            raise InvalidParameter(f"t={t} exceeds horizon {m.horizon}")
        return m.prefix(t)
    arr = _dense(m)
    if t > arr.shape[0]:
        raise InvalidParameter(f"t={t} exceeds horizon {arr.shape[0]}")
    return arr[:t, :t]


@dataclass
class WeightVector:
    """Momentum approximation coefficients for iteration ``t``.

    ``coef`` has length ``horizon`` and is zero after position ``t``.
    """

    horizon: int
    t: int
    coef: np.ndarray

    def __post_init__(self) -> None:
        self.coef = as_vector(self.coef, "coefficients")
        if self.coef.shape[0] != self.horizon:
            raise ContractViolation(f"expected {self.horizon} coefficients, got {self.coef.shape[0]}")
        if not 0 <= self.t <= self.horizon:
            raise ContractViolation(f"active length {self.t} outside [0, {self.horizon}]")
        if np.any(self.coef[self.t :] != 0.0):
            raise ContractViolation("coefficients beyond the active length must be zero")

    @classmethod
    def zeros(cls, horizon: int) -> "WeightVector":
        return cls(horizon, 0, np.zeros(horizon))

    @property
    def active(self) -> np.ndarray:
        return self.coef[: self.t]


def unrolled_momentum_update(theta1, r_hist, m, eta: float) -> np.ndarray:
    """Final model ``theta_1 - eta * R M^T 1`` of a momentum run.

    Args:
        theta1: Initial model, length d.
        r_hist: History R of shape ``(d, T)``; column t is ``r_t``.
        m: Momentum matrix of dimension T.
        eta: Server learning rate.
    """
    theta1 = as_vector(theta1, "theta1")
    r_hist = as_matrix(r_hist, "R")
    md = _dense(m)
    if r_hist.shape[0] != theta1.shape[0] or r_hist.shape[1] != md.shape[0]:
        raise ContractViolation(f"R {r_hist.shape} does not match theta ({theta1.shape[0]}) and M {md.shape}")
    return theta1 - eta * (r_hist @ md.sum(axis=0))


def ma_residual(coef, w, m, t: int) -> float:
    """Squared residual ``||a[:t]^T W[:t,:t] - M[t,:t]||^2``."""
    a = as_vector(coef, "coefficients")[:t]
    diff = a @ _prefix(w, t) - _prefix(m, t)[t - 1]
    return float(diff @ diff)


def solve_ma_weights(w, m, t: int) -> WeightVector:
    """Minimum-norm coefficients matching row ``t`` of M through W.

    Solves ``min_a ||a^T W[:t,:t] - M[t,:t]||`` with ``a[s] = 0`` for
    ``s > t`` using the SVD pseudoinverse, so a rank-deficient W yields the
    smallest-norm minimiser. Well-conditioned full-rank blocks are solved by
    substitution, which gives the same unique solution faster.
    """
    horizon = _horizon(w)
    if not 1 <= t <= horizon:
        raise InvalidParameter(f"t={t} outside [1, {horizon}]")
    wp = _prefix(w, t)
    target = _prefix(m, t)[t - 1]
    coef = np.zeros(horizon)
    coef[:t] = lower_triangular_min_norm(wp, target)
    return WeightVector(horizon, t, coef)


def _horizon(m) -> int:
    if isinstance(m, (StalenessMatrix, MomentumMatrix)):
        return m.horizon
    if isinstance(m, LowerTriangular):
        return m.dim
    return np.asarray(m).shape[0]


def solve_lightweight(prev: WeightVector, w, m, t: int, prev_product=None) -> tuple[float, float]:
    """Best ``(u, v)`` for the recursive coefficients ``u e_t + v a_prev``.

    Minimises ``||(u e_t + v a_prev)^T W[:t,:t] - M[t,:t]||`` over two
    scalars; ties go to the minimum ``u**2 + v**2``.

    Args:
        prev: Coefficients from iteration ``t - 1`` (all zero when t = 1).
        w: Staleness matrix with rows ``1..t`` filled.
        m: Momentum matrix.
        t: Current iteration (1-based).
        prev_product: Optional cached ``a_prev^T W`` (length >= t). Supplying
            it avoids an O(t^2) product per step.
    """
    if not 1 <= t <= _horizon(w):
        raise InvalidParameter(f"t={t} outside [1, {_horizon(w)}]")
    if prev.t > t - 1:
        raise ContractViolation(f"previous coefficients are active up to {prev.t}, expected <= {t - 1}")
    wp = _prefix(w, t)
    if prev_product is None:
        q = prev.coef[:t] @ wp
    else:
        q = as_vector(prev_product, "previous product")[:t]
    system = np.vstack([wp[t - 1], q])
    u, v = least_squares_min_norm(system, _prefix(m, t)[t - 1])
    return float(u), float(v)


def ma_momentum(r_hist, a: WeightVector) -> np.ndarray:
    """Approximated momentum ``R a`` using the first ``a.t`` columns of R."""
    r_hist = np.asarray(r_hist, dtype=np.float64)
    if r_hist.ndim != 2 or r_hist.shape[1] < a.t:
        raise ContractViolation(f"history of shape {r_hist.shape} has fewer than {a.t} columns")
    return r_hist[:, : a.t] @ a.active


@dataclass
class LightweightState:
    """State of light-weight momentum approximation.

    Attributes:
        coef: Recursive coefficients over past aggregates (length T).
        buffer: Single momentum buffer ``R coef`` (length d).
        u: Last coefficient on the newest aggregate.
        v: Last coefficient on the previous buffer.
        product: ``coef^T W`` tracked alongside, so the next solve needs no
            matrix product.
        t: Number of steps taken.
    """

    coef: WeightVector
    buffer: np.ndarray
    u: float = 0.0
    v: float = 0.0
    product: np.ndarray = field(default=None)  # type: ignore[assignment]
    t: int = 0

    @classmethod
    def initial(cls, horizon: int, dim: int) -> "LightweightState":
        return cls(WeightVector.zeros(horizon), np.zeros(dim), product=np.zeros(horizon))


def lightweight_step(state: LightweightState, r_t, u: float, v: float, w_row=None) -> LightweightState:
    """Advance the light-weight recursion by one iteration.

    ``coef <- u e_t + v coef`` and ``buffer <- u r_t + v buffer``. When the
    new W row is supplied the tracked product is updated too.
    """
    r_t = as_vector(r_t, "r_t")
    if r_t.shape != state.buffer.shape:
        raise ContractViolation(f"r_t has length {r_t.shape[0]}, buffer has {state.buffer.shape[0]}")
    t = state.t + 1
    horizon = state.coef.horizon
    if t > horizon:
        raise InvalidParameter(f"step {t} exceeds horizon {horizon}")
    coef = v * state.coef.coef
    coef[t - 1] += u
    product = None
    if w_row is not None and state.product is not None:
        product = u * as_vector(w_row, "W row") + v * state.product
    return LightweightState(
        coef=WeightVector(horizon, t, coef),
        buffer=u * r_t + v * state.buffer,
        u=float(u),
        v=float(v),
        product=product,
        t=t,
    )


@dataclass(frozen=True)
class BiasReport:
    """Implicit momentum bias ``MW - M`` and approximation bias ``AW - M``."""

    implicit: np.ndarray
    implicit_frob: float
    approx: np.ndarray | None
    approx_frob: float | None


def bias_decomposition(w, m, a=None) -> BiasReport:
    """Both bias matrices and their Frobenius norms.

    ``a`` is the coefficient matrix A whose row t holds ``a_t``.
    """
    wd, md = _dense(w), _dense(m)
    if wd.shape != md.shape:
        raise ContractViolation(f"W {wd.shape} and M {md.shape} differ in shape")
    implicit = md @ wd - md
    approx = None
    if a is not None:
        ad = _dense(a)
        if ad.shape != md.shape:
            raise ContractViolation(f"A {ad.shape} and M {md.shape} differ in shape")
        approx = ad @ wd - md
    return BiasReport(
        implicit=implicit,
        implicit_frob=math.sqrt(frobenius_sq(implicit)),
        approx=approx,
        approx_frob=None if approx is None else math.sqrt(frobenius_sq(approx)),
    )


@dataclass
class MaDiagnostics:
    """Per-iteration diagnostic series (index i holds iteration i + 1).

    Attributes:
        residual: Relative LS error ``||a_t^T W - M_t||^2 / ||M_t||^2``.
        cumulative: ``||A W - M||_F^2 / ||M||_F^2`` over the leading block.
        nullity: ``t - rank(W[:t,:t])``.
        one_minus_alpha: Share of ``M_t`` outside the row space of W.
        a_frob_sq: ``||A[:t,:t]||_F^2``.
        log_ratio: ``log ||A[:t,:t]||_F^2 / log(C t^2)``; NaN where undefined.
        light_residual: Relative LS error of light-weight coefficients, if given.
        light_cumulative: Cumulative relative error of the light-weight A.
    """

    residual: np.ndarray
    cumulative: np.ndarray
    nullity: np.ndarray
    one_minus_alpha: np.ndarray
    a_frob_sq: np.ndarray
    log_ratio: np.ndarray
    light_residual: np.ndarray | None = None
    light_cumulative: np.ndarray | None = None

    @property
    def final_cumulative(self) -> float:
        return float(self.cumulative[-1])

    def records(self) -> list[dict]:
        """One JSON-ready record per iteration."""
        out = []
        for i in range(len(self.residual)):
            rec = {
                "t": i + 1,
                "residual": float(self.residual[i]),
                "cumulative": float(self.cumulative[i]),
                "nullity": int(self.nullity[i]),
                "one_minus_alpha": float(self.one_minus_alpha[i]),
                "a_frob_sq": float(self.a_frob_sq[i]),
                "log_ratio": None if not np.isfinite(self.log_ratio[i]) else float(self.log_ratio[i]),
            }
            if self.light_residual is not None:
                rec["light_residual"] = float(self.light_residual[i])
                rec["light_cumulative"] = float(self.light_cumulative[i])
            out.append(rec)
        return out


def _row_errors(a: np.ndarray, w: np.ndarray, m: np.ndarray) -> np.ndarray:
    diff = a @ w - m
    return np.sum(diff * diff, axis=1)


def compute_diagnostics(w, m, a, cohort: int, a_light=None, with_projection: bool = True) -> MaDiagnostics:
    """All diagnostic series for a (prefix of a) run.

    Args:
        w: Staleness matrix (T x T).
        m: Momentum matrix (T x T).
        a: Full MA coefficient matrix, row t holding ``a_t``.
        cohort: Buffer size C, used in the ``log(C t^2)`` normaliser.
        a_light: Optional light-weight coefficient matrix.
        with_projection: Compute nullity and ``1 - alpha_t`` from an SVD of
            every leading block. This is O(T^4) overall; switch off when only
            the error series are needed.
    """
    wd, md, ad = _dense(w), _dense(m), _dense(a)
    n = wd.shape[0]
    if md.shape != (n, n) or ad.shape != (n, n):
        raise ContractViolation(f"W {wd.shape}, M {md.shape} and A {ad.shape} must share one square shape")
    m_row_sq = np.sum(md * md, axis=1)
    row_err = _row_errors(ad, wd, md)
    residual = row_err / m_row_sq
    cumulative = np.cumsum(row_err) / np.cumsum(m_row_sq)
    a_frob = np.cumsum(np.sum(ad * ad, axis=1))
    t_idx = np.arange(1, n + 1)
    denom = np.log(cohort * t_idx.astype(np.float64) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(denom > 0, np.log(a_frob) / np.where(denom > 0, denom, 1.0), np.nan)
    nullity = np.zeros(n, dtype=np.int64)
    one_minus_alpha = np.full(n, np.nan)
    if with_projection:
        for t in range(1, n + 1):
            fac = svd(wd[:t, :t])
            target = md[t - 1, :t]
            proj = target @ fac.row_space_basis
            alpha = float(proj @ proj) / m_row_sq[t - 1]
            nullity[t - 1] = t - fac.rank
            one_minus_alpha[t - 1] = min(1.0, max(0.0, 1.0 - alpha))
    light_residual = light_cumulative = None
    if a_light is not None:
        ld = _dense(a_light)
        light_err = _row_errors(ld, wd, md)
        light_residual = light_err / m_row_sq
        light_cumulative = np.cumsum(light_err) / np.cumsum(m_row_sq)
    return MaDiagnostics(
        residual=residual,
        cumulative=cumulative,
        nullity=nullity,
        one_minus_alpha=one_minus_alpha,
        a_frob_sq=a_frob,
        log_ratio=log_ratio,
        light_residual=light_residual,
        light_cumulative=light_cumulative,
    )


def nullity_series(w) -> np.ndarray:
    """``t - rank(W[:t,:t])`` for every t, from singular values only."""
    wd = _dense(w)
    n = wd.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for t in range(1, n + 1):
        out[t - 1] = t - numerical_rank(singular_values(wd[:t, :t]), (t, t))
    return out


def solve_all(w, m) -> np.ndarray:
    """Full MA coefficient matrix A, solving every iteration from scratch."""
    wd = _dense(w)
    n = wd.shape[0]
    out = np.zeros((n, n))
    md = _dense(m)
    for t in range(1, n + 1):
        out[t - 1, :t] = lower_triangular_min_norm(wd[:t, :t], md[t - 1, :t])
    return out


def solve_all_lightweight(w, m) -> np.ndarray:
    """Light-weight coefficient matrix, running the recursion over all rows."""
    wd = _dense(w)
    n = wd.shape[0]
    md = _dense(m)
    out = np.zeros((n, n))
    prev = np.zeros(n)
    prod = np.zeros(n)
    for t in range(1, n + 1):
        system = np.vstack([wd[t - 1, :t], prod[:t]])
        u, v = least_squares_min_norm(system, md[t - 1, :t])
        prev = v * prev
        prev[t - 1] += u
        prod = u * wd[t - 1] + v * prod
        out[t - 1] = prev
    return out
