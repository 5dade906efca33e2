"""Staleness bookkeeping for buffered asynchronous aggregation.

The staleness matrix W records, for each server iteration t, which model
versions the C accepted updates were trained on, down-weighted by
``(tau + 1) ** -p``. Entry ``(t, s)`` equals ``(t - s + 1) ** -p * C_ts / C``
where ``C_ts`` counts accepted arrivals with version ``s``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import CausalityViolation, ContractViolation, InvalidParameter, ProtocolError
from .linalg import LowerTriangular, as_vector

DelayKind = Literal["half-normal", "uniform", "exponential", "zero"]


@dataclass(frozen=True)
class VersionOneHot:
    """One-hot encoding of the model version a client trained on."""

    horizon: int
    index: int

    def __post_init__(self) -> None:
        if not 1 <= self.index <= self.horizon:
            raise ContractViolation(f"version {self.index} outside [1, {self.horizon}]")

    def dense(self) -> np.ndarray:
        e = np.zeros(self.horizon)
        e[self.index - 1] = 1.0
        return e


@dataclass(frozen=True)
class DelayDistribution:
    """Client delay model, measured in server iterations.

    ``scale`` is the half-normal sigma or the exponential mean; ``cutoff``
    is the inclusive upper bound of the uniform model.
    """

    kind: DelayKind = "half-normal"
    scale: float = 5.0
    cutoff: int = 10

    def __post_init__(self) -> None:
        if self.kind not in ("half-normal", "uniform", "exponential", "zero"):
            raise InvalidParameter(f"unknown delay kind {self.kind!r}")
        if self.scale <= 0:
            raise InvalidParameter(f"delay scale must be > 0, got {self.scale}")
        if self.cutoff < 0:
            raise InvalidParameter(f"uniform cutoff must be >= 0, got {self.cutoff}")


def draw_continuous(dist: DelayDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """Raw delay draws before discretisation (integers for the uniform model)."""
    if dist.kind == "zero":
        return np.zeros(n)
    if dist.kind == "half-normal":
        return np.abs(rng.normal(0.0, dist.scale, size=n))
    if dist.kind == "exponential":
        return rng.exponential(dist.scale, size=n)
    return rng.integers(0, dist.cutoff + 1, size=n).astype(np.float64)


def sample_delays(dist: DelayDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` integer delays, each the floor of a continuous draw."""
    return np.floor(draw_continuous(dist, rng, n)).astype(np.int64)


def sample_delay(dist: DelayDistribution, rng: np.random.Generator) -> int:
    """A single integer delay ``>= 0``."""
    return int(sample_delays(dist, rng, 1)[0])


def apply_staleness_bound(tau: int, tau_max: int) -> bool:
    """True when an update with staleness ``tau`` should be kept."""
    if tau < 0:
        raise CausalityViolation(f"negative staleness {tau}")
    return tau <= tau_max


def downscale(tau: int | np.ndarray, p: float) -> float | np.ndarray:
    """Staleness penalty ``(tau + 1) ** -p``."""
    return (np.asarray(tau, dtype=np.float64) + 1.0) ** (-p)


class StalenessMatrix:
    """Online builder for W.

    Rows are filled one arrival at a time through :meth:`record_arrival`,
    or set wholesale with :meth:`set_row` when the row comes out of a
    private aggregation.

    Args:
        horizon: Number of server iterations T.
        cohort: Buffer size C.
        p: Down-scaling exponent.
    """

    def __init__(self, horizon: int, cohort: int, p: float = 0.0) -> None:
        if cohort < 1:
            raise InvalidParameter(f"cohort size must be >= 1, got {cohort}")
        if p < 0:
            raise InvalidParameter(f"down-scaling exponent must be >= 0, got {p}")
        self.matrix = LowerTriangular(horizon)
        self.cohort = cohort
        self.p = p
        self.counts = np.zeros(horizon, dtype=np.int64)

    @property
    def horizon(self) -> int:
        return self.matrix.dim

    def record_arrival(self, t: int, one_hot: VersionOneHot) -> None:
        """Add ``(t - s + 1) ** -p / C`` at ``(t, s)`` for an arrival of version ``s``."""
        if not 1 <= t <= self.horizon:
            raise InvalidParameter(f"row {t} outside [1, {self.horizon}]")
        if one_hot.index > t:
            raise CausalityViolation(f"version {one_hot.index} arrived at earlier iteration {t}")
        if self.counts[t - 1] >= self.cohort:
            raise ProtocolError(f"row {t} already holds {self.cohort} arrivals")
        self.matrix.add(t, one_hot.index, float(downscale(t - one_hot.index, self.p)) / self.cohort)
        self.counts[t - 1] += 1

    def set_row(self, t: int, values) -> None:
        """Install a complete row, e.g. a noised one from private aggregation."""
        v = as_vector(values, "row")
        row = np.zeros(self.horizon)
        row[:t] = v[:t]
        self.matrix.set_row(t, row)
        self.counts[t - 1] = self.cohort

    def row(self, t: int) -> np.ndarray:
        return self.matrix.row(t)

    def prefix(self, t: int) -> np.ndarray:
        """Leading ``t x t`` block, read-only."""
        return self.matrix.prefix(t)

    def dense(self) -> np.ndarray:
        return self.matrix.to_dense()

    def row_sums(self) -> np.ndarray:
        return self.matrix.to_dense().sum(axis=1)

    def to_csv(self, path: str | Path) -> None:
        write_triplets(self.dense(), path)


def write_triplets(a: np.ndarray, path: str | Path) -> None:
    """Write nonzero entries as 1-based ``row,col,value`` lines."""
    rows, cols = np.nonzero(a)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for i, j in zip(rows, cols):
            writer.writerow([int(i) + 1, int(j) + 1, repr(float(a[i, j]))])


def read_triplets(path: str | Path, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`write_triplets`. The size is inferred when ``dim`` is None."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "value"]:
            raise ContractViolation(f"{path}: expected header row,col,value, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise ContractViolation(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            entries.append((int(rec[0]), int(rec[1]), float(rec[2])))
    n = dim if dim is not None else max((max(i, j) for i, j, _ in entries), default=0)
    out = np.zeros((n, n))
    for i, j, v in entries:
        out[i - 1, j - 1] = v
    return out
