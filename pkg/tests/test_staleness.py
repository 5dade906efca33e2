from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedbuff_ma.errors import CausalityViolation, ContractViolation, InvalidParameter, ProtocolError
from fedbuff_ma.staleness import (
    DelayDistribution,
    StalenessMatrix,
    VersionOneHot,
    apply_staleness_bound,
    downscale,
    draw_continuous,
    read_triplets,
    sample_delay,
    sample_delays,
    write_triplets,
)

N = 200_000


def floored_mean(survival, upto: int = 400) -> float:
    """E[floor(X)] = sum_{k>=1} P(X >= k) for a nonnegative X."""
    return float(sum(survival(k) for k in range(1, upto)))


def test_half_normal_continuous_mean():
    rng = np.random.default_rng(0)
    x = draw_continuous(DelayDistribution("half-normal", 5.0), rng, N)
    assert x.mean() == pytest.approx(5.0 * math.sqrt(2 / math.pi), rel=0.01)


def test_half_normal_floored_mean_matches_tail_sum():
    rng = np.random.default_rng(1)
    got = sample_delays(DelayDistribution("half-normal", 5.0), rng, N).mean()
    want = floored_mean(lambda k: 2 * stats.norm.sf(k / 5.0))
    assert got == pytest.approx(want, rel=0.01)


def test_exponential_floored_mean_is_geometric():
    rng = np.random.default_rng(2)
    got = sample_delays(DelayDistribution("exponential", 5.0), rng, N).mean()
    assert got == pytest.approx(1.0 / math.expm1(1.0 / 5.0), rel=0.01)


def test_uniform_is_integer_range():
    rng = np.random.default_rng(3)
    d = sample_delays(DelayDistribution("uniform", cutoff=10), rng, N)
    assert d.min() == 0 and d.max() == 10
    assert d.mean() == pytest.approx(5.0, rel=0.01)
    counts = np.bincount(d, minlength=11) / N
    assert np.max(np.abs(counts - 1 / 11)) < 0.005


def test_zero_delay():
    assert sample_delay(DelayDistribution("zero"), np.random.default_rng(0)) == 0


def test_delay_distribution_validation():
    with pytest.raises(InvalidParameter):
        DelayDistribution("pareto")
    with pytest.raises(InvalidParameter):
        DelayDistribution(scale=0.0)
    with pytest.raises(InvalidParameter):
        DelayDistribution(cutoff=-1)


def test_staleness_bound_and_downscale():
    assert apply_staleness_bound(20, 20) and not apply_staleness_bound(21, 20)
    with pytest.raises(CausalityViolation):
        apply_staleness_bound(-1, 20)
    assert downscale(0, 1.0) == 1.0
    assert downscale(3, 0.5) == pytest.approx(0.5)
    np.testing.assert_allclose(downscale(np.array([0, 1, 3]), 1.0), [1, 0.5, 0.25])


def test_one_hot():
    np.testing.assert_array_equal(VersionOneHot(4, 2).dense(), [0, 1, 0, 0])
    with pytest.raises(ContractViolation):
        VersionOneHot(4, 5)
    with pytest.raises(ContractViolation):
        VersionOneHot(4, 0)


def test_record_arrival_entries():
    w = StalenessMatrix(4, 2, p=1.0)
    w.record_arrival(3, VersionOneHot(4, 1))
    w.record_arrival(3, VersionOneHot(4, 3))
    np.testing.assert_allclose(w.row(3), [1 / 3 / 2, 0, 1 / 2, 0])
    with pytest.raises(ProtocolError):
        w.record_arrival(3, VersionOneHot(4, 2))
    with pytest.raises(CausalityViolation):
        w.record_arrival(2, VersionOneHot(4, 3))


def test_rows_sum_to_one_without_downscaling():
    rng = np.random.default_rng(4)
    w = StalenessMatrix(30, 5, p=0.0)
    for t in range(1, 31):
        for s in rng.integers(max(1, t - 6), t + 1, size=5):
            w.record_arrival(t, VersionOneHot(30, int(s)))
    np.testing.assert_allclose(w.row_sums(), 1.0, atol=1e-14)
    assert np.all(np.triu(w.dense(), 1) == 0)


def test_set_row_zeroes_future():
    w = StalenessMatrix(4, 2)
    w.set_row(2, [0.3, -0.1, 9.0, 9.0])
    np.testing.assert_array_equal(w.row(2), [0.3, -0.1, 0, 0])


def test_invalid_builder_arguments():
    with pytest.raises(InvalidParameter):
        StalenessMatrix(3, 0)
    with pytest.raises(InvalidParameter):
        StalenessMatrix(3, 1, p=-1)


def test_triplet_roundtrip(tmp_path):
    a = np.tril(np.random.default_rng(5).normal(size=(6, 6)))
    a[5, :] = 0.0
    path = tmp_path / "w.csv"
    write_triplets(a, path)
    assert path.read_text().splitlines()[0] == "row,col,value"
    np.testing.assert_array_equal(read_triplets(path, 6), a)
    assert read_triplets(path).shape == (5, 5)


def test_triplet_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("i,j,v\n1,1,1\n")
    with pytest.raises(ContractViolation):
        read_triplets(path)


@settings(max_examples=50, deadline=None)
@given(
    horizon=st.integers(1, 25),
    cohort=st.integers(1, 6),
    p=st.sampled_from([0.0, 0.5, 1.0, 2.0]),
    seed=st.integers(0, 2**32 - 1),
)
def test_row_entries_follow_counts(horizon, cohort, p, seed):
    rng = np.random.default_rng(seed)
    w = StalenessMatrix(horizon, cohort, p)
    counts = np.zeros((horizon, horizon))
    for t in range(1, horizon + 1):
        for s in rng.integers(1, t + 1, size=cohort):
            w.record_arrival(t, VersionOneHot(horizon, int(s)))
            counts[t - 1, s - 1] += 1
    tau = np.subtract.outer(np.arange(horizon), np.arange(horizon))
    expected = np.where(tau >= 0, (np.maximum(tau, 0) + 1.0) ** (-p), 0.0) * counts / cohort
    np.testing.assert_allclose(w.dense(), expected, rtol=1e-14, atol=0)
    assert np.all(w.row_sums() <= 1.0 + 1e-12)
