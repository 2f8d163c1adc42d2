import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from patchmine.features import (
    FEATURE_NAMES,
    N_FEATURES,
    Standardizer,
    first_order_stats,
    first_order_stats_batch,
    read_feature_matrix,
    standardize,
    write_feature_matrix,
)


def reference_stats(v, bins=32):
    """Feature vector assembled from numpy / scipy primitives."""
    v = np.asarray(v, dtype=float).ravel()
    p10, p25, p50, p75, p90 = np.percentile(v, [10, 25, 50, 75, 90])
    inner = v[(v >= p10) & (v <= p90)]
    hist, _ = np.histogram(np.clip(v, 0, 1), bins=bins, range=(0, 1))
    p = hist / v.size
    nz = p[p > 0]
    const = v.max() == v.min()
    return np.array([
        np.sum(v**2), v.min(), v.max(), p10, p90, v.mean(), p50, p75 - p25, v.max() - v.min(),
        np.mean(np.abs(v - v.mean())), np.mean(np.abs(inner - inner.mean())), v.var(),
        0.0 if const else stats.skew(v), 0.0 if const else stats.kurtosis(v, fisher=False),
        -np.sum(nz * np.log(nz)), np.sum(p**2),
    ])


class TestStats:
    def test_names(self):
        assert N_FEATURES == 16 and len(set(FEATURE_NAMES)) == 16

    def test_against_reference(self):
        rng = np.random.default_rng(0)
        for shape in [(8, 8), (33, 17), (64, 64)]:
            r = rng.beta(0.5, 3.0, shape)
            np.testing.assert_allclose(first_order_stats(r), reference_stats(r), rtol=1e-10, atol=1e-12)

    def test_hand_values(self):
        r = np.array([[0.0, 0.5], [0.5, 1.0]])
        f = dict(zip(FEATURE_NAMES, first_order_stats(r, bins=2)))
        assert f["energy"] == 1.5 and f["mean"] == 0.5 and f["variance"] == 0.125
        assert f["range"] == 1.0 and f["skewness"] == 0.0
        assert f["kurtosis"] == pytest.approx(2.0)  # (2 * 0.5^4 / 4) / 0.125^2
        # histogram on [0, 0.5) and [0.5, 1]: counts 1 and 3
        assert f["uniformity"] == pytest.approx(0.625)
        assert f["entropy"] == pytest.approx(-(0.25 * np.log(0.25) + 0.75 * np.log(0.75)))

    def test_constant_residue(self):
        f = dict(zip(FEATURE_NAMES, first_order_stats(np.full((6, 6), 0.3))))
        assert f["variance"] == 0 and f["skewness"] == 0 and f["kurtosis"] == 0
        assert f["entropy"] == 0 and f["uniformity"] == 1
        assert f["robust_mean_absolute_deviation"] == 0

    def test_batch_matches_single(self):
        r = np.random.default_rng(1).random((5, 12, 12))
        batch = first_order_stats_batch(r)
        for i in range(5):
            np.testing.assert_allclose(batch[i], first_order_stats(r[i]), rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            first_order_stats(np.zeros((0,)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(0, 1)))
def test_invariants(v):
    f = dict(zip(FEATURE_NAMES, first_order_stats(v)))
    assert f["minimum"] <= f["p10"] <= f["median"] <= f["p90"] <= f["maximum"]
    assert 1 / 32 - 1e-12 <= f["uniformity"] <= 1 + 1e-12
    assert -1e-12 <= f["entropy"] <= np.log(32) + 1e-12
    assert f["variance"] >= 0 and f["interquartile_range"] >= 0
    perm = first_order_stats(np.random.default_rng(0).permutation(v))
    np.testing.assert_allclose(perm, first_order_stats(v), rtol=1e-9, atol=1e-12)


class TestStandardizer:
    def test_zero_mean_unit_variance(self):
        f = np.random.default_rng(0).normal(3, 2, (200, 4))
        st_, z = standardize(f)
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)

    def test_constant_dimension(self):
        f = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
        s = Standardizer.fit(f)
        assert s.constant.tolist() == [False, True]
        z = s.transform(f)
        assert np.all(np.isfinite(z)) and np.all(z[:, 1] == 0)

    def test_frozen_statistics(self):
        s = Standardizer.fit(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(s.transform(np.array([[4.0]])), [[3.0]])

    def test_dimension_checked(self):
        with pytest.raises(ValueError):
            Standardizer.fit(np.zeros((3, 2))).transform(np.zeros((1, 3)))


def test_feature_csv_round_trip(tmp_path):
    f = np.random.default_rng(0).random((4, 16))
    write_feature_matrix(tmp_path / "f.csv", f, ["p0", "p1", "p2", "p3"], ["a", "a", "b", "b"])
    g, pids, iids = read_feature_matrix(tmp_path / "f.csv")
    np.testing.assert_array_equal(f, g)
    assert pids == ["p0", "p1", "p2", "p3"] and iids == ["a", "a", "b", "b"]
