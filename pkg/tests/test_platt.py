import numpy as np
import pytest
from scipy.special import expit

from patchmine.platt import PlattModel, cross_entropy, fit_platt, probability


def _sample(n, a, b, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=n)
    y = np.where(rng.random(n) < expit(a * g + b), 1, -1)
    return g, y


def _separable(seed=0):
    rng = np.random.default_rng(seed)
    g = np.concatenate([rng.uniform(-2, -0.5, 100), rng.uniform(0.5, 2, 300)])
    y = np.concatenate([np.ones(100, int), -np.ones(300, int)])
    return g, y


class TestProbability:
    def test_zero_init(self):
        np.testing.assert_array_equal(probability(PlattModel(), np.array([-5.0, 0.0, 3.0])), 0.5)

    def test_midpoint(self):
        m = PlattModel(-2.5, 0.75)
        assert probability(m, -m.B / m.A) == 0.5

    def test_monotone_and_open_interval(self):
        m = PlattModel(-3.0, 0.2)
        g = np.linspace(-10, 10, 101)
        p = probability(m, g)
        assert np.all(np.diff(p) < 0)
        assert np.all((p > 0) & (p < 1))


class TestFit:
    def test_recovers_generator(self):
        g, y = _sample(10_000, -3.0, 0.5)
        m = fit_platt(g, y)
        assert abs(m.A + 3.0) <= 0.2 and abs(m.B - 0.5) <= 0.2

    def test_separable_gives_negative_slope(self):
        assert fit_platt(*_separable()).A < 0

    def test_early_training_loss_non_increasing(self):
        m = fit_platt(*_separable(), epochs=5)
        assert all(b <= a + 1e-12 for a, b in zip(m.train_loss, m.train_loss[1:]))

    def test_best_validation_pair_returned(self):
        g, y = _sample(2000, -2.0, 0.0, seed=1)
        m = fit_platt(g, y, epochs=10)
        assert len(m.val_loss) == 10 and len(m.train_loss) == 10

    def test_reproducible(self):
        g, y = _sample(500, -1.0, 0.3, seed=2)
        a, b = fit_platt(g, y, seed=4), fit_platt(g, y, seed=4)
        assert (a.A, a.B) == (b.A, b.B)

    def test_invariant_to_decision_offset_and_scale(self):
        g, y = _sample(3000, -2.0, 0.0, seed=3)
        a = fit_platt(g, y)
        b = fit_platt(0.01 * g + 5.0, y)
        np.testing.assert_allclose(probability(a, g), probability(b, 0.01 * g + 5.0), atol=1e-9)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            fit_platt([0.1, 0.2, 0.3], [-1, -1, -1])

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            fit_platt([0.1, 0.2], [0, 1])


def test_cross_entropy_matches_direct_formula():
    x = np.array([-1.0, 0.5, 2.0])
    t = np.array([1.0, 0.0, 1.0])
    p = expit(-1.3 * x + 0.2)
    ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert abs(cross_entropy(-1.3, 0.2, x, t) - ref) < 1e-12
