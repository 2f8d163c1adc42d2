import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchmine import tensor as tc
from patchmine.ssim import SsimConfig, gaussian_window, mse_loss, ssim_index, ssim_loss, ssim_map


def brute_ssim(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM with explicit weighted moments."""
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a = x[i : i + size, j : j + size]
            b = y[i : i + size, j : j + size]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestWindow:
    def test_normalised_symmetric(self):
        w = gaussian_window()
        assert w.shape == (11, 11)
        assert abs(w.sum() - 1) < 1e-12
        np.testing.assert_allclose(w, w.T)
        np.testing.assert_allclose(w, w[::-1, ::-1])

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            gaussian_window(10)


class TestIndex:
    def test_identity(self):
        x = np.random.default_rng(0).random((32, 32))
        assert abs(ssim_index(x, x) - 1) < 1e-9

    def test_constant_patches(self):
        # means 0.25 and 0.75, zero variances: only the luminance factor remains
        x, y = np.full((16, 16), 0.25), np.full((16, 16), 0.75)
        expected = (2 * 0.25 * 0.75 + 1e-4) / (0.25**2 + 0.75**2 + 1e-4)
        assert abs(ssim_index(x, y) - expected) < 1e-12
        assert abs(ssim_index(x, y) - 0.6001) < 1e-3

    def test_matches_window_loops(self):
        rng = np.random.default_rng(1)
        x = rng.random((20, 17))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert abs(ssim_index(x, y) - brute_ssim(x, y)) < 1e-12

    def test_map_covers_valid_region_only(self):
        m = ssim_map(np.zeros((20, 30)), np.zeros((20, 30)))
        assert m.shape == (1, 10, 20)

    def test_general_exponents_reduce_to_standard(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((24, 24)), rng.random((24, 24))
        cfg = SsimConfig(alpha=1.0, beta=1.0, gamma=1.0 + 1e-15)
        assert not cfg.is_standard
        assert abs(ssim_index(x, y, cfg) - ssim_index(x, y)) < 1e-9

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ssim_index(np.full((16, 16), 1.5), np.ones((16, 16)))

    def test_small_patch_rejected(self):
        with pytest.raises(ValueError):
            ssim_index(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_index(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (14, 13), elements=st.floats(0, 1)),
    arrays(np.float64, (14, 13), elements=st.floats(0, 1)),
)
def test_symmetric_and_bounded(x, y):
    a, b = ssim_index(x, y), ssim_index(y, x)
    assert abs(a - b) < 1e-12
    assert -1 - 1e-9 <= a <= 1 + 1e-9


class TestLoss:
    def test_gradient_both_inputs(self):
        rng = np.random.default_rng(3)
        x = tc.Tensor(rng.random((2, 14, 15)), requires_grad=True)
        y = tc.Tensor(rng.random((2, 14, 15)), requires_grad=True)
        loss = ssim_loss(x, y)
        loss.backward()
        h = 1e-6
        for t in (x, y):
            for _ in range(10):
                idx = tuple(int(rng.integers(0, n)) for n in t.shape)
                old = t.data[idx]
                t.data[idx] = old + h
                fp = float(ssim_loss(x.data, y.data).data)
                t.data[idx] = old - h
                fm = float(ssim_loss(x.data, y.data).data)
                t.data[idx] = old
                num = (fp - fm) / (2 * h)
                assert abs(num - t.grad[idx]) <= 1e-4 * max(abs(num), 1e-6)

    def test_value_is_one_minus_batch_mean(self):
        rng = np.random.default_rng(4)
        x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        ref = 1 - np.mean([ssim_index(a, b) for a, b in zip(x, y)])
        assert abs(float(ssim_loss(x, y).data) - ref) < 1e-12

    def test_zero_at_identity(self):
        x = np.random.default_rng(5).random((1, 16, 16))
        assert abs(float(ssim_loss(x, x).data)) < 1e-12

    def test_nonunit_exponents_not_differentiable(self):
        with pytest.raises(NotImplementedError):
            ssim_loss(np.zeros((16, 16)), np.zeros((16, 16)), SsimConfig(alpha=2.0))

    def test_mse_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.random((2, 4, 4))
        y = tc.Tensor(rng.random((2, 4, 4)), requires_grad=True)
        mse_loss(x, y).backward()
        np.testing.assert_allclose(y.grad, 2 * (y.data - x) / x.size)
