"""Structural similarity (SSIM) and the reconstruction losses built on it.

The local SSIM map is evaluated only where the Gaussian window fits
entirely inside the patch, then averaged.  ``ssim_loss`` is a fused
differentiable op: its backward pass pushes the gradient of the mean map
through the adjoint of the window filter, so a 128x128 batch costs a few
separable filter passes rather than a graph of elementwise nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import Tensor, as_tensor


def gaussian_window_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised, symmetric 2-D Gaussian weights of shape ``(size, size)``."""
    g = gaussian_window_1d(size, sigma)
    w = np.outer(g, g)
    return w / w.sum()


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    @cached_property
    def kernel_1d(self) -> np.ndarray:
        return gaussian_window_1d(self.window_size, self.sigma)

    @property
    def window(self) -> np.ndarray:
        return gaussian_window(self.window_size, self.sigma)

    @property
    def is_standard(self) -> bool:
        """True when the map reduces to the two-factor closed form."""
        return self.alpha == self.beta == self.gamma == 1.0


DEFAULT_CONFIG = SsimConfig()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation over the last two axes, keeping the valid region."""
    r = g.size // 2
    out = correlate1d(a, g, axis=-1, mode="constant")
    out = correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r : a.shape[-2] - r, r : a.shape[-1] - r]


def _filter_valid_adjoint(b: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_filter_valid` (zero-embed, then correlate with the flipped taps)."""
    r = g.size // 2
    pad = [(0, 0)] * (b.ndim - 2) + [(r, r), (r, r)]
    full = np.pad(b, pad)
    gf = g[::-1]
    out = correlate1d(full, gf, axis=-1, mode="constant")
    return correlate1d(out, gf, axis=-2, mode="constant")


def _as_planes(a: np.ndarray) -> np.ndarray:
    """View ``(H, W)``, ``(H, W, 1)``, ``(B, H, W)`` or ``(B, H, W, 1)`` as ``(B, H, W)``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3 and a.shape[-1] == 1:
        return a[None, ..., 0]
    if a.ndim == 3:
        return a
    if a.ndim == 4 and a.shape[-1] == 1:
        return a[..., 0]
    raise ValueError(f"expected grayscale patch(es), got shape {a.shape}")


def _check_pair(x: np.ndarray, y: np.ndarray, cfg: SsimConfig) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[-2:]) < cfg.window_size:
        raise ValueError(f"patch {x.shape[-2:]} smaller than the {cfg.window_size}x{cfg.window_size} window")


def _moments(x: np.ndarray, y: np.ndarray, cfg: SsimConfig):
    g = cfg.kernel_1d
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    exx = _filter_valid(x * x, g)
    eyy = _filter_valid(y * y, g)
    exy = _filter_valid(x * y, g)
    return mx, my, exx, eyy, exy


def ssim_map(x, y, cfg: SsimConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Local SSIM values over the valid region, shape ``(B, H - w + 1, W - w + 1)``."""
    x, y = _as_planes(x), _as_planes(y)
    _check_pair(x, y, cfg)
    mx, my, exx, eyy, exy = _moments(x, y, cfg)
    vx = np.maximum(exx - mx * mx, 0.0)
    vy = np.maximum(eyy - my * my, 0.0)
    cov = exy - mx * my
    lum = (2 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1)
    if cfg.is_standard:
        return lum * (2 * cov + cfg.c2) / (vx + vy + cfg.c2)
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    con = (2 * sx * sy + cfg.c2) / (vx + vy + cfg.c2)
    struct = (cov + cfg.c3) / (sx * sy + cfg.c3)
    return np.sign(lum) * np.abs(lum) ** cfg.alpha * con**cfg.beta * np.sign(struct) * np.abs(struct) ** cfg.gamma


def ssim_index(x, y, cfg: SsimConfig = DEFAULT_CONFIG) -> float:
    """Mean SSIM between two grayscale patches with values in ``[0, 1]``."""
    xa, ya = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ya.shape}")
    lo, hi = -1e-9, cfg.data_range + 1e-9
    if xa.min() < lo or ya.min() < lo or xa.max() > hi or ya.max() > hi:
        raise ValueError(f"patch values must lie in [0, {cfg.data_range}]")
    return float(ssim_map(xa, ya, cfg).mean())


def ssim_loss(x, x_rec, cfg: SsimConfig = DEFAULT_CONFIG) -> Tensor:
    """``1 - SSIM(x, x_rec)`` averaged over the batch, as a differentiable scalar.

    Both arguments may be tensors; gradients flow to whichever requires them.
    Only the unit-exponent form (the default) is differentiable.
    """
    if not cfg.is_standard:
        raise NotImplementedError("ssim_loss supports alpha = beta = gamma = 1 only")
    xt, yt = as_tensor(x), as_tensor(x_rec)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {xt.shape} vs {yt.shape}")
    xs, ys = _as_planes(xt.data), _as_planes(yt.data)
    _check_pair(xs, ys, cfg)
    c1, c2 = cfg.c1, cfg.c2
    mx, my, exx, eyy, exy = _moments(xs, ys, cfg)
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = exx - mx * mx + eyy - my * my + c2
    s = (a1 * a2) / (b1 * b2)
    n_batch = s.shape[0]
    loss = 1.0 - s.mean(axis=(1, 2)).mean()

    def _back(g):
        # d(loss)/d(s) at every valid position
        w = -float(g) / (n_batch * s.shape[1] * s.shape[2])
        sa1, sa2, sb1, sb2 = w * s / a1, w * s / a2, w * s / b1, w * s / b2
        d_exy = 2 * sa2
        d_sq = -sb2  # same weight for exx and eyy
        d_mx = 2 * my * sa1 - 2 * mx * sb1 - 2 * my * sa2 + 2 * mx * sb2
        d_my = 2 * mx * sa1 - 2 * my * sb1 - 2 * mx * sa2 + 2 * my * sb2
        k = cfg.kernel_1d
        adj_sq = _filter_valid_adjoint(d_sq, k)
        adj_xy = _filter_valid_adjoint(d_exy, k)
        gx = gy = None
        if xt.requires_grad:
            gx = (_filter_valid_adjoint(d_mx, k) + 2 * xs * adj_sq + ys * adj_xy).reshape(xt.shape)
        if yt.requires_grad:
            gy = (_filter_valid_adjoint(d_my, k) + 2 * ys * adj_sq + xs * adj_xy).reshape(yt.shape)
        return gx, gy

    return Tensor(loss, parents=(xt, yt), backward_fn=_back)


def mse_loss(x, x_rec) -> Tensor:
    """Mean squared difference, as a differentiable scalar."""
    xt, yt = as_tensor(x), as_tensor(x_rec)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {xt.shape} vs {yt.shape}")
    diff = yt.data - xt.data
    n = diff.size

    def _back(g):
        gy = 2.0 * float(g) * diff / n
        return (-gy if xt.requires_grad else None), (gy if yt.requires_grad else None)

    return Tensor(np.mean(diff * diff), parents=(xt, yt), backward_fn=_back)
