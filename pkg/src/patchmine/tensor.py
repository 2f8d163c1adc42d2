"""Small reverse-mode autodiff engine over numpy arrays.

Only the pieces the autoencoder needs are here: same-padded 3x3
convolution, 2x2 max-pooling, 2x2 nearest upsampling, ReLU, sigmoid, a few
reductions, Xavier initialisation and Adam.

Image tensors use the channel-major ``(channels, batch, height, width)``
layout, which keeps every convolution tap a contiguous slice.  Kernels are
stored ``(out_channels, in_channels, kh, kw)``.  Float32 and float64 data
keep their precision; anything else becomes float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64
_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class GraphCycleError(RuntimeError):
    """Raised when the recorded computation graph is not acyclic."""


class Tensor:
    """An array that remembers how it was produced.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` when :func:`backward` is called on a downstream node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        self.data = arr if arr.dtype in _FLOATS else arr.astype(DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycleError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphCycleError(f"cycle detected at {parent!r}")
            if pmark is None:
                stack.append((parent, False))
    return order


def backward(node: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate gradients from ``node`` to every reachable leaf.

    ``grad`` defaults to ones, which for a scalar loss is the usual seed.
    Gradients are accumulated into leaf ``.grad`` buffers.
    """
    if grad is None:
        grad = np.ones_like(node.data)
    grad = np.asarray(grad, dtype=node.data.dtype)
    if grad.shape != node.shape:
        raise ValueError(f"seed gradient shape {grad.shape} != node shape {node.shape}")

    order = _topological_order(node)
    pending: dict[int, np.ndarray] = {id(node): grad}
    for current in reversed(order):
        g = pending.pop(id(current), None)
        if g is None or not current.requires_grad:
            continue
        if current._backward is None:
            current.grad = g.copy() if current.grad is None else current.grad + g
            continue
        for parent, pg in zip(current._parents, current._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# -- elementwise and reductions ---------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        backward_fn=lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def tsum(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), parents=(x,), backward_fn=lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor(
        x.data.mean(), parents=(x,), backward_fn=lambda g: (np.full(x.shape, float(g) / n, dtype=x.data.dtype),)
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, x.data.dtype.type(0)), parents=(x,), backward_fn=lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor(s, parents=(x,), backward_fn=lambda g: (g * s * (1.0 - s),))


# -- image layers -----------------------------------------------------------


@dataclass
class LayerParams:
    """Weights of one convolution layer: kernel ``(O, I, kh, kw)`` and bias ``(O,)``."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ValueError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} out-channels"
            )

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.kernel, self.bias]


def _flat_padded(x: np.ndarray, r: int):
    """Zero-pad ``(C, B, H, W)`` by ``r`` and flatten to ``(C, margin + L + margin)``.

    Every tap of a ``(2r+1)``-square window is then a contiguous column slice
    ``buf[:, m + off : m + off + L]`` (outputs at pad positions are junk and
    later cropped), so each tap costs one long copy or one GEMM operand.
    """
    C, B, H, W = x.shape
    Hp, Wp = H + 2 * r, W + 2 * r
    m = r * Wp + r
    L = B * Hp * Wp
    buf = np.zeros((C, m + L + m), dtype=x.dtype)
    buf[:, m : m + L].reshape(C, B, Hp, Wp)[:, :, r : r + H, r : r + W] = x
    offsets = [(i - r) * Wp + (j - r) for i in range(2 * r + 1) for j in range(2 * r + 1)]
    return buf, m, L, offsets


def _crop(flat: np.ndarray, shape: tuple[int, int, int], r: int) -> np.ndarray:
    B, H, W = shape
    return flat.reshape(-1, B, H + 2 * r, W + 2 * r)[:, :, r : r + H, r : r + W].copy()


def _correlate_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 correlation.

    ``x`` is ``(C, B, H, W)``, ``k`` is ``(O, C, kh, kw)`` with ``kh == kw`` odd;
    returns ``(O, B, H, W)``.  The wide side is read once: a narrow input is
    expanded into shifted copies, a narrow output is gathered from shifted
    partial products.
    """
    o, c, kh, kw = k.shape
    r = kh // 2
    buf, m, L, offsets = _flat_padded(x, r)
    if c <= o:
        cols = np.concatenate([buf[:, m + off : m + off + L] for off in offsets], axis=0)
        out = k.transpose(0, 2, 3, 1).reshape(o, kh * kw * c) @ cols
    else:
        partial = k.transpose(2, 3, 0, 1).reshape(kh * kw * o, c) @ buf
        out = partial[:o, m + offsets[0] : m + offsets[0] + L].copy()
        for t, off in enumerate(offsets[1:], start=1):
            out += partial[t * o : (t + 1) * o, m + off : m + off + L]
    return _crop(out, x.shape[1:], r)


def _kernel_grad(x: np.ndarray, g: np.ndarray, size: int) -> np.ndarray:
    """Gradient of a same-padded correlation w.r.t. its ``(O, C, kh, kw)`` kernel."""
    r = size // 2
    c, o = x.shape[0], g.shape[0]
    buf, m, L, offsets = _flat_padded(x, r)
    gbuf, _, _, _ = _flat_padded(g, r)
    # pad columns of the gradient are zero, so junk columns of the input drop out
    if c <= o:
        cols = np.concatenate([buf[:, m + off : m + off + L] for off in offsets], axis=0)
        gk = gbuf[:, m : m + L] @ cols.T  # O x (taps * C)
        return gk.reshape(o, size, size, c).transpose(0, 3, 1, 2)
    gcols = np.concatenate([gbuf[:, m - off : m - off + L] for off in offsets], axis=0)
    gk = gcols @ buf[:, m : m + L].T  # (taps * O) x C
    return gk.reshape(size, size, o, c).transpose(2, 3, 0, 1)


def conv2d(x: Tensor, params: LayerParams) -> Tensor:
    """Square odd-size convolution, stride 1, zero same-padding, plus bias."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects (C, B, H, W) input, got shape {x.shape}")
    kernel, bias = params.kernel, params.bias
    if x.shape[0] != kernel.shape[1]:
        raise ValueError(
            f"input shape {x.shape} has {x.shape[0]} channels but kernel shape "
            f"{kernel.shape} expects {kernel.shape[1]}"
        )
    kh, kw = kernel.shape[2:]
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape}")
    k = kernel.data.astype(x.data.dtype, copy=False)
    out = _correlate_same(x.data, k)
    out += bias.data.astype(out.dtype, copy=False)[:, None, None, None]

    def _back(g):
        gx = None
        if x.requires_grad:
            gx = _correlate_same(g, np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        gk = _kernel_grad(x.data, g, kh)
        return gx, gk, g.sum(axis=(1, 2, 3))

    return Tensor(out, parents=(x, kernel, bias), backward_fn=_back)


def _windows(a: np.ndarray) -> list[np.ndarray]:
    return [a[..., i::2, j::2] for i in (0, 1) for j in (0, 1)]


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max-pooling over the last two axes.

    The gradient goes to one position per window, the first maximum in
    row-major order.
    """
    H, W = x.shape[-2:]
    if x.data.ndim < 2 or H % 2 or W % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dimensions, got {x.shape}")
    win = _windows(x.data)
    out = np.maximum(np.maximum(win[0], win[1]), np.maximum(win[2], win[3]))

    def _back(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for w, dst in zip(win, _windows(gx)):
            hit = (w == out) & ~taken
            dst[hit] = g[hit]
            taken |= hit
        return (gx,)

    return Tensor(out, parents=(x,), backward_fn=_back)


def upsample2x2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling over the last two axes: each cell becomes a 2x2 block."""
    lead, (H, W) = x.shape[:-2], x.shape[-2:]
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    return Tensor(
        out,
        parents=(x,),
        backward_fn=lambda g: (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(x.data.reshape(shape), parents=(x,), backward_fn=lambda g: (g.reshape(x.shape),))


# -- initialisation and optimisation -----------------------------------------


def xavier_init(
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator | int | None = None,
    shape: tuple[int, ...] | None = None,
) -> LayerParams:
    """Glorot-uniform kernel on ``[-L, L]`` with ``L = sqrt(6 / (fan_in + fan_out))``, zero bias.

    ``shape`` defaults to a 1x1 kernel ``(fan_out, fan_in, 1, 1)``.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    rng = np.random.default_rng(rng)
    if shape is None:
        shape = (fan_out, fan_in, 1, 1)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    kernel = rng.uniform(-limit, limit, size=shape)
    return LayerParams(
        kernel=Tensor(kernel, requires_grad=True),
        bias=Tensor(np.zeros(shape[0]), requires_grad=True),
    )


def conv_layer(in_channels: int, out_channels: int, rng: np.random.Generator, size: int = 3) -> LayerParams:
    """Xavier-initialised conv layer using Keras-style fans (channels x receptive field)."""
    field_ = size * size
    return xavier_init(
        in_channels * field_,
        out_channels * field_,
        rng,
        shape=(out_channels, in_channels, size, size),
    )


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[np.ndarray]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state must have equal length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad`` buffers."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(p.data for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
