"""Fully convolutional autoencoder trained on true-normal patches.

Layer layout (input 256x256x1, but any size divisible by 8 works)::

    conv 3x3x16 relu -> pool -> conv 3x3x8 relu -> pool -> conv 3x3x8 relu -> pool
    conv 3x3x8 relu -> up -> conv 3x3x8 relu -> up -> conv 3x3x16 relu -> up
    conv 3x3x1 sigmoid

The encoder output for a 256x256 patch is 32x32x8.  Parameters default to
float32; pass ``dtype=np.float64`` to :func:`build_model` for exact work.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import rotate

from . import tensor as tc
from .ssim import SsimConfig, mse_loss, ssim_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# (in_channels, out_channels) of the seven conv layers, encoder first
CONV_CHANNELS: tuple[tuple[int, int], ...] = (
    (1, 16),
    (16, 8),
    (8, 8),
    (8, 8),
    (8, 8),
    (8, 16),
    (16, 1),
)
N_ENCODER_CONVS = 3
DOWNSAMPLE = 8


@dataclass
class AutoencoderModel:
    layers: list[tc.LayerParams]

    def __post_init__(self):
        check_architecture(self.layers)

    def parameters(self) -> list[tc.Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].kernel.data.dtype

    def encode(self, x: tc.Tensor) -> tc.Tensor:
        """``(1, B, H, W)`` -> ``(8, B, H/8, W/8)``."""
        for layer in self.layers[:N_ENCODER_CONVS]:
            x = tc.maxpool2x2(tc.relu(tc.conv2d(x, layer)))
        return x

    def decode(self, h: tc.Tensor) -> tc.Tensor:
        for layer in self.layers[N_ENCODER_CONVS:-1]:
            h = tc.upsample2x2(tc.relu(tc.conv2d(h, layer)))
        return tc.sigmoid(tc.conv2d(h, self.layers[-1]))

    def forward(self, x: tc.Tensor) -> tc.Tensor:
        """Reconstruct a ``(B, H, W)`` batch."""
        x = tc.as_tensor(x)
        out = self.decode(self.encode(tc.reshape(x, (1, *x.shape))))
        return tc.reshape(out, x.shape)

    __call__ = forward

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"parameter shape {p.shape} != stored shape {a.shape}")
            p.data[...] = a


def check_architecture(layers: list[tc.LayerParams]) -> None:
    if len(layers) != len(CONV_CHANNELS):
        raise ValueError(f"expected {len(CONV_CHANNELS)} conv layers, got {len(layers)}")
    for i, (layer, (cin, cout)) in enumerate(zip(layers, CONV_CHANNELS)):
        want = (cout, cin, 3, 3)
        if layer.kernel.shape != want or layer.bias.shape != (cout,):
            raise ValueError(
                f"layer {i}: kernel {layer.kernel.shape} / bias {layer.bias.shape}, expected {want} / ({cout},)"
            )


def build_model(seed: int | np.random.Generator | None = 0, dtype=np.float32) -> AutoencoderModel:
    """Xavier-initialised autoencoder with zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in CONV_CHANNELS:
        lp = tc.conv_layer(cin, cout, rng)
        layers.append(
            tc.LayerParams(
                tc.Tensor(lp.kernel.data.astype(dtype), requires_grad=True),
                tc.Tensor(lp.bias.data.astype(dtype), requires_grad=True),
            )
        )
    return AutoencoderModel(layers)


# -- augmentation -----------------------------------------------------------


def transform(patch: np.ndarray, angle: float = 0.0, vflip: bool = False, hflip: bool = False) -> np.ndarray:
    """Rotate by ``angle`` degrees, then optionally flip rows and/or columns.

    Rotation is counter-clockwise as displayed with row 0 at the top, about
    the patch centre, using bilinear interpolation and half-sample
    symmetric ("reflect") borders.  A 90 degree turn equals ``np.rot90``:
    the pixel at ``(0, 0)`` lands on ``(n - 1, 0)``.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augmentation needs a square 2-D patch, got shape {patch.shape}")
    out = patch
    if angle % 360:
        quarter, rest = divmod(float(angle), 90.0)
        if rest == 0.0:
            out = np.rot90(out, int(quarter))
        else:
            out = rotate(out, angle, reshape=False, order=1, mode="reflect")
    if vflip:
        out = out[::-1, :]
    if hflip:
        out = out[:, ::-1]
    return np.clip(out, 0.0, 1.0)


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation in ``[0, 180)`` degrees followed by independent random flips."""
    angle = rng.uniform(0.0, 180.0)
    vflip, hflip = rng.random(2) < 0.5
    return transform(patch, angle, bool(vflip), bool(hflip))


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    val_fraction: float = 0.10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    loss: str = "ssim"  # or "mse"
    seed: int = 0
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("ssim", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    model: AutoencoderModel
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    final_state: list[np.ndarray]
    n_train: int
    n_val: int


def split_validation(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``(train_idx, val_idx)`` split; 100 patches at 10% gives 90 / 10."""
    n_val = int(round(n * fraction))
    if n - n_val < 1:
        n_val = n - 1
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _loss(cfg: TrainConfig, target, output) -> tc.Tensor:
    return ssim_loss(target, output, cfg.ssim) if cfg.loss == "ssim" else mse_loss(target, output)


def evaluate_loss(model: AutoencoderModel, patches: np.ndarray, cfg: TrainConfig, batch_size: int = 32) -> float:
    """Mean per-patch loss of ``model`` on un-augmented patches."""
    total = 0.0
    for start in range(0, len(patches), batch_size):
        batch = patches[start : start + batch_size]
        out = model(tc.Tensor(batch))
        total += float(_loss(cfg, batch, out.data).data) * len(batch)
    return total / len(patches)


def train(model: AutoencoderModel, patches, cfg: TrainConfig | None = None) -> TrainResult:
    """Train ``model`` in place on true-normal patches, keeping the best-validation weights.

    ``patches`` is an ``(n, H, W)`` array.  A fresh augmentation is drawn for
    every training patch at every epoch; validation patches are never
    augmented.  With a single patch there is no validation split and the
    final weights are kept.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    patches = np.asarray(patches, dtype=model.dtype)
    if patches.ndim != 3 or len(patches) == 0:
        raise ValueError(f"need a non-empty (n, H, W) patch array, got shape {patches.shape}")
    _check_spatial(patches.shape[1:])

    rng = np.random.default_rng(cfg.seed)
    if len(patches) > 1:
        train_idx, val_idx = split_validation(len(patches), cfg.val_fraction, rng)
    else:
        train_idx, val_idx = np.arange(1), np.arange(0)
    train_set, val_set = patches[train_idx], patches[val_idx]

    params = model.parameters()
    opt = tc.Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val, best_state, best_epoch = np.inf, model.state(), 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cfg.augment:
                batch = np.stack([augment(train_set[i], rng) for i in idx])
            else:
                batch = train_set[idx]
            batch = batch.astype(model.dtype, copy=False)
            opt.zero_grad()
            loss = _loss(cfg, batch, model(tc.Tensor(batch)))
            loss.backward()
            opt.step()
            running += float(loss.data) * len(idx)
        train_losses.append(running / len(order))
        if not np.isfinite(train_losses[-1]):
            raise FloatingPointError(f"training loss became non-finite at epoch {epoch}")

        if len(val_set):
            val = evaluate_loss(model, val_set, cfg, cfg.batch_size)
            val_losses.append(val)
            if val < best_val:
                best_val, best_state, best_epoch = val, model.state(), epoch
        else:
            best_state, best_epoch = model.state(), epoch
        log.info(
            "phase=autoencoder epoch=%d train_loss=%.6f val_loss=%s",
            epoch,
            train_losses[-1],
            f"{val_losses[-1]:.6f}" if val_losses else "na",
        )

    final_state = model.state()
    model.load_state(best_state)
    return TrainResult(model, train_losses, val_losses, best_epoch, final_state, len(train_set), len(val_set))


# -- inference --------------------------------------------------------------


def _check_spatial(hw: tuple[int, ...]) -> None:
    if any(d % DOWNSAMPLE or d == 0 for d in hw):
        raise ValueError(f"spatial dimensions {tuple(hw)} must be positive multiples of {DOWNSAMPLE}")


def reconstruct(model: AutoencoderModel, patch, batch_size: int = 32) -> np.ndarray:
    """Decoder(encoder(x)) for one ``(H, W)`` patch or a stack ``(n, H, W)``."""
    x = np.asarray(patch, dtype=model.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (n, H, W), got shape {x.shape}")
    _check_spatial(x.shape[1:])
    out = np.empty(x.shape)
    for start in range(0, len(x), batch_size):
        chunk = x[start : start + batch_size]
        out[start : start + len(chunk)] = model(tc.Tensor(chunk)).data
    return out[0] if single else out


def residue(model: AutoencoderModel, patch, batch_size: int = 32) -> np.ndarray:
    """``|x - reconstruct(x)|`` with the shape of the input."""
    x = np.asarray(patch, dtype=np.float64)
    return np.abs(x - reconstruct(model, x, batch_size))


def residue_energy(res: np.ndarray) -> np.ndarray | float:
    """Sum of squared residue values per patch (scalar for a single 2-D patch)."""
    res = np.asarray(res, dtype=np.float64)
    return float(np.sum(res * res)) if res.ndim == 2 else np.sum(res * res, axis=(-2, -1))


# -- persistence ------------------------------------------------------------


def model_arrays(model: AutoencoderModel, prefix: str = "ae") -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(model.layers):
        out[f"{prefix}_kernel_{i}"] = layer.kernel.data
        out[f"{prefix}_bias_{i}"] = layer.bias.data
    return out


def model_from_arrays(arrays, prefix: str = "ae") -> AutoencoderModel:
    layers = []
    for i in range(len(CONV_CHANNELS)):
        try:
            kernel = np.array(arrays[f"{prefix}_kernel_{i}"])
            bias = np.array(arrays[f"{prefix}_bias_{i}"])
        except KeyError as exc:
            raise ValueError(f"checkpoint is missing {exc.args[0]}") from None
        layers.append(tc.LayerParams(tc.Tensor(kernel, requires_grad=True), tc.Tensor(bias, requires_grad=True)))
    return AutoencoderModel(layers)


def save_checkpoint(model: AutoencoderModel, path, cfg: TrainConfig | None = None) -> None:
    meta = {"format": "patchmine-autoencoder", "version": CHECKPOINT_VERSION}
    if cfg is not None:
        meta["train_config"] = asdict(cfg)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **model_arrays(model))


def load_checkpoint(path) -> tuple[AutoencoderModel, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "patchmine-autoencoder" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {meta.get('format')!r} v{meta.get('version')}")
        model = model_from_arrays(data)
    return model, meta


def clone(model: AutoencoderModel) -> AutoencoderModel:
    return copy.deepcopy(model)
