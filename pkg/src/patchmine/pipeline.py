"""End-to-end flow: preprocessing, patch extraction, three-phase training,
image classification with probability maps, cross-validation and metrics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autoencoder as ae
from . import ocsvm
from .features import DEFAULT_BINS, Standardizer, first_order_stats_batch
from .platt import PlattModel, fit_platt, probability

log = logging.getLogger(__name__)

NORMAL, MALIGNANT = -1, 1
BUNDLE_FORMAT = "patchmine-bundle"
BUNDLE_VERSION = 1


class PipelineError(RuntimeError):
    """A failure inside one training phase; ``phase`` names which."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


class BundleVersionError(ValueError):
    pass


# -- data -------------------------------------------------------------------


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W) grayscale in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        if self.label not in (NORMAL, MALIGNANT):
            raise ValueError(f"image {self.id!r}: label must be -1 or +1, got {self.label}")
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"image {self.id!r}: expected a 2-D grayscale grid, got {self.pixels.shape}")


@dataclass
class PatchSet:
    """Patches plus their bookkeeping; ``labels`` is -1 for true-normal and 0 for unknown."""

    patches: np.ndarray  # (n, P, P)
    image_index: np.ndarray  # (n,)
    offsets: np.ndarray  # (n, 2) as (row, col)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def true_normal(self) -> np.ndarray:
        return self.labels == NORMAL


# -- preprocessing ----------------------------------------------------------


def gray_world(rgb) -> np.ndarray:
    """Scale each channel so its mean equals the grand mean of the channel means.

    A channel whose mean is zero carries no signal to scale; it is set to
    the grand mean.  Output is float in ``[0, 255]``.
    """
    img = np.asarray(rgb, dtype=np.float64)
    means = img.reshape(-1, 3).mean(axis=0)
    grand = means.mean()
    out = np.empty_like(img)
    for ch in range(3):
        if means[ch] > 0:
            out[..., ch] = img[..., ch] * (grand / means[ch])
        else:
            out[..., ch] = grand
    return np.clip(out, 0.0, 255.0)


def preprocess(rgb) -> np.ndarray:
    """8-bit RGB -> gray-world balanced -> luminosity grayscale in ``[0, 1]``."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    bal = gray_world(img)
    gray = 0.299 * bal[..., 0] + 0.587 * bal[..., 1] + 0.114 * bal[..., 2]
    return np.clip(gray / 255.0, 0.0, 1.0)


# -- patch extraction -------------------------------------------------------


def grid_shape(count: int, height: int, width: int) -> tuple[int, int]:
    """``(cols, rows)`` with ``cols * rows == count`` and aspect closest to the image's."""
    if count < 1:
        raise ValueError(f"patch count must be >= 1, got {count}")
    target = width / height
    pairs = [(c, count // c) for c in range(1, count + 1) if count % c == 0]
    return min(pairs, key=lambda p: (abs(math.log((p[0] / p[1]) / target)), -p[0]))


def grid_offsets(extent: int, size: int, n: int) -> np.ndarray:
    """``n`` evenly spaced top-left offsets from 0 to ``extent - size`` (floored)."""
    span = extent - size
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    return np.array([i * span // (n - 1) for i in range(n)], dtype=np.int64)


def _check_fits(shape, size: int) -> None:
    if shape[0] < size or shape[1] < size:
        raise ValueError(f"image {tuple(shape)} is smaller than the {size}x{size} patch")


def training_offsets(shape, count: int = 35, size: int = 256) -> np.ndarray:
    _check_fits(shape, size)
    cols, rows = grid_shape(count, shape[0], shape[1])
    ys = grid_offsets(shape[0], size, rows)
    xs = grid_offsets(shape[1], size, cols)
    return np.array([(y, x) for y in ys for x in xs], dtype=np.int64)


def stride_offsets(extent: int, size: int, stride: int) -> np.ndarray:
    """0, stride, 2*stride, ... plus a final offset anchored at the far edge."""
    last = extent - size
    offs = list(range(0, last + 1, stride))
    if offs[-1] != last:
        offs.append(last)
    return np.array(offs, dtype=np.int64)


def test_offsets(shape, size: int = 256, stride: int = 16) -> np.ndarray:
    _check_fits(shape, size)
    if not 1 <= stride <= size:
        raise ValueError(f"stride must lie in [1, {size}] so patches cover the image, got {stride}")
    ys = stride_offsets(shape[0], size, stride)
    xs = stride_offsets(shape[1], size, stride)
    return np.array([(y, x) for y in ys for x in xs], dtype=np.int64)


def cut_patches(pixels: np.ndarray, offsets: np.ndarray, size: int) -> np.ndarray:
    return np.stack([pixels[y : y + size, x : x + size] for y, x in offsets])


def extract_training_patches(image: LabeledImage, count: int = 35, size: int = 256, index: int = 0) -> PatchSet:
    offs = training_offsets(image.pixels.shape, count, size)
    n = len(offs)
    label = NORMAL if image.label == NORMAL else 0
    return PatchSet(
        cut_patches(image.pixels, offs, size),
        np.full(n, index, dtype=np.int64),
        offs,
        np.full(n, label, dtype=np.int64),
    )


def extract_test_patches(image, size: int = 256, stride: int = 16, index: int = 0) -> PatchSet:
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float64)
    offs = test_offsets(pixels.shape, size, stride)
    n = len(offs)
    return PatchSet(
        cut_patches(pixels, offs, size),
        np.full(n, index, dtype=np.int64),
        offs,
        np.zeros(n, dtype=np.int64),
    )


# -- probability maps -------------------------------------------------------


@dataclass
class ProbabilityMap:
    total: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, shape) -> "ProbabilityMap":
        return cls(np.zeros(shape), np.zeros(shape, dtype=np.int64))

    def add(self, offset, size: int, p: float) -> None:
        y, x = offset
        self.total[y : y + size, x : x + size] += p
        self.count[y : y + size, x : x + size] += 1

    def merge(self, other: "ProbabilityMap") -> None:
        self.total += other.total
        self.count += other.count

    def finalize(self) -> np.ndarray:
        """Per-pixel mean of covering patch probabilities (0 where uncovered)."""
        out = np.zeros_like(self.total)
        np.divide(self.total, self.count, out=out, where=self.count > 0)
        return out


# -- training ---------------------------------------------------------------


@dataclass
class PipelineConfig:
    patch_size: int = 256
    train_patches: int = 35
    stride: int = 16
    threshold: float = 0.5
    bins: int = DEFAULT_BINS
    nu_grid: tuple[float, ...] = ocsvm.DEFAULT_NU_GRID
    # multiples of the median pairwise squared distance of training features
    c_factors: tuple[float, ...] = ocsvm.DEFAULT_C_FACTORS
    svm_tol: float = 1e-6
    platt_epochs: int = 25
    platt_batch_size: int = 32
    seed: int = 0
    ae: ae.TrainConfig = field(default_factory=ae.TrainConfig)

    def validate(self) -> None:
        if self.patch_size < 8 or self.patch_size % ae.DOWNSAMPLE:
            raise ValueError(f"patch_size must be a positive multiple of {ae.DOWNSAMPLE}, got {self.patch_size}")
        if self.patch_size < self.ae.ssim.window_size:
            raise ValueError("patch_size is smaller than the SSIM window")
        if self.train_patches < 1:
            raise ValueError(f"train_patches must be >= 1, got {self.train_patches}")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError(f"stride must lie in [1, patch_size={self.patch_size}], got {self.stride}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")
        if not self.nu_grid or not self.c_factors:
            raise ValueError("hyper-parameter grid is empty")
        for nu in self.nu_grid:
            ocsvm.OcSvmConfig(nu, 1.0)
        if any(c <= 0 for c in self.c_factors):
            raise ValueError("c factors must be positive")
        if self.platt_epochs < 1:
            raise ValueError("platt_epochs must be >= 1")
        self.ae.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nu_grid"] = list(self.nu_grid)
        d["c_factors"] = list(self.c_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        ae_d = dict(d.pop("ae"))
        ssim_d = ae_d.pop("ssim")
        from .ssim import SsimConfig

        train_cfg = ae.TrainConfig(**ae_d, ssim=SsimConfig(**ssim_d))
        d["nu_grid"] = tuple(d["nu_grid"])
        d["c_factors"] = tuple(d["c_factors"])
        return cls(**d, ae=train_cfg)


@dataclass
class Bundle:
    model: ae.AutoencoderModel
    standardizer: Standardizer
    svm: ocsvm.OcSvmModel
    platt: PlattModel
    config: PipelineConfig
    selection_table: list[dict] = field(default_factory=list)
    ae_losses: dict = field(default_factory=dict)


def patch_features(model: ae.AutoencoderModel, patches: np.ndarray, bins: int, chunk: int = 64) -> np.ndarray:
    """Residue statistics for a stack of patches, computed in chunks."""
    out = []
    for start in range(0, len(patches), chunk):
        res = ae.residue(model, patches[start : start + chunk])
        out.append(first_order_stats_batch(res, bins))
    return np.concatenate(out) if out else np.zeros((0, 16))


def train_pipeline(images: Sequence[LabeledImage], cfg: PipelineConfig | None = None) -> Bundle:
    """Three phases: autoencoder on true-normal patches, (nu, c) selection and
    the one-class SVM, then Platt calibration on every training patch."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    labels = np.array([im.label for im in images])
    if not (labels == NORMAL).any() or not (labels == MALIGNANT).any():
        raise PipelineError("input", "training images must include both normal and malignant labels")

    sets = [extract_training_patches(im, cfg.train_patches, cfg.patch_size, i) for i, im in enumerate(images)]
    normal_patches = np.concatenate([s.patches for s in sets if s.true_normal.all()])
    log.info(
        "phase=input images=%d normal=%d malignant=%d true_normal_patches=%d",
        len(images),
        int((labels == NORMAL).sum()),
        int((labels == MALIGNANT).sum()),
        len(normal_patches),
    )

    try:
        model = ae.build_model(cfg.seed)
        result = ae.train(model, normal_patches, cfg.ae)
    except (ValueError, FloatingPointError) as exc:
        raise PipelineError("autoencoder", str(exc)) from exc
    log.info("phase=autoencoder best_epoch=%d", result.best_epoch)
    del normal_patches

    feats = np.concatenate([patch_features(model, s.patches, cfg.bins) for s in sets])
    patch_image = np.concatenate([s.image_index for s in sets])
    known = np.concatenate([s.labels for s in sets]) == NORMAL
    del sets

    try:
        std = Standardizer.fit(feats[known])
        z_all = std.transform(feats)
        z_train = z_all[known]
        med = ocsvm.median_sq_distance(z_train)
        sel = ocsvm.select_hyperparameters(
            z_train,
            z_all,
            patch_image,
            labels,
            nu_grid=cfg.nu_grid,
            c_grid=[f * med for f in cfg.c_factors],
            tol=cfg.svm_tol,
        )
    except (ValueError, ocsvm.ConvergenceError) as exc:
        raise PipelineError("svm", str(exc)) from exc
    log.info("phase=svm nu_opt=%g c_opt=%.4g acc_img=%.4f", sel.nu, sel.c, sel.accuracy)

    g = ocsvm.decision(sel.model, z_all)
    targets = np.where(known, NORMAL, ocsvm.labels_from_decision(g))
    try:
        platt = fit_platt(
            g, targets, epochs=cfg.platt_epochs, batch_size=cfg.platt_batch_size, seed=cfg.seed
        )
    except ValueError as exc:
        raise PipelineError("platt", str(exc)) from exc
    log.info("phase=platt A=%.6g B=%.6g", platt.A, platt.B)

    return Bundle(
        model,
        std,
        sel.model,
        platt,
        cfg,
        sel.table,
        {"train": result.train_losses, "val": result.val_losses, "best_epoch": result.best_epoch},
    )


# -- inference --------------------------------------------------------------


@dataclass
class ImageResult:
    label: int
    probability_map: np.ndarray
    patch_probabilities: np.ndarray
    patch_decisions: np.ndarray
    offsets: np.ndarray
    coverage: np.ndarray

    @property
    def max_probability(self) -> float:
        return float(self.patch_probabilities.max())

    @property
    def patch_labels(self) -> np.ndarray:
        return np.where(self.patch_probabilities > 0, 1, -1)


def fuse_patch_labels(patch_labels) -> int:
    """Strict rule: abnormal if any patch is abnormal, otherwise normal."""
    return MALIGNANT if np.any(np.asarray(patch_labels) == MALIGNANT) else NORMAL


def build_probability_map(shape, offsets, size: int, probs) -> ProbabilityMap:
    pm = ProbabilityMap.empty(shape)
    for off, p in zip(offsets, probs):
        pm.add(off, size, float(p))
    return pm


def classify_image(bundle: Bundle, image, stride: int | None = None, threshold: float | None = None) -> ImageResult:
    """Label one preprocessed image and build its abnormality probability map.

    A patch is abnormal iff its calibrated probability exceeds ``threshold``
    (a tie counts as normal); the image is malignant iff any patch is.
    """
    cfg = bundle.config
    stride = cfg.stride if stride is None else stride
    threshold = cfg.threshold if threshold is None else threshold
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float64)
    size = cfg.patch_size
    offs = test_offsets(pixels.shape, size, stride)
    feats = []
    for start in range(0, len(offs), 64):
        chunk = cut_patches(pixels, offs[start : start + 64], size)
        feats.append(first_order_stats_batch(ae.residue(bundle.model, chunk), cfg.bins))
    z = bundle.standardizer.transform(np.concatenate(feats))
    g = ocsvm.decision(bundle.svm, z)
    p = probability(bundle.platt, g)
    patch_lab = np.where(p > threshold, MALIGNANT, NORMAL)
    pm = build_probability_map(pixels.shape, offs, size, p)
    res = ImageResult(fuse_patch_labels(patch_lab), pm.finalize(), p, g, offs, pm.count)
    return res


# -- evaluation -------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, truth, predicted) -> "ConfusionCounts":
        t = np.asarray(truth)
        p = np.asarray(predicted)
        return cls(
            int(np.sum((t == 1) & (p == 1))),
            int(np.sum((t == -1) & (p == 1))),
            int(np.sum((t == -1) & (p == -1))),
            int(np.sum((t == 1) & (p == -1))),
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


METRIC_NAMES = ("acc", "f1", "lr_pos", "lr_neg", "dor", "sensitivity", "specificity")


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def metrics(counts: ConfusionCounts) -> dict[str, float | None]:
    """Diagnostic metrics; any metric with a zero denominator is ``None``."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    acc = _ratio(tp + tn, counts.total)
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    prec = _ratio(tp, tp + fp)
    f1 = None
    if sens is not None and prec is not None:
        f1 = _ratio(2 * prec * sens, prec + sens)
    lr_pos = lr_neg = None
    if sens is not None and spec is not None:
        lr_pos = _ratio(sens, 1.0 - spec)
        lr_neg = _ratio(1.0 - sens, spec)
    dor = None
    if lr_pos is not None and lr_neg is not None:
        dor = _ratio(lr_pos, lr_neg)
    return {
        "acc": acc,
        "f1": f1,
        "lr_pos": lr_pos,
        "lr_neg": lr_neg,
        "dor": dor,
        "sensitivity": sens,
        "specificity": spec,
    }


def stratified_kfold(labels, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified ``(train_idx, test_idx)`` folds.

    Each class is shuffled and dealt round-robin, the second class starting
    where the first stopped, so fold sizes differ by at most one.
    """
    y = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    start = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} samples, fewer than k={k}")
        idx = rng.permutation(idx)
        fold_of[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds


@dataclass
class ImageRecord:
    id: str
    true_label: int
    predicted_label: int
    max_probability: float
    fold: int = -1


@dataclass
class CrossValResult:
    records: list[ImageRecord]
    pooled_counts: ConfusionCounts
    pooled: dict
    per_fold: list[dict]
    fold_mean: dict
    maps: dict = field(default_factory=dict)

    def summary(self) -> dict:
        c = self.pooled_counts
        return {
            "pooled_counts": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
            "pooled": self.pooled,
            "fold_mean": self.fold_mean,
            "per_fold": self.per_fold,
        }


def mean_metrics(per_fold: Iterable[dict]) -> dict:
    per_fold = list(per_fold)
    out = {}
    for name in METRIC_NAMES:
        vals = [m[name] for m in per_fold if m[name] is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def cross_validate(
    images: Sequence[LabeledImage],
    cfg: PipelineConfig | None = None,
    k: int = 10,
    seed: int = 0,
    keep_maps: bool = False,
) -> CrossValResult:
    """Stratified k-fold evaluation; every image is predicted exactly once.

    Metrics are reported both from confusion counts pooled over folds and
    as the mean of per-fold metrics.
    """
    cfg = cfg or PipelineConfig()
    labels = np.array([im.label for im in images])
    folds = stratified_kfold(labels, k, seed)
    records: list[ImageRecord] = []
    per_fold = []
    pooled = ConfusionCounts()
    maps = {}
    for f, (tr, te) in enumerate(folds):
        log.info("phase=crossval fold=%d/%d train=%d test=%d", f + 1, k, len(tr), len(te))
        bundle = train_pipeline([images[i] for i in tr], cfg)
        truth, pred = [], []
        for i in te:
            res = classify_image(bundle, images[i])
            records.append(ImageRecord(images[i].id, images[i].label, res.label, res.max_probability, f))
            truth.append(images[i].label)
            pred.append(res.label)
            if keep_maps:
                maps[images[i].id] = res.probability_map
        counts = ConfusionCounts.from_labels(truth, pred)
        pooled = pooled + counts
        per_fold.append(metrics(counts))
        log.info("phase=crossval fold=%d acc=%.4f", f + 1, per_fold[-1]["acc"])
    return CrossValResult(records, pooled, metrics(pooled), per_fold, mean_metrics(per_fold), maps)


# -- persistence ------------------------------------------------------------


def save_bundle(bundle: Bundle, path) -> None:
    """Single ``.npz`` container: autoencoder, standardiser, SVM, Platt and config."""
    meta = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "config": bundle.config.to_dict(),
        "svm": {
            "nu": bundle.svm.config.nu,
            "c": bundle.svm.config.c,
            "rho": bundle.svm.rho,
            "n_train": bundle.svm.n_train,
            "kkt_residual": bundle.svm.kkt_residual,
            "iterations": bundle.svm.iterations,
        },
        "platt": {"A": bundle.platt.A, "B": bundle.platt.B},
        "selection_table": bundle.selection_table,
        "ae_losses": bundle.ae_losses,
    }
    arrays = ae.model_arrays(bundle.model)
    arrays.update(
        std_mean=bundle.standardizer.mean,
        std_scale=bundle.standardizer.scale,
        std_constant=bundle.standardizer.constant,
        svm_support_vectors=bundle.svm.support_vectors,
        svm_lambdas=bundle.svm.lambdas,
        svm_support_index=bundle.svm.support_index if bundle.svm.support_index is not None else np.zeros(0, int),
    )
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_bundle(path) -> Bundle:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise BundleVersionError(f"{path}: not a readable bundle ({exc})") from exc
    with data:
        if "meta" not in data:
            raise BundleVersionError(f"{path}: missing bundle metadata")
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != BUNDLE_FORMAT:
            raise BundleVersionError(f"{path}: not a {BUNDLE_FORMAT} file")
        if meta.get("version") != BUNDLE_VERSION:
            raise BundleVersionError(
                f"{path}: bundle version {meta.get('version')} unsupported (expected {BUNDLE_VERSION})"
            )
        model = ae.model_from_arrays(data)
        std = Standardizer(data["std_mean"].copy(), data["std_scale"].copy(), data["std_constant"].copy())
        s = meta["svm"]
        svm = ocsvm.OcSvmModel(
            data["svm_support_vectors"].copy(),
            data["svm_lambdas"].copy(),
            float(s["rho"]),
            ocsvm.OcSvmConfig(float(s["nu"]), float(s["c"])),
            int(s["n_train"]),
            float(s["kkt_residual"]),
            int(s["iterations"]),
            data["svm_support_index"].copy(),
        )
    platt = PlattModel(float(meta["platt"]["A"]), float(meta["platt"]["B"]))
    cfg = PipelineConfig.from_dict(meta["config"])
    return Bundle(model, std, svm, platt, cfg, meta.get("selection_table", []), meta.get("ae_losses", {}))
