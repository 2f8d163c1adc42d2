"""First-order statistics of autoencoder residues, and feature standardisation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_NAMES: tuple[str, ...] = (
    "energy",
    "minimum",
    "maximum",
    "p10",
    "p90",
    "mean",
    "median",
    "interquartile_range",
    "range",
    "mean_absolute_deviation",
    "robust_mean_absolute_deviation",
    "variance",
    "skewness",
    "kurtosis",
    "entropy",
    "uniformity",
)
N_FEATURES = len(FEATURE_NAMES)
DEFAULT_BINS = 32


def first_order_stats(residue, bins: int = DEFAULT_BINS) -> np.ndarray:
    """The 16 first-order statistics of one residue map, in ``FEATURE_NAMES`` order.

    Population moments are used; skewness is ``m3 / m2**1.5`` and kurtosis
    ``m4 / m2**2`` (both defined as 0 when the variance is 0).  The robust
    MAD is taken over values inside ``[p10, p90]``.  Entropy (natural log)
    and uniformity come from a ``bins``-bin histogram over ``[0, 1]``.
    """
    v = np.asarray(residue, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarise an empty residue")
    return first_order_stats_batch(v.reshape(1, -1), bins)[0]


def first_order_stats_batch(residues, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Row-wise :func:`first_order_stats` for ``(n, ...)`` residues; returns ``(n, 16)``."""
    r = np.asarray(residues, dtype=np.float64)
    if r.ndim < 1 or r.shape[0] == 0:
        raise ValueError("need at least one residue")
    v = r.reshape(r.shape[0], -1)
    if v.shape[1] == 0:
        raise ValueError("cannot summarise an empty residue")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    n = v.shape[1]

    p10, p25, p50, p75, p90 = np.percentile(v, [10, 25, 50, 75, 90], axis=1)
    vmin, vmax = v.min(axis=1), v.max(axis=1)
    degenerate = vmax == vmin
    # exact mean for constant rows so their central moments vanish exactly
    mu = np.where(degenerate, vmin, v.mean(axis=1))
    dev = v - mu[:, None]
    m2 = np.mean(dev**2, axis=1)
    m3 = np.mean(dev**3, axis=1)
    m4 = np.mean(dev**4, axis=1)
    safe = np.where(degenerate, 1.0, m2)
    skew = np.where(degenerate, 0.0, m3 / safe**1.5)
    kurt = np.where(degenerate, 0.0, m4 / safe**2)

    inner = (v >= p10[:, None]) & (v <= p90[:, None])
    cnt = inner.sum(axis=1)
    inner_mean = np.where(degenerate, vmin, np.where(inner, v, 0.0).sum(axis=1) / cnt)
    rmad = np.where(inner, np.abs(v - inner_mean[:, None]), 0.0).sum(axis=1) / cnt

    idx = np.clip((np.clip(v, 0.0, 1.0) * bins).astype(np.int64), 0, bins - 1)
    idx += np.arange(v.shape[0])[:, None] * bins
    counts = np.bincount(idx.ravel(), minlength=v.shape[0] * bins).reshape(v.shape[0], bins)
    prob = counts / n
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.where(prob > 0, prob * np.log(prob), 0.0).sum(axis=1)
    uniformity = (prob**2).sum(axis=1)

    return np.column_stack(
        [
            np.sum(v * v, axis=1),
            vmin,
            vmax,
            p10,
            p90,
            mu,
            p50,
            p75 - p25,
            vmax - vmin,
            np.abs(dev).mean(axis=1),
            rmad,
            m2,
            skew,
            kurt,
            np.maximum(entropy, 0.0),
            uniformity,
        ]
    )


@dataclass
class Standardizer:
    """Per-dimension centring and scaling frozen from true-normal training features.

    Dimensions with (numerically) zero spread are centred only and listed in
    ``constant``.
    """

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, features) -> "Standardizer":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or len(f) == 0:
            raise ValueError(f"need a non-empty (n, d) feature matrix, got shape {f.shape}")
        mean = f.mean(axis=0)
        std = f.std(axis=0)
        constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean, np.where(constant, 1.0, std), constant)

    def transform(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"feature dimension {f.shape[-1]} != {self.mean.shape[0]}")
        return (f - self.mean) / self.scale


def standardize(train_features, *others):
    """Fit on ``train_features`` and return the standardizer plus transformed arrays."""
    st = Standardizer.fit(train_features)
    return (st, st.transform(train_features), *(st.transform(o) for o in others))


def write_feature_matrix(path, features, patch_ids, image_ids) -> None:
    """Delimited text export: ``patch_id, image_id`` then the 16 named columns."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != N_FEATURES:
        raise ValueError(f"expected (n, {N_FEATURES}) features, got shape {f.shape}")
    if not (len(patch_ids) == len(image_ids) == len(f)):
        raise ValueError("patch_ids, image_ids and features must have equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "image_id", *FEATURE_NAMES])
        for pid, iid, row in zip(patch_ids, image_ids, f):
            w.writerow([pid, iid, *(repr(float(x)) for x in row)])


def read_feature_matrix(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["patch_id", "image_id", *FEATURE_NAMES]:
            raise ValueError(f"unexpected feature header in {path}")
        rows = list(r)
    feats = np.array([[float(x) for x in row[2:]] for row in rows]).reshape(-1, N_FEATURES)
    return feats, [row[0] for row in rows], [row[1] for row in rows]
