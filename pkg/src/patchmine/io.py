"""File formats: images, dataset manifests, per-image results, metrics and maps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .pipeline import MALIGNANT, NORMAL, ImageRecord, LabeledImage, preprocess

LABEL_NAMES = {"normal": NORMAL, "malignant": MALIGNANT}
SUPPORTED_SUFFIXES = {".pgm", ".ppm", ".pnm", ".png"}


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# -- images -----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale ``(H, W)`` or RGB ``(H, W, 3)`` image.

    The whole file is decoded before anything is returned, so a truncated
    file raises instead of yielding a partial grid.
    """
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            arr = np.array(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def write_image(path, pixels) -> None:
    """Encode an 8-bit ``(H, W)`` or ``(H, W, 3)`` array; format follows the suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        mode = "L"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        mode = "RGB"
    else:
        raise ImageFormatError(f"expected (H, W) or (H, W, 3), got shape {arr.shape}")
    if suffix in (".pgm", ".ppm", ".pnm") and (suffix == ".pgm") != (mode == "L"):
        raise ImageFormatError(f"{suffix} cannot hold a {mode} image")
    Image.fromarray(arr, mode).save(path, format="PNG" if suffix == ".png" else "PPM")


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Decoded 8-bit image -> preprocessed grayscale in ``[0, 1]``."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        return preprocess(arr)
    return arr.astype(np.float64) / 255.0


def to_uint8(gray) -> np.ndarray:
    return np.clip(np.round(np.asarray(gray, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    @property
    def n_normal(self) -> int:
        return sum(e.label == NORMAL for e in self.entries)

    @property
    def n_malignant(self) -> int:
        return sum(e.label == MALIGNANT for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def require_both_classes(self) -> None:
        if self.n_normal == 0 or self.n_malignant == 0:
            raise ManifestError(
                f"manifest needs both classes (normal={self.n_normal}, malignant={self.n_malignant})"
            )

    def load_images(self) -> list[LabeledImage]:
        return [LabeledImage(to_grayscale(read_image(e.path)), e.label, e.id) for e in self.entries]


def read_manifest(path) -> DatasetManifest:
    """Columns ``path, label, id``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot open manifest ({exc.strerror})") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label", "id"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain path, label, id")
        entries, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            label = (row["label"] or "").strip().lower()
            if label not in LABEL_NAMES:
                raise ManifestError(f"{path}:{lineno}: label must be normal or malignant, got {row['label']!r}")
            ident = (row["id"] or "").strip()
            if not ident or ident in seen:
                raise ManifestError(f"{path}:{lineno}: missing or duplicate id {ident!r}")
            seen.add(ident)
            p = Path(row["path"].strip())
            entries.append(ManifestEntry(p if p.is_absolute() else path.parent / p, LABEL_NAMES[label], ident))
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return DatasetManifest(entries)


def write_manifest(path, entries) -> None:
    path = Path(path)
    names = {v: k for k, v in LABEL_NAMES.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "id"])
        for e in entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([p.as_posix(), names[e.label], e.id])


# -- results ----------------------------------------------------------------


def write_results(path, records: list[ImageRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "true_label", "predicted_label", "max_probability", "fold"])
        for r in records:
            w.writerow([r.id, r.true_label, r.predicted_label, repr(r.max_probability), r.fold])


def read_results(path) -> list[ImageRecord]:
    with open(path, newline="") as fh:
        return [
            ImageRecord(r["id"], int(r["true_label"]), int(r["predicted_label"]), float(r["max_probability"]), int(r["fold"]))
            for r in csv.DictReader(fh)
        ]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_probability_map(stem, prob: np.ndarray, raw: bool = True) -> tuple[Path, Path | None]:
    """``<stem>.png`` holds ``round(255 p)``; ``<stem>.npy`` the exact float32 values."""
    stem = Path(stem)
    p = np.asarray(prob, dtype=np.float64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probability map values must lie in [0, 1]")
    png = stem.with_suffix(".png")
    write_image(png, to_uint8(p))
    npy = None
    if raw:
        npy = stem.with_suffix(".npy")
        np.save(npy, p.astype(np.float32))
    return png, npy
