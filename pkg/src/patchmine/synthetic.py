"""Synthetic tissue-like images with known abnormal regions.

Normal texture is a jittered lattice of round dark blobs on a light
background.  Abnormal images add rectangular regions packed with denser,
darker, irregular elliptical blobs; those rectangles are the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io import ManifestEntry, to_grayscale, write_image, write_manifest
from .pipeline import MALIGNANT, NORMAL, LabeledImage

# stain-like tint applied to the grayscale render before encoding as RGB
TINT = (0.96, 0.72, 0.86)
BACKGROUND = 0.88


@dataclass(frozen=True)
class SyntheticSpec:
    n_normal: int = 20
    n_abnormal: int = 20
    height: int = 512
    width: int = 512
    patch_size: int = 128
    blob_radius: float = 5.0
    spacing: float = 22.0
    jitter: float = 3.0
    blob_depth: float = 0.35
    # per-image and per-blob variation of the normal texture
    image_variation: float = 0.25
    large_blob_rate: float = 0.05
    clusters: int = 1
    region_min: int = 192
    region_max: int = 320
    cluster_density: float = 4.0  # cluster blobs per lattice cell
    radius_spread: float = 0.6
    cluster_depth: float = 0.6
    noise: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if self.n_normal < 1 or self.n_abnormal < 1:
            raise ValueError("need at least one image per class")
        if min(self.height, self.width) < self.patch_size:
            raise ValueError(f"image {self.height}x{self.width} smaller than patch {self.patch_size}")
        if self.clusters < 1:
            raise ValueError("abnormal images need at least one cluster region")
        if not 1 <= self.region_min <= self.region_max:
            raise ValueError("need 1 <= region_min <= region_max")
        if self.region_max > min(self.height, self.width):
            raise ValueError(f"cluster region up to {self.region_max} px does not fit a {self.height}x{self.width} image")
        if self.blob_radius <= 0 or self.spacing <= 0 or self.jitter < 0:
            raise ValueError("blob radius and spacing must be positive, jitter nonnegative")
        if self.cluster_density <= 0 or not 0 <= self.radius_spread < 1:
            raise ValueError("cluster_density must be positive and radius_spread in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not 0 <= self.image_variation < 1 or not 0 <= self.large_blob_rate <= 1:
            raise ValueError("image_variation must lie in [0, 1) and large_blob_rate in [0, 1]")


@dataclass
class SyntheticImage:
    rgb: np.ndarray  # (H, W, 3) uint8
    label: int
    id: str
    boxes: list[tuple[int, int, int, int]]  # (y0, x0, y1, x1), end exclusive
    abnormal_mask: np.ndarray  # pixels altered by cluster blobs

    def to_labeled(self) -> LabeledImage:
        return LabeledImage(to_grayscale(self.rgb), self.label, self.id)


def region_mask(boxes, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for y0, x0, y1, x1 in boxes:
        m[y0:y1, x0:x1] = True
    return m


def _stamp(cover: np.ndarray, cy, cx, ry, rx, theta, depth, clip=None) -> None:
    """Max-composite an anti-aliased filled ellipse into ``cover``."""
    h, w = cover.shape
    y0, y1, x0, x1 = 0, h, 0, w
    if clip is not None:
        y0, x0, y1, x1 = clip
    r = max(ry, rx) + 1.5
    ya, yb = max(int(cy - r), y0), min(int(cy + r) + 2, y1)
    xa, xb = max(int(cx - r), x0), min(int(cx + r) + 2, x1)
    if ya >= yb or xa >= xb:
        return
    yy, xx = np.mgrid[ya:yb, xa:xb]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    # signed distance approximation in pixels, scaled by the mean radius
    q = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    prof = np.clip((1.0 - q) * 0.5 * (rx + ry) + 0.5, 0.0, 1.0) * depth
    np.maximum(cover[ya:yb, xa:xb], prof, out=cover[ya:yb, xa:xb])


def _lattice(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    cover = np.zeros((spec.height, spec.width))
    v = spec.image_variation
    spacing = spec.spacing * rng.uniform(1 - v, 1 + v)
    radius = spec.blob_radius * rng.uniform(1 - v, 1 + v)
    depth = spec.blob_depth * rng.uniform(1 - v, 1 + v)
    phase = rng.uniform(0, spacing, 2)
    ys = np.arange(phase[0] - spacing, spec.height + spacing, spacing)
    xs = np.arange(phase[1] - spacing, spec.width + spacing, spacing)
    for i, y in enumerate(ys):
        shift = 0.5 * spacing * (i % 2)  # hexagonal-ish rows
        for x in xs:
            jy, jx = rng.uniform(-spec.jitter, spec.jitter, 2)
            rad = radius * rng.uniform(0.85, 1.15)
            d = depth
            if rng.random() < spec.large_blob_rate:
                rad, d = rad * 1.5, min(1.6 * depth, spec.cluster_depth)
            _stamp(cover, y + jy, x + shift + jx, rad, rad, 0.0, d)
    return cover


def _clusters(spec: SyntheticSpec, rng: np.random.Generator):
    cover = np.zeros((spec.height, spec.width))
    boxes = []
    for _ in range(spec.clusters):
        bh, bw = rng.integers(spec.region_min, spec.region_max + 1, 2)
        y0 = int(rng.integers(0, spec.height - bh + 1))
        x0 = int(rng.integers(0, spec.width - bw + 1))
        box = (y0, x0, y0 + int(bh), x0 + int(bw))
        boxes.append(box)
        n = int(round(spec.cluster_density * bh * bw / spec.spacing**2))
        for _ in range(n):
            cy, cx = rng.uniform(y0, y0 + bh), rng.uniform(x0, x0 + bw)
            ry, rx = spec.blob_radius * rng.uniform(1 - spec.radius_spread, 1 + spec.radius_spread, 2)
            depth = spec.cluster_depth * rng.uniform(0.8, 1.0)
            _stamp(cover, cy, cx, ry, rx, rng.uniform(0, np.pi), depth, clip=box)
    return cover, boxes


def render_image(spec: SyntheticSpec, label: int, ident: str, rng: np.random.Generator) -> SyntheticImage:
    lattice = _lattice(spec, rng)
    if label == MALIGNANT:
        extra, boxes = _clusters(spec, rng)
        mask = extra > lattice
        cover = np.maximum(lattice, extra)
    else:
        boxes, mask, cover = [], np.zeros(lattice.shape, dtype=bool), lattice
    gray = BACKGROUND - cover
    rgb = np.stack([gray * t for t in TINT], axis=-1)
    rgb = rgb + rng.normal(0.0, spec.noise, rgb.shape)
    rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return SyntheticImage(rgb, label, ident, boxes, mask)


def render_dataset(spec: SyntheticSpec) -> list[SyntheticImage]:
    """All images, normal first; each draws from its own child seed."""
    spec.validate()
    labels = [NORMAL] * spec.n_normal + [MALIGNANT] * spec.n_abnormal
    seeds = np.random.SeedSequence(spec.seed).spawn(len(labels))
    out = []
    for k, (lab, ss) in enumerate(zip(labels, seeds)):
        ident = f"{'normal' if lab == NORMAL else 'abnormal'}_{k:04d}"
        out.append(render_image(spec, lab, ident, np.random.default_rng(ss)))
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, ground-truth region files and a manifest; returns the manifest path."""
    images = render_dataset(spec)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "regions").mkdir(exist_ok=True)
    entries = []
    for im in images:
        path = out / "images" / f"{im.id}.ppm"
        write_image(path, im.rgb)
        with open(out / "regions" / f"{im.id}.json", "w") as fh:
            json.dump({"id": im.id, "boxes": [list(b) for b in im.boxes]}, fh)
        entries.append(ManifestEntry(path, im.label, im.id))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    with open(out / "synthetic_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
    return manifest


def read_regions(path) -> list[tuple[int, int, int, int]]:
    with open(path) as fh:
        return [tuple(int(v) for v in b) for b in json.load(fh)["boxes"]]
