"""Command-line front end: ``synth``, ``train``, ``evaluate``, ``map`` and ``crossval``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import autoencoder as ae
from .io import ImageFormatError, ManifestError, read_image, read_manifest, to_grayscale, write_json
from .io import write_probability_map, write_results
from .pipeline import (
    BundleVersionError,
    ConfusionCounts,
    ImageRecord,
    PipelineConfig,
    PipelineError,
    classify_image,
    cross_validate,
    load_bundle,
    metrics,
    save_bundle,
    train_pipeline,
)
from .synthetic import SyntheticSpec, generate_synthetic

OUT_DIR_ENV = "PATCHMINE_OUT_DIR"
COMMANDS = ("train", "evaluate", "map", "synth", "crossval")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BAD_INPUT = 4
EXIT_BUNDLE = 5
EXIT_PIPELINE = 6

log = logging.getLogger("patchmine")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    manifest: Path | None = None
    bundle: Path | None = None
    image: Path | None = None
    out_dir: Path = Path("patchmine_out")
    seed: int = 0
    folds: int = 10
    keep_maps: bool = False
    overrides: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def pipeline_config(self) -> PipelineConfig:
        o = self.overrides
        ae_cfg = ae.TrainConfig(
            epochs=o.get("epochs", 100),
            batch_size=o.get("batch_size", 32),
            loss=o.get("loss", "ssim"),
            augment=o.get("augment", True),
            seed=self.seed,
        )
        kwargs = {k: o[k] for k in ("patch_size", "train_patches", "stride", "threshold", "bins") if k in o}
        if "nu_grid" in o:
            kwargs["nu_grid"] = tuple(o["nu_grid"])
        if "c_grid" in o:
            kwargs["c_factors"] = tuple(o["c_grid"])
        if "platt_epochs" in o:
            kwargs["platt_epochs"] = o["platt_epochs"]
        return PipelineConfig(seed=self.seed, ae=ae_cfg, **kwargs)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(seed=self.seed, **self.synth)

    def validate(self) -> None:
        """Check every argument against the downstream preconditions before any work."""
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        needs_manifest = self.command in ("train", "evaluate", "crossval")
        if needs_manifest and self.manifest is None:
            raise ConfigError(f"{self.command} requires --manifest")
        if self.command in ("train", "evaluate", "map") and self.bundle is None:
            raise ConfigError(f"{self.command} requires --bundle")
        if self.command == "map" and self.image is None and self.manifest is None:
            raise ConfigError("map requires --image or --manifest")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        try:
            if self.command == "synth":
                self.synthetic_spec().validate()
            else:
                self.pipeline_config().validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.command == "crossval" and self.folds < 2:
            raise ConfigError("--folds must be >= 2")
        stride = self.overrides.get("stride")
        if stride is not None and stride < 1:
            raise ConfigError("--stride must be >= 1")
        for p in (self.manifest, self.image):
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"no such file: {p}")
        if self.command in ("evaluate", "map") and not Path(self.bundle).is_file():
            raise FileNotFoundError(f"no such bundle: {self.bundle}")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchmine", description="Patch-based anomaly diagnosis for tissue images.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, manifest=False, bundle=False, training=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", type=Path, default=None, help=f"defaults to ${OUT_DIR_ENV} or ./patchmine_out")
        if manifest:
            p.add_argument("--manifest", type=Path)
        if bundle:
            p.add_argument("--bundle", type=Path)
        p.add_argument("--stride", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--patch-size", type=int)
        if training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--loss", choices=("ssim", "mse"))
            p.add_argument("--no-augment", action="store_true")
            p.add_argument("--train-patches", type=int)
            p.add_argument("--bins", type=int)
            p.add_argument("--nu-grid", type=_floats)
            p.add_argument("--c-grid", type=_floats, help="multiples of the median squared feature distance")
            p.add_argument("--platt-epochs", type=int)

    common(sub.add_parser("train", help="fit a bundle on a manifest"), manifest=True, bundle=True, training=True)
    common(sub.add_parser("evaluate", help="classify a manifest with a bundle"), manifest=True, bundle=True)
    p_map = sub.add_parser("map", help="probability maps for one image or a manifest")
    common(p_map, manifest=True, bundle=True)
    p_map.add_argument("--image", type=Path)
    p_cv = sub.add_parser("crossval", help="stratified k-fold evaluation")
    common(p_cv, manifest=True, training=True)
    p_cv.add_argument("--folds", type=int, default=10)
    p_cv.add_argument("--keep-maps", action="store_true")
    p_syn = sub.add_parser("synth", help="generate a synthetic dataset")
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--out-dir", type=Path, default=None)
    p_syn.add_argument("--n-normal", type=int, default=20)
    p_syn.add_argument("--n-abnormal", type=int, default=20)
    p_syn.add_argument("--height", type=int, default=512)
    p_syn.add_argument("--width", type=int, default=512)
    p_syn.add_argument("--patch-size", type=int, default=128)
    p_syn.add_argument("--clusters", type=int, default=1)
    p_syn.add_argument("--region-min", type=int, default=192)
    p_syn.add_argument("--region-max", type=int, default=320)
    p_syn.add_argument("--noise", type=float, default=0.03)
    return parser


_OVERRIDE_FLAGS = (
    "epochs", "batch_size", "loss", "train_patches", "bins", "nu_grid",
    "c_grid", "platt_epochs", "stride", "threshold", "patch_size",
)
_SYNTH_FLAGS = (
    "n_normal", "n_abnormal", "height", "width", "patch_size", "clusters", "region_min", "region_max", "noise",
)


def config_from_args(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    out_dir = args.out_dir or Path(environ.get(OUT_DIR_ENV, "patchmine_out"))
    cfg = RunConfig(command=args.command, out_dir=Path(out_dir), seed=args.seed)
    if args.command == "synth":
        cfg.synth = {k: getattr(args, k) for k in _SYNTH_FLAGS}
        return cfg
    cfg.manifest = getattr(args, "manifest", None)
    cfg.bundle = getattr(args, "bundle", None)
    cfg.image = getattr(args, "image", None)
    cfg.folds = getattr(args, "folds", 10)
    cfg.keep_maps = getattr(args, "keep_maps", False)
    cfg.overrides = {k: getattr(args, k) for k in _OVERRIDE_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "no_augment", False):
        cfg.overrides["augment"] = False
    return cfg


# -- commands ---------------------------------------------------------------


def _load_manifest(cfg: RunConfig, both_classes: bool):
    manifest = read_manifest(cfg.manifest)
    if both_classes:
        manifest.require_both_classes()
    return manifest, manifest.load_images()


def _apply_inference_overrides(bundle, cfg: RunConfig):
    o = cfg.overrides
    if "patch_size" in o and o["patch_size"] != bundle.config.patch_size:
        raise ConfigError(f"bundle was trained on {bundle.config.patch_size}px patches, not {o['patch_size']}")
    return o.get("stride"), o.get("threshold")


def cmd_synth(cfg: RunConfig) -> int:
    manifest = generate_synthetic(cfg.synthetic_spec(), cfg.out_dir)
    log.info("phase=synth manifest=%s", manifest)
    print(manifest)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _, images = _load_manifest(cfg, both_classes=True)
    bundle = train_pipeline(images, cfg.pipeline_config())
    Path(cfg.bundle).parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, cfg.bundle)
    log.info("phase=train bundle=%s nu=%g c=%.4g", cfg.bundle, bundle.svm.config.nu, bundle.svm.config.c)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg.bundle)
    stride, threshold = _apply_inference_overrides(bundle, cfg)
    _, images = _load_manifest(cfg, both_classes=False)
    records = []
    for im in images:
        res = classify_image(bundle, im, stride, threshold)
        records.append(ImageRecord(im.id, im.label, res.label, res.max_probability))
        log.info("phase=evaluate id=%s label=%d max_p=%.4f", im.id, res.label, res.max_probability)
    counts = ConfusionCounts.from_labels([r.true_label for r in records], [r.predicted_label for r in records])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_results(cfg.out_dir / "results.csv", records)
    write_json(cfg.out_dir / "metrics.json", {"counts": dataclasses.asdict(counts), "metrics": metrics(counts)})
    return EXIT_OK


def cmd_map(cfg: RunConfig) -> int:
    bundle = load_bundle(cfg.bundle)
    stride, threshold = _apply_inference_overrides(bundle, cfg)
    if cfg.image is not None:
        targets = [(Path(cfg.image).stem, to_grayscale(read_image(cfg.image)))]
    else:
        _, images = _load_manifest(cfg, both_classes=False)
        targets = [(im.id, im.pixels) for im in images]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for ident, pixels in targets:
        res = classify_image(bundle, pixels, stride, threshold)
        write_probability_map(cfg.out_dir / f"{ident}_map", res.probability_map)
        records.append({"id": ident, "label": res.label, "max_probability": res.max_probability,
                        "map_max": float(res.probability_map.max())})
        log.info("phase=map id=%s label=%d map_max=%.4f", ident, res.label, res.probability_map.max())
    write_json(cfg.out_dir / "maps.json", records)
    return EXIT_OK


def cmd_crossval(cfg: RunConfig) -> int:
    _, images = _load_manifest(cfg, both_classes=True)
    result = cross_validate(images, cfg.pipeline_config(), k=cfg.folds, seed=cfg.seed, keep_maps=cfg.keep_maps)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_results(cfg.out_dir / "results.csv", result.records)
    write_json(cfg.out_dir / "metrics.json", result.summary())
    if result.maps:
        (cfg.out_dir / "maps").mkdir(exist_ok=True)
    for ident, pm in result.maps.items():
        write_probability_map(cfg.out_dir / "maps" / f"{ident}_map", pm)
    pooled = result.pooled
    print(
        "pooled "
        + " ".join(f"{k}={'undefined' if v is None else f'{v:.4f}'}" for k, v in pooled.items())
    )
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "map": cmd_map, "crossval": cmd_crossval}


def run(cfg: RunConfig) -> int:
    """Validate ``cfg`` then execute its command; returns a process exit status."""
    try:
        cfg.validate()
        return HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except (ManifestError, ImageFormatError) as exc:
        log.error("bad input: %s", exc)
        return EXIT_BAD_INPUT
    except BundleVersionError as exc:
        log.error("bundle error: %s", exc)
        return EXIT_BUNDLE
    except PipelineError as exc:
        log.error("pipeline failed in phase %s: %s", exc.phase, exc)
        return EXIT_PIPELINE
    except ValueError as exc:
        # e.g. an image smaller than the patch size
        log.error("bad input: %s", exc)
        return EXIT_BAD_INPUT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
