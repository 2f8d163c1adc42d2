"""Patch-level anomaly mining for weakly labelled images."""

from .pipeline import (
    Bundle,
    PipelineConfig,
    classify_image,
    cross_validate,
    load_bundle,
    metrics,
    save_bundle,
    train_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "Bundle",
    "PipelineConfig",
    "classify_image",
    "cross_validate",
    "load_bundle",
    "metrics",
    "save_bundle",
    "train_pipeline",
]
