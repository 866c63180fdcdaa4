"""Pooled ResNet-50 feature extraction into BNCF files."""

from .extract import ExtractionJob, VerifyReport, build_backbone, discover_classes, extract, verify

__version__ = "0.1.0"

__all__ = [
    "ExtractionJob",
    "VerifyReport",
    "build_backbone",
    "discover_classes",
    "extract",
    "verify",
    "__version__",
]
