"""Batch-normalization classifier head for source-free domain adaptation.

A small, fully self-contained training stack over pre-extracted backbone
features: deterministic linear algebra and PRNG, hand-derived layer
gradients, entropy-based source-free adaptation, a synthetic domain-shift
benchmark, and distribution analysis tooling.
"""

from .data import BatchIterator, FeatureDataset, ShiftSpec, generate_shift_pair, read_features, write_features
from .model import ActivationTaps, BncModel, ModelConfig, load_model
from .training import RunConfig, RunMetrics, adapt_cotrained, adapt_target, run_benchmark, train_source

__version__ = "0.1.0"

__all__ = [
    "ActivationTaps",
    "BatchIterator",
    "BncModel",
    "FeatureDataset",
    "ModelConfig",
    "RunConfig",
    "RunMetrics",
    "ShiftSpec",
    "__version__",
    "adapt_cotrained",
    "adapt_target",
    "generate_shift_pair",
    "load_model",
    "read_features",
    "run_benchmark",
    "train_source",
    "write_features",
]
