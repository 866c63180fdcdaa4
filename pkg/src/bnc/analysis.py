"""Diagnostics over a trained model: accuracy, channel-output histograms
split by correct vs other class, FC-weight sparsity, and a 2-D principal
component projection of the softmax inputs.

All passes run the model in measurement mode (dropout off, running
statistics untouched); the ``eval_stats`` flag selects running or batch
normalization statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ConvergenceError, DomainError, UsageError
from .linalg import Matrix, SeededRng
from .model import ActivationTaps, BncModel
from .data import FeatureDataset

DEFAULT_BINS = 80
DEFAULT_SPARSITY_THRESHOLD = 1e-2
_PCA_TOL = 1e-10
_PCA_MAX_ITER = 100_000
_PCA_SEED = 0x9C0FFEE


@dataclass
class Histogram:
    bin_edges: np.ndarray  # uniform width, len(counts) + 1
    counts: np.ndarray
    normalized: bool
    tag: str

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def densities(self) -> np.ndarray:
        """Per-bin density; integrates to 1 when any samples were pooled."""
        if self.total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        widths = np.diff(self.bin_edges)
        return self.counts / (self.total * widths)


@dataclass
class LayerSparsity:
    layer: str
    fraction_near_zero: float
    mean_abs_weight: float
    histogram: Histogram


@dataclass
class SparsityReport:
    threshold: float
    layers: list[LayerSparsity]


def make_histogram(values, bins: int = DEFAULT_BINS, tag: str = "", edges: np.ndarray | None = None) -> Histogram:
    """Uniform-bin histogram spanning [min, max] of the pooled values.

    A constant pool gets a unit-width bin around the value; an empty pool
    yields a histogram with no bins (exported as a header-only CSV).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if edges is None:
        if values.size == 0:
            return Histogram(np.zeros(1), np.zeros(0, dtype=np.int64), True, tag)
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts.astype(np.int64), True, tag)


def accuracy(model: BncModel, ds: FeatureDataset, eval_stats: str = "running") -> float:
    """Fraction of rows whose predicted class matches the label.

    Argmax ties break toward the lowest class index. The whole dataset is
    forwarded as a single batch so batch statistics, when selected, are the
    dataset's own.
    """
    if ds.labels is None:
        raise UsageError("accuracy requires a labeled dataset")
    probs = model.inference_forward(ds.features, stats=eval_stats)
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels))


def _tap_values(model: BncModel, ds: FeatureDataset, layer_tap: str, eval_stats: str) -> Matrix:
    if layer_tap not in ("fc2_out", "sm_in"):
        raise DomainError(f"unknown tap {layer_tap!r}, expected fc2_out or sm_in")
    taps = ActivationTaps()
    model.inference_forward(ds.features, taps=taps, stats=eval_stats)
    return taps.fc2_out if layer_tap == "fc2_out" else taps.sm_in


def pooled_class_values(
    model: BncModel, ds: FeatureDataset, layer_tap: str, eval_stats: str = "running"
) -> tuple[np.ndarray, np.ndarray]:
    """Tapped activations pooled into the true-class channel values (one per
    sample) and all remaining-channel values (k-1 per sample)."""
    if ds.labels is None:
        raise UsageError("class-split pooling requires a labeled dataset")
    values = _tap_values(model, ds, layer_tap, eval_stats)
    rows = np.arange(values.shape[0])
    correct = values[rows, ds.labels]
    mask = np.ones_like(values, dtype=bool)
    mask[rows, ds.labels] = False
    other = values[mask]
    return correct, other


def channel_histograms(
    model: BncModel,
    ds: FeatureDataset,
    layer_tap: str = "sm_in",
    bins: int = DEFAULT_BINS,
    eval_stats: str = "running",
) -> tuple[Histogram, Histogram, list[Histogram]]:
    """Correct-class and other-class histograms on shared bin edges, plus
    per-channel histograms for the first four channels (also shared edges)."""
    correct, other = pooled_class_values(model, ds, layer_tap, eval_stats)
    values = _tap_values(model, ds, layer_tap, eval_stats)
    pooled = np.concatenate([correct, other])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    correct_hist = make_histogram(correct, tag=f"{layer_tap}_correct", edges=edges)
    other_hist = make_histogram(other, tag=f"{layer_tap}_other", edges=edges)
    n_channels = min(4, values.shape[1])
    chan_values = values[:, :n_channels]
    clo, chi = float(chan_values.min()), float(chan_values.max())
    if clo == chi:
        clo, chi = clo - 0.5, chi + 0.5
    chan_edges = np.linspace(clo, chi, bins + 1)
    per_channel = [
        make_histogram(values[:, c], tag=f"{layer_tap}_channel{c}", edges=chan_edges)
        for c in range(n_channels)
    ]
    return correct_hist, other_hist, per_channel


def separation(model: BncModel, ds: FeatureDataset, layer_tap: str = "sm_in", eval_stats: str = "running") -> float:
    """Mean true-class channel value minus mean other-class value."""
    correct, other = pooled_class_values(model, ds, layer_tap, eval_stats)
    return float(correct.mean() - other.mean())


def weight_sparsity(model: BncModel, threshold: float = DEFAULT_SPARSITY_THRESHOLD) -> SparsityReport:
    """Near-zero fraction, mean magnitude, and a histogram per FC weight matrix."""
    if threshold <= 0:
        raise DomainError(f"threshold must be > 0, got {threshold}")
    layers = []
    for name, weights in (("fc1", model.fc1.weight), ("fc2", model.fc2.weight)):
        flat = weights.ravel()
        layers.append(
            LayerSparsity(
                layer=name,
                fraction_near_zero=float(np.mean(np.abs(flat) < threshold)),
                mean_abs_weight=float(np.mean(np.abs(flat))),
                histogram=make_histogram(flat, tag=f"{name}_weights"),
            )
        )
    return SparsityReport(threshold=threshold, layers=layers)


# -- 2-D projection -----------------------------------------------------------

def _power_iteration(cov: Matrix, start: np.ndarray) -> tuple[float, np.ndarray]:
    v = start / np.linalg.norm(start)
    for _ in range(_PCA_MAX_ITER):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v  # null component; any unit vector is an eigenvector
        w /= norm
        if np.linalg.norm(w - v) < _PCA_TOL:
            return float(norm), w
        v = w
    raise ConvergenceError("power iteration did not converge")


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def pca_2d(values: Matrix) -> tuple[Matrix, Matrix]:
    """Top-2 principal components by power iteration with deflation.

    The largest-magnitude loading of each component is made positive so the
    output is sign-deterministic. Returns (N x 2 coordinates, 2 x D
    component rows).
    """
    values = linalg.as_matrix(values, "values")
    if values.shape[0] < 3:
        raise DomainError(f"projection needs at least 3 rows, got {values.shape[0]}")
    centered = values - values.mean(axis=0)
    cov = (centered.T @ centered) / centered.shape[0]
    total_var = float(np.trace(cov))
    if total_var <= 0.0:
        raise DomainError("projection is degenerate: the data has zero variance")
    rng = SeededRng(_PCA_SEED)
    start = linalg.randn(rng, cov.shape[0], 1)[:, 0]
    lam1, v1 = _power_iteration(cov, start)
    if lam1 <= 0.0:
        raise DomainError("projection is degenerate: no positive-variance direction")
    deflated = cov - lam1 * np.outer(v1, v1)
    if np.linalg.norm(deflated, ord="fro") <= _PCA_TOL * lam1:
        # rank-1 data: complete with a deterministic orthogonal direction
        e = np.zeros(cov.shape[0])
        e[int(np.argmin(np.abs(v1)))] = 1.0
        v2 = e - (e @ v1) * v1
        v2 /= np.linalg.norm(v2)
    else:
        start2 = linalg.randn(rng, cov.shape[0], 1)[:, 0]
        start2 -= (start2 @ v1) * v1
        _, v2 = _power_iteration(deflated, start2)
        v2 -= (v2 @ v1) * v1  # re-orthogonalize against numerical drift
        v2 /= np.linalg.norm(v2)
    v1, v2 = _fix_sign(v1), _fix_sign(v2)
    coords = centered @ np.column_stack([v1, v2])
    return coords, np.vstack([v1, v2])


def project_2d(
    model: BncModel, ds: FeatureDataset, method: str = "pca", eval_stats: str = "running"
) -> tuple[Matrix, np.ndarray | None]:
    """2-D principal-component view of the softmax inputs for ``ds``."""
    if method != "pca":
        raise DomainError(f"unknown projection method {method!r}")
    values = _tap_values(model, ds, "sm_in", eval_stats)
    coords, _ = pca_2d(values)
    return coords, (ds.labels.copy() if ds.labels is not None else None)


# -- CSV export ----------------------------------------------------------------

def export_histogram(hist: Histogram, path) -> None:
    """CSV with header bin_lo,bin_hi,count,density."""
    densities = hist.densities()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "density"])
        for i in range(hist.counts.shape[0]):
            writer.writerow(
                [
                    repr(float(hist.bin_edges[i])),
                    repr(float(hist.bin_edges[i + 1])),
                    int(hist.counts[i]),
                    repr(float(densities[i])),
                ]
            )


def export_projection(coords: Matrix, labels: np.ndarray | None, path) -> None:
    """CSV with header x,y,label; label is -1 for unlabeled datasets."""
    coords = linalg.as_matrix(coords, "coords")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for i in range(coords.shape[0]):
            label = int(labels[i]) if labels is not None else -1
            writer.writerow([repr(float(coords[i, 0])), repr(float(coords[i, 1])), label])


def export_sm_inputs(model: BncModel, ds: FeatureDataset, path, eval_stats: str = "running") -> None:
    """Raw softmax-input export (header label,f0,...) for external embedding tools."""
    values = _tap_values(model, ds, "sm_in", eval_stats)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(values.shape[1])])
        for i in range(values.shape[0]):
            label = int(ds.labels[i]) if ds.labels is not None else -1
            writer.writerow([label] + [repr(float(v)) for v in values[i]])
