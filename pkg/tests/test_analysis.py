"""Accuracy, histogram splits, sparsity, separation, and the 2-D projection."""

import csv

import numpy as np
import pytest

from bnc import analysis, linalg
from bnc.data import FeatureDataset, ShiftSpec, generate_shift_pair, read_csv_features
from bnc.errors import DomainError, UsageError
from bnc.linalg import SeededRng
from bnc.model import BncModel, ModelConfig
from bnc.training import RunConfig, train_source


def tiny_model(**overrides):
    cfg = dict(input_dim=6, hidden_dim=8, num_classes=3, seed=2)
    cfg.update(overrides)
    return BncModel(ModelConfig(**cfg))


def tiny_dataset(n=12, dim=6, k=3, seed=4):
    return FeatureDataset(linalg.randn(SeededRng(seed), n, dim), np.arange(n) % k, k)


# -- accuracy -----------------------------------------------------------------------

def test_accuracy_perfect_predictions():
    model = tiny_model()
    ds = tiny_dataset()
    probs = model.inference_forward(ds.features)
    relabeled = FeatureDataset(ds.features, np.argmax(probs, axis=1), ds.k)
    assert analysis.accuracy(model, relabeled) == 1.0


def test_accuracy_tie_breaks_to_lowest_index():
    # gamma == 0 forces every softmax input to beta == 0: uniform rows
    model = tiny_model(num_classes=2, dropout_p=0.0)
    model.bn2.gamma[...] = 0.0
    ds = FeatureDataset(linalg.randn(SeededRng(1), 8, 6), np.zeros(8, dtype=int), 2)
    assert analysis.accuracy(model, ds) == 1.0
    all_ones = FeatureDataset(ds.features, np.ones(8, dtype=int), 2)
    assert analysis.accuracy(model, all_ones) == 0.0


def test_accuracy_random_model_near_chance():
    k, n = 4, 4000
    ds = FeatureDataset(linalg.randn(SeededRng(3), n, 6), np.arange(n) % k, k)
    acc = analysis.accuracy(tiny_model(num_classes=k, seed=9), ds)
    assert abs(acc - 1.0 / k) < 5.0 / np.sqrt(n)


def test_accuracy_requires_labels():
    ds = FeatureDataset(np.zeros((2, 6)), None, 3)
    with pytest.raises(UsageError):
        analysis.accuracy(tiny_model(), ds)


def test_accuracy_eval_stats_flag_changes_normalization():
    model = tiny_model()
    model.set_mode("train")
    model.forward(linalg.randn(SeededRng(6), 16, 6, 2.0, 3.0))  # skew the running stats
    ds = tiny_dataset()
    running = analysis.accuracy(model, ds, eval_stats="running")
    batch = analysis.accuracy(model, ds, eval_stats="batch")
    assert 0.0 <= running <= 1.0 and 0.0 <= batch <= 1.0


# -- histograms ----------------------------------------------------------------------

def test_histogram_counts_and_density_integral():
    values = linalg.randn(SeededRng(7), 50, 4)
    hist = analysis.make_histogram(values, bins=13, tag="x")
    assert hist.total == 200
    widths = np.diff(hist.bin_edges)
    assert abs((hist.densities() * widths).sum() - 1.0) < 1e-9
    assert len(hist.counts) == 13 and len(hist.bin_edges) == 14


def test_histogram_constant_pool_and_empty_pool():
    constant = analysis.make_histogram(np.full(9, 2.5), bins=4)
    assert constant.total == 9
    assert constant.bin_edges[0] == 2.0 and constant.bin_edges[-1] == 3.0
    empty = analysis.make_histogram(np.zeros(0))
    assert empty.total == 0 and len(empty.counts) == 0


def test_channel_histogram_pool_sizes():
    model = tiny_model(num_classes=2)
    ds = FeatureDataset(linalg.randn(SeededRng(8), 3, 6), np.array([0, 1, 0]), 2)
    correct, other, per_channel = analysis.channel_histograms(model, ds, "sm_in")
    assert correct.total == 3
    assert other.total == 3  # k-1 = 1 channel per sample
    assert len(per_channel) == 2
    assert np.array_equal(correct.bin_edges, other.bin_edges)


def test_channel_histogram_batch_stats_mean_equals_beta():
    model = tiny_model(dropout_p=0.0)
    model.bn2.beta[...] = np.array([0.25, -0.5, 1.0])
    ds = tiny_dataset(n=32)
    from bnc.model import ActivationTaps

    taps = ActivationTaps()
    model.inference_forward(ds.features, taps=taps, stats="batch")
    np.testing.assert_allclose(taps.sm_in.mean(axis=0), model.bn2.beta, atol=1e-9)


def test_ablated_model_taps_coincide_bin_for_bin():
    model = tiny_model(include_bn2=False)
    ds = tiny_dataset()
    c1, o1, p1 = analysis.channel_histograms(model, ds, "fc2_out")
    c2, o2, p2 = analysis.channel_histograms(model, ds, "sm_in")
    assert np.array_equal(c1.counts, c2.counts)
    assert np.array_equal(o1.counts, o2.counts)
    assert np.array_equal(c1.bin_edges, c2.bin_edges)
    for a, b in zip(p1, p2):
        assert np.array_equal(a.counts, b.counts)


def test_unknown_tap_rejected():
    with pytest.raises(DomainError):
        analysis.channel_histograms(tiny_model(), tiny_dataset(), "bn1_out")


def test_separation_positive_on_trained_source():
    source, _ = generate_shift_pair(4, 16, 100, ShiftSpec(), 5)
    cfg = RunConfig(epochs_source=5, batch_size=64, model=ModelConfig(input_dim=16, num_classes=4, seed=5))
    model = BncModel(cfg.model)
    train_source(model, source, cfg)
    assert analysis.separation(model, source, "sm_in") > 0.0
    assert analysis.separation(model, source, "fc2_out") > 0.0


# -- sparsity -----------------------------------------------------------------------

def test_sparsity_all_zero_weights():
    model = tiny_model()
    model.fc1.weight[...] = 0.0
    model.fc2.weight[...] = 0.0
    report = analysis.weight_sparsity(model, threshold=1e-2)
    assert [l.fraction_near_zero for l in report.layers] == [1.0, 1.0]
    assert [l.mean_abs_weight for l in report.layers] == [0.0, 0.0]


def test_sparsity_unit_weights():
    model = tiny_model()
    model.fc1.weight[...] = 1.0
    model.fc2.weight[...] = -1.0
    report = analysis.weight_sparsity(model, threshold=1e-2)
    assert [l.fraction_near_zero for l in report.layers] == [0.0, 0.0]
    assert [l.layer for l in report.layers] == ["fc1", "fc2"]
    with pytest.raises(DomainError):
        analysis.weight_sparsity(model, threshold=0.0)


# -- PCA ----------------------------------------------------------------------------

def test_pca_recovers_axis_aligned_2d():
    # exactly uncorrelated axes: all sign combinations of (3, 1)
    x = np.array([[3.0, 1.0], [3.0, -1.0], [-3.0, 1.0], [-3.0, -1.0]])
    coords, components = analysis.pca_2d(x)
    np.testing.assert_allclose(np.abs(components), np.eye(2), atol=1e-9)
    np.testing.assert_allclose(np.abs(coords), np.abs(x), atol=1e-9)


def test_pca_rank_one_data():
    rng = SeededRng(11)
    t = linalg.randn(rng, 50, 1)[:, 0]
    direction = np.ones(10) / np.sqrt(10)
    x = np.outer(t, direction)
    coords, _ = analysis.pca_2d(x)
    assert coords[:, 1].var() <= 1e-9 * coords[:, 0].var()


def test_pca_matches_dense_eigendecomposition():
    rng = SeededRng(12)
    x = linalg.randn(rng, 50, 8, 0.0, 2.0)
    coords, components = analysis.pca_2d(x)
    centered = x - x.mean(axis=0)
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / 50)
    ref = centered @ eigvecs[:, ::-1][:, :2]
    for j in range(2):
        ref_col = ref[:, j] if np.dot(ref[:, j], coords[:, j]) >= 0 else -ref[:, j]
        np.testing.assert_allclose(coords[:, j], ref_col, atol=1e-6)
    assert abs(np.dot(components[0], components[1])) <= 1e-8


def test_pca_degenerate_and_small_inputs():
    with pytest.raises(DomainError, match="zero variance"):
        analysis.pca_2d(np.ones((5, 3)))
    with pytest.raises(DomainError, match="at least 3"):
        analysis.pca_2d(np.zeros((2, 3)))


def test_project_2d_through_model():
    model = tiny_model()
    ds = tiny_dataset(n=20)
    coords, labels = analysis.project_2d(model, ds)
    assert coords.shape == (20, 2)
    assert np.array_equal(labels, ds.labels)


# -- exports ------------------------------------------------------------------------

def test_histogram_csv_roundtrip(tmp_path):
    hist = analysis.make_histogram(linalg.randn(SeededRng(13), 30, 2), bins=7, tag="t")
    path = tmp_path / "h.csv"
    analysis.export_histogram(hist, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert [int(r["count"]) for r in rows] == hist.counts.tolist()
    assert sum(float(r["density"]) * (float(r["bin_hi"]) - float(r["bin_lo"])) for r in rows) == pytest.approx(1.0, abs=1e-9)


def test_empty_histogram_exports_header_only(tmp_path):
    path = tmp_path / "e.csv"
    analysis.export_histogram(analysis.make_histogram(np.zeros(0)), path)
    assert path.read_text().strip() == "bin_lo,bin_hi,count,density"


def test_projection_export_row_count(tmp_path):
    model = tiny_model()
    ds = tiny_dataset(n=9)
    coords, labels = analysis.project_2d(model, ds)
    path = tmp_path / "p.csv"
    analysis.export_projection(coords, labels, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert {r["label"] for r in rows} <= {"0", "1", "2"}


def test_sm_inputs_export_reimports_as_csv_features(tmp_path):
    model = tiny_model()
    ds = tiny_dataset(n=8)
    path = tmp_path / "sm.csv"
    analysis.export_sm_inputs(model, ds, path)
    back = read_csv_features(path)
    assert back.n == 8 and back.dim == model.config.num_classes
    assert np.array_equal(back.labels, ds.labels)
