"""Optimizers, the three training procedures, and the benchmark driver."""

import copy
import dataclasses

import numpy as np
import pytest

from bnc import analysis, linalg
from bnc.data import ShiftSpec, generate_shift_pair, write_features
from bnc.errors import DomainError, UsageError
from bnc.linalg import SeededRng
from bnc.model import BncModel, ModelConfig, load_model
from bnc.training import (
    Optimizer,
    RunConfig,
    adapt_cotrained,
    adapt_target,
    benchmark_jsonl,
    run_benchmark,
    run_jsonl,
    train_source,
)

SMALL_MODEL = dict(input_dim=16, num_classes=4, hidden_dim=32)


def small_cfg(seed=5, **overrides):
    model = ModelConfig(seed=seed, **SMALL_MODEL)
    defaults = dict(epochs_source=3, epochs_adapt=3, batch_size=32, num_seeds=2, model=model)
    defaults.update(overrides)
    return RunConfig(**defaults)


def small_pair(seed=5, severity=1.0, n=40):
    return generate_shift_pair(4, 16, n, ShiftSpec.from_severity(severity), seed)


# -- optimizer -------------------------------------------------------------------

def named(**arrays):
    return [(k, v) for k, v in arrays.items()]


def test_sgd_zero_gradient_keeps_parameters():
    opt = Optimizer(small_cfg(weight_decay=0.0))
    w = np.array([[1.0, -2.0]])
    opt.step(named(w=w), named(w=np.zeros((1, 2))))
    assert w.tolist() == [[1.0, -2.0]]


def test_sgd_plain_step():
    cfg = small_cfg(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    opt = Optimizer(cfg)
    w = np.array([[1.0]])
    opt.step(named(w=w), named(w=np.array([[2.0]])))
    np.testing.assert_allclose(w, [[0.8]], atol=1e-15)


def test_sgd_zeroes_gradients_after_step():
    opt = Optimizer(small_cfg())
    w, g = np.ones((2, 2)), np.ones((2, 2))
    opt.step(named(w=w), named(w=g))
    assert np.array_equal(g, np.zeros((2, 2)))


def test_adam_first_step_magnitude():
    cfg = small_cfg(optimizer="adam", learning_rate=1e-3, weight_decay=0.0)
    opt = Optimizer(cfg)
    w = np.full((3, 3), 5.0)
    opt.step(named(w=w), named(w=np.ones((3, 3))))
    delta = np.abs(w - 5.0)
    assert np.all(delta >= 9.9e-4) and np.all(delta <= 1e-3)


def test_sgd_momentum_matches_hand_rolled_oracle():
    # 20 steps on the quadratic f(w) = 0.5 * w' diag(a) w, gradient a*w
    a = np.array([[2.0, 0.5]])
    cfg = small_cfg(learning_rate=0.05, momentum=0.9, weight_decay=0.0)
    opt = Optimizer(cfg)
    w = np.array([[1.0, -3.0]])
    w_ref, v_ref = w.copy(), np.zeros_like(w)
    for _ in range(20):
        g = a * w
        opt.step(named(w=w), named(w=g.copy()))
        v_ref = 0.9 * v_ref + a * w_ref
        w_ref = w_ref - 0.05 * v_ref
    np.testing.assert_allclose(w, w_ref, atol=1e-12)


def test_optimizer_shape_mismatch():
    opt = Optimizer(small_cfg())
    with pytest.raises(DomainError):
        opt.step(named(w=np.zeros((2, 2))), named(w=np.zeros((2, 3))))


# -- train_source ------------------------------------------------------------------

def test_train_source_requires_labels():
    source, _ = small_pair()
    unlabeled = dataclasses.replace(source, labels=None)
    model = BncModel(small_cfg().model)
    with pytest.raises(UsageError):
        train_source(model, unlabeled, small_cfg())


def test_train_source_zero_epochs_is_a_no_op():
    source, _ = small_pair()
    cfg = small_cfg(epochs_source=0)
    model = BncModel(cfg.model)
    before = {n: p.copy() for n, p in model.parameters()}
    metrics = train_source(model, source, cfg)
    assert metrics.records == []
    for n, p in model.parameters():
        assert np.array_equal(p, before[n])


def test_train_source_is_deterministic():
    source, _ = small_pair()
    cfg = small_cfg()
    final = []
    for _ in range(2):
        model = BncModel(cfg.model)
        train_source(model, source, cfg)
        final.append({n: p.copy() for n, p in model.parameters()})
    for n in final[0]:
        assert final[0][n].tobytes() == final[1][n].tobytes()


def test_train_source_learns_separable_data():
    source, _ = generate_shift_pair(4, 16, 200, ShiftSpec(), 0)
    model_cfg = ModelConfig(input_dim=16, num_classes=4, seed=0)  # default 512-wide hidden layer
    cfg = RunConfig(epochs_source=5, batch_size=256, model=model_cfg)
    model = BncModel(cfg.model)
    metrics = train_source(model, source, cfg)
    assert metrics.records[-1].source_acc >= 0.95
    assert len(metrics.records) == 5
    assert metrics.records[0].phase == "source"


# -- adapt_target --------------------------------------------------------------------

def trained_model(cfg, source, target=None):
    model = BncModel(cfg.model)
    train_source(model, source, cfg, eval_target=target)
    return model


def test_adapt_target_improves_shifted_accuracy():
    source, target = small_pair(seed=7, n=150)
    cfg = small_cfg(epochs_source=5, epochs_adapt=5, batch_size=64, seed=7)
    model = trained_model(cfg, source)
    pre = analysis.accuracy(model, target)
    metrics = adapt_target(model, target, cfg)
    assert metrics.final_target_acc > pre
    assert all(r.phase == "adapt" and r.source_acc is None for r in metrics.records)


def test_adapt_target_works_without_labels():
    source, target = small_pair(seed=3)
    unlabeled = dataclasses.replace(target, labels=None)
    cfg = small_cfg(seed=3)
    model = trained_model(cfg, source)
    metrics = adapt_target(model, unlabeled, cfg)
    assert metrics.final_target_acc is None
    assert all(r.target_acc is None for r in metrics.records)
    assert all(r.mean_entropy is not None for r in metrics.records)


def test_adapt_target_ignores_target_labels_for_the_loss():
    # scrambling the labels must not change the adapted parameters
    source, target = small_pair(seed=11)
    cfg = small_cfg(seed=11)
    outcomes = []
    for scramble in (False, True):
        ds = target
        if scramble:
            ds = dataclasses.replace(target, labels=(target.labels + 1) % target.k)
        model = trained_model(cfg, source)
        adapt_target(model, ds, cfg)
        outcomes.append({n: p.copy() for n, p in model.parameters()})
    for n in outcomes[0]:
        assert outcomes[0][n].tobytes() == outcomes[1][n].tobytes()


def test_adaptation_after_checkpoint_reload_matches_in_memory(tmp_path):
    source, target = small_pair(seed=13)
    cfg = small_cfg(seed=13)
    direct = trained_model(cfg, source)
    path = tmp_path / "m.ckpt"
    direct.save(path)
    adapt_target(direct, target, cfg)
    reloaded = load_model(path)
    adapt_target(reloaded, target, cfg)
    for (n, a), (_, b) in zip(direct.parameters(), reloaded.parameters()):
        assert a.tobytes() == b.tobytes(), n


# -- adapt_cotrained -----------------------------------------------------------------

def test_cotrained_requires_usable_source():
    source, target = small_pair(seed=17)
    cfg = small_cfg(seed=17)
    model = trained_model(cfg, source)
    with pytest.raises(UsageError):
        adapt_cotrained(model, None, target, cfg)
    unlabeled = dataclasses.replace(source, labels=None)
    with pytest.raises(UsageError):
        adapt_cotrained(model, unlabeled, target, cfg)


def test_cotrained_on_identical_domains_keeps_training():
    source, target = small_pair(seed=19, severity=0.0, n=100)
    cfg = small_cfg(seed=19, epochs_source=3, epochs_adapt=4, batch_size=64)
    model = trained_model(cfg, source)
    metrics = adapt_cotrained(model, source, target, cfg)
    accs = [r.source_acc for r in metrics.records]
    # continued supervised training: epoch-average accuracy does not decay
    assert accs[-1] >= accs[0] - 1e-9
    assert all(r.phase == "cotrain" for r in metrics.records)


# -- benchmark -----------------------------------------------------------------------

def write_pair(tmp_path, seed=23, severity=1.0, n=40):
    source, target = small_pair(seed=seed, severity=severity, n=n)
    sp, tp = tmp_path / f"s{seed}.bncf", tmp_path / f"t{seed}.bncf"
    write_features(sp, source)
    write_features(tp, target)
    return str(sp), str(tp)


def test_benchmark_mean_is_arithmetic_mean_and_deterministic(tmp_path):
    sp, tp = write_pair(tmp_path)
    cfg = small_cfg(num_seeds=3)
    result = run_benchmark([(sp, tp, "shift-a")], cfg)
    shift = result.shifts[0]
    assert shift.error is None
    assert len(shift.seeds) == 3
    assert [s.seed for s in shift.seeds] == [5, 6, 7]
    assert shift.mean_acc == pytest.approx(np.mean([s.final_acc for s in shift.seeds]), abs=1e-15)
    assert result.grand_average == pytest.approx(shift.mean_acc, abs=1e-15)
    again = run_benchmark([(sp, tp, "shift-a")], cfg)
    assert benchmark_jsonl(result, cfg) == benchmark_jsonl(again, cfg)


def test_benchmark_single_seed_has_zero_std(tmp_path):
    sp, tp = write_pair(tmp_path)
    cfg = small_cfg(num_seeds=1)
    result = run_benchmark([(sp, tp, "only")], cfg)
    assert result.shifts[0].std_acc == 0.0


def test_benchmark_reports_load_failures_and_proceeds(tmp_path):
    sp, tp = write_pair(tmp_path)
    cfg = small_cfg(num_seeds=1)
    result = run_benchmark(
        [("missing.bncf", tp, "broken"), (sp, tp, "good")], cfg
    )
    assert result.shifts[0].error is not None
    assert result.shifts[1].error is None
    assert not np.isnan(result.grand_average)
    text = benchmark_jsonl(result, cfg)
    assert '"type":"shift_error"' in text


def test_benchmark_parallel_jobs_match_serial(tmp_path):
    sp, tp = write_pair(tmp_path)
    cfg = small_cfg(num_seeds=3)
    serial = run_benchmark([(sp, tp, "x")], cfg, jobs=1)
    parallel = run_benchmark([(sp, tp, "x")], cfg, jobs=3)
    assert benchmark_jsonl(serial, cfg) == benchmark_jsonl(parallel, cfg)


def test_cotrain_flag_switches_benchmark_procedure(tmp_path):
    sp, tp = write_pair(tmp_path)
    free = run_benchmark([(sp, tp, "x")], small_cfg(num_seeds=1), jobs=1)
    cot = run_benchmark([(sp, tp, "x")], small_cfg(num_seeds=1, cotrain=True), jobs=1)
    assert free.shifts[0].seeds[0].adapt_metrics.records[0].phase == "adapt"
    assert cot.shifts[0].seeds[0].adapt_metrics.records[0].phase == "cotrain"


# -- metrics serialization -------------------------------------------------------------

def test_metrics_jsonl_schema_and_no_wall_clock(tmp_path):
    import json

    sp, tp = write_pair(tmp_path)
    cfg = small_cfg(num_seeds=1)
    result = run_benchmark([(sp, tp, "x")], cfg)
    lines = [json.loads(l) for l in benchmark_jsonl(result, cfg).splitlines()]
    assert lines[0]["type"] == "config"
    epoch_lines = [l for l in lines if l["type"] == "epoch"]
    assert epoch_lines, "no epoch records emitted"
    for line in epoch_lines:
        assert set(line) == {
            "type", "shift", "seed", "phase", "epoch",
            "mean_loss", "source_acc", "target_acc", "mean_entropy",
        }
    summary = [l for l in lines if l["type"] == "shift_summary"][0]
    assert set(summary) == {
        "type", "shift", "seeds", "pre_adapt_accs", "final_accs",
        "mean_acc", "std_acc", "dropped_batches",
    }
    assert lines[-1]["type"] == "benchmark_summary"
    assert "wall" not in benchmark_jsonl(result, cfg)


def test_single_run_jsonl(tmp_path):
    import json

    source, _ = small_pair()
    cfg = small_cfg()
    model = BncModel(cfg.model)
    metrics = train_source(model, source, cfg)
    text = run_jsonl(metrics, "my-shift", 5)
    lines = [json.loads(l) for l in text.splitlines()]
    assert lines[-1]["type"] == "run_summary"
    assert len([l for l in lines if l["type"] == "epoch"]) == cfg.epochs_source
