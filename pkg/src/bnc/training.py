"""Optimizers and the three experimental procedures: supervised source
training, source-free target adaptation, and source co-trained adaptation,
plus the multi-seed benchmark driver.

Every phase reseeds its shuffling and dropout streams from the run seed, so
a phase behaves identically whether it continues an in-memory model or one
reloaded from a checkpoint. Metrics serialized to JSON lines contain only
deterministic fields; wall-clock time stays in the in-memory result and on
stderr so metrics files are byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis, losses
from .data import BatchIterator, FeatureDataset, read_features, split_dataset
from .errors import DomainError, UsageError
from .linalg import SeededRng, derive_seed
from .model import BncModel, ModelConfig

# rng stream ids, one per (phase, purpose)
_STREAM_SOURCE_BATCH = 11
_STREAM_SOURCE_DROPOUT = 12
_STREAM_ADAPT_BATCH = 21
_STREAM_ADAPT_DROPOUT = 22
_STREAM_COTRAIN_SOURCE_BATCH = 31
_STREAM_COTRAIN_TARGET_BATCH = 32
_STREAM_COTRAIN_DROPOUT = 33


@dataclass
class RunConfig:
    epochs_source: int = 5
    epochs_adapt: int = 5
    batch_size: int = 256
    num_seeds: int = 3
    optimizer: str = "sgd_momentum"
    learning_rate: float = 3e-3
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    eval_stats: str = "running"
    cotrain: bool = False
    adapt_split: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "RunConfig":
        for name in ("epochs_source", "epochs_adapt"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_seeds < 1:
            raise DomainError(f"num_seeds must be >= 1, got {self.num_seeds}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise DomainError(f"optimizer must be sgd_momentum or adam, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.eval_stats not in ("running", "batch"):
            raise DomainError(f"eval_stats must be running or batch, got {self.eval_stats!r}")
        if not 0.0 < self.adapt_split <= 1.0:
            raise DomainError(f"adapt_split must be in (0, 1], got {self.adapt_split}")
        self.model.validate()
        return self

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = dataclasses.asdict(self.model)
        return d


@dataclass
class EpochRecord:
    phase: str  # source | adapt | cotrain
    epoch: int
    mean_loss: float
    source_acc: float | None
    target_acc: float | None
    mean_entropy: float | None


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    final_target_acc: float | None = None
    dropped_batches: int = 0
    wall_clock_s: float = 0.0


class Optimizer:
    """SGD with momentum, or Adam; L2 weight decay is added to the raw
    gradient for every parameter. Gradients are zeroed after each step."""

    def __init__(self, cfg: RunConfig):
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.weight_decay = cfg.weight_decay
        self.t = 0
        self._velocity: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, np.ndarray]], grads: list[tuple[str, np.ndarray]]) -> None:
        if [n for n, _ in params] != [n for n, _ in grads]:
            raise DomainError("optimizer step: parameter and gradient lists disagree")
        self.t += 1
        for (name, p), (_, g) in zip(params, grads):
            if p.shape != g.shape:
                raise DomainError(f"optimizer step: {name} grad shape {g.shape} != param {p.shape}")
            g_eff = g + self.weight_decay * p if self.weight_decay else g
            if self.kind == "sgd_momentum":
                v = self._velocity.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g_eff
                p -= self.lr * v
            else:
                m = self._m.setdefault(name, np.zeros_like(p))
                v = self._v.setdefault(name, np.zeros_like(p))
                m *= self.beta1
                m += (1.0 - self.beta1) * g_eff
                v *= self.beta2
                v += (1.0 - self.beta2) * g_eff * g_eff
                m_hat = m / (1.0 - self.beta1 ** self.t)
                v_hat = v / (1.0 - self.beta2 ** self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            g[...] = 0.0


def _eval_acc(model: BncModel, ds: FeatureDataset | None, cfg: RunConfig) -> float | None:
    if ds is None or ds.labels is None:
        return None
    return analysis.accuracy(model, ds, eval_stats=cfg.eval_stats)


def train_source(
    model: BncModel,
    source: FeatureDataset,
    cfg: RunConfig,
    eval_target: FeatureDataset | None = None,
) -> RunMetrics:
    """Supervised cross-entropy training on the labeled source domain."""
    cfg.validate()
    if source.labels is None:
        raise UsageError("source training requires a labeled dataset")
    start = time.perf_counter()
    metrics = RunMetrics()
    seed = model.config.seed
    model.rng.reseed(derive_seed(seed, _STREAM_SOURCE_DROPOUT))
    batches = BatchIterator(source, cfg.batch_size, SeededRng(derive_seed(seed, _STREAM_SOURCE_BATCH)))
    opt = Optimizer(cfg)
    for epoch in range(cfg.epochs_source):
        model.set_mode("train")
        loss_sum, sample_count = 0.0, 0
        for x, y in batches:
            y_hat = model.forward(x)
            loss = losses.cross_entropy(y_hat, y)
            model.backward(losses.ce_grad_wrt_presoftmax(y_hat, y))
            opt.step(model.parameters(), model.grads())
            loss_sum += loss * x.shape[0]
            sample_count += x.shape[0]
        metrics.records.append(
            EpochRecord(
                phase="source",
                epoch=epoch,
                mean_loss=loss_sum / sample_count,
                source_acc=_eval_acc(model, source, cfg),
                target_acc=_eval_acc(model, eval_target, cfg),
                mean_entropy=None,
            )
        )
    metrics.dropped_batches = batches.dropped_batches
    metrics.final_target_acc = _eval_acc(model, eval_target, cfg)
    metrics.wall_clock_s = time.perf_counter() - start
    return metrics


def adapt_target(model: BncModel, target: FeatureDataset, cfg: RunConfig) -> RunMetrics:
    """Source-free adaptation: entropy minimization on unlabeled target batches.

    The signature admits only the target set, so no source data is reachable
    during adaptation. Target labels, when present, are used solely to report
    accuracy and never touch the loss.
    """
    cfg.validate()
    start = time.perf_counter()
    metrics = RunMetrics()
    seed = model.config.seed
    model.rng.reseed(derive_seed(seed, _STREAM_ADAPT_DROPOUT))
    batches = BatchIterator(target, cfg.batch_size, SeededRng(derive_seed(seed, _STREAM_ADAPT_BATCH)))
    opt = Optimizer(cfg)
    for epoch in range(cfg.epochs_adapt):
        model.set_mode("train")
        loss_sum, sample_count = 0.0, 0
        for x, _ in batches:
            y_hat = model.forward(x)
            loss = losses.entropy(y_hat)
            model.backward(losses.entropy_grad_wrt_presoftmax(y_hat))
            opt.step(model.parameters(), model.grads())
            loss_sum += loss * x.shape[0]
            sample_count += x.shape[0]
        mean_entropy = loss_sum / sample_count
        metrics.records.append(
            EpochRecord(
                phase="adapt",
                epoch=epoch,
                mean_loss=mean_entropy,
                source_acc=None,
                target_acc=_eval_acc(model, target, cfg),
                mean_entropy=mean_entropy,
            )
        )
    metrics.dropped_batches = batches.dropped_batches
    metrics.final_target_acc = _eval_acc(model, target, cfg)
    metrics.wall_clock_s = time.perf_counter() - start
    return metrics


def adapt_cotrained(
    model: BncModel, source: FeatureDataset, target: FeatureDataset, cfg: RunConfig
) -> RunMetrics:
    """Adaptation with source data kept in the loop: alternates one labeled
    source cross-entropy step with one unlabeled target entropy step, each
    loss normalized by its own batch size. The shorter stream is cycled."""
    cfg.validate()
    if source is None:
        raise UsageError("co-trained adaptation requires a source dataset")
    if source.labels is None:
        raise UsageError("co-trained adaptation requires a labeled source dataset")
    start = time.perf_counter()
    metrics = RunMetrics()
    seed = model.config.seed
    model.rng.reseed(derive_seed(seed, _STREAM_COTRAIN_DROPOUT))
    source_batches = BatchIterator(
        source, cfg.batch_size, SeededRng(derive_seed(seed, _STREAM_COTRAIN_SOURCE_BATCH))
    )
    target_batches = BatchIterator(
        target, cfg.batch_size, SeededRng(derive_seed(seed, _STREAM_COTRAIN_TARGET_BATCH))
    )
    opt = Optimizer(cfg)

    def cycled(it):
        while True:
            yield from it

    source_stream = cycled(source_batches)
    target_stream = cycled(target_batches)
    steps_per_epoch = max(
        -(-source.n // cfg.batch_size), -(-target.n // cfg.batch_size)
    )
    for epoch in range(cfg.epochs_adapt):
        model.set_mode("train")
        ce_sum, ce_count = 0.0, 0
        ent_sum, ent_count = 0.0, 0
        for _ in range(steps_per_epoch):
            xs, ys = next(source_stream)
            y_hat = model.forward(xs)
            ce_sum += losses.cross_entropy(y_hat, ys) * xs.shape[0]
            ce_count += xs.shape[0]
            model.backward(losses.ce_grad_wrt_presoftmax(y_hat, ys))
            opt.step(model.parameters(), model.grads())

            xt, _ = next(target_stream)
            y_hat = model.forward(xt)
            ent_sum += losses.entropy(y_hat) * xt.shape[0]
            ent_count += xt.shape[0]
            model.backward(losses.entropy_grad_wrt_presoftmax(y_hat))
            opt.step(model.parameters(), model.grads())
        metrics.records.append(
            EpochRecord(
                phase="cotrain",
                epoch=epoch,
                mean_loss=(ce_sum + ent_sum) / (ce_count + ent_count),
                source_acc=_eval_acc(model, source, cfg),
                target_acc=_eval_acc(model, target, cfg),
                mean_entropy=ent_sum / ent_count,
            )
        )
    metrics.dropped_batches = source_batches.dropped_batches + target_batches.dropped_batches
    metrics.final_target_acc = _eval_acc(model, target, cfg)
    metrics.wall_clock_s = time.perf_counter() - start
    return metrics


@dataclass
class SeedResult:
    seed: int
    pre_adapt_acc: float
    final_acc: float
    source_metrics: RunMetrics
    adapt_metrics: RunMetrics


@dataclass
class ShiftResult:
    name: str
    error: str | None = None
    seeds: list[SeedResult] = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return float(np.mean([s.final_acc for s in self.seeds]))

    @property
    def std_acc(self) -> float:
        return float(np.std([s.final_acc for s in self.seeds]))


@dataclass
class BenchmarkResult:
    shifts: list[ShiftResult]

    @property
    def grand_average(self) -> float:
        means = [s.mean_acc for s in self.shifts if not s.error]
        return float(np.mean(means)) if means else float("nan")


def run_seed_pipeline(
    source: FeatureDataset, target: FeatureDataset, cfg: RunConfig, seed: int
) -> SeedResult:
    """One full pipeline: fresh init, source training, then adaptation.

    By default the full target set is used both for adaptation and for
    accuracy measurement; ``adapt_split < 1`` instead adapts on that fraction
    and measures on the held-out remainder.
    """
    model_cfg = dataclasses.replace(cfg.model, seed=seed)
    model = BncModel(model_cfg)
    if cfg.adapt_split < 1.0:
        adapt_ds, eval_ds = split_dataset(target, cfg.adapt_split, seed)
    else:
        adapt_ds = eval_ds = target
    source_metrics = train_source(model, source, cfg, eval_target=eval_ds)
    pre_adapt = analysis.accuracy(model, eval_ds, eval_stats=cfg.eval_stats)
    if cfg.cotrain:
        adapt_metrics = adapt_cotrained(model, source, adapt_ds, cfg)
    else:
        adapt_metrics = adapt_target(model, adapt_ds, cfg)
    final_acc = adapt_metrics.final_target_acc
    if eval_ds is not adapt_ds:
        final_acc = analysis.accuracy(model, eval_ds, eval_stats=cfg.eval_stats)
    return SeedResult(
        seed=seed,
        pre_adapt_acc=pre_adapt,
        final_acc=final_acc,
        source_metrics=source_metrics,
        adapt_metrics=adapt_metrics,
    )


def run_benchmark(
    shifts: list[tuple[str, str, str]], cfg: RunConfig, jobs: int = 1
) -> BenchmarkResult:
    """Run every (source_path, target_path, name) shift for num_seeds seeds.

    Seeds are base+i. Per-seed pipelines may run concurrently; results are
    reduced in seed order so output does not depend on scheduling. A shift
    whose datasets fail to load is reported and the rest proceed.
    """
    cfg.validate()
    results = []
    base_seed = cfg.model.seed
    for source_path, target_path, name in shifts:
        try:
            source = read_features(source_path)
            target = read_features(target_path)
        except Exception as exc:
            results.append(ShiftResult(name=name, error=f"{type(exc).__name__}: {exc}"))
            continue
        seeds = [base_seed + i for i in range(cfg.num_seeds)]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(run_seed_pipeline, source, target, cfg, s) for s in seeds]
                seed_results = [f.result() for f in futures]
        else:
            seed_results = [run_seed_pipeline(source, target, cfg, s) for s in seeds]
        results.append(ShiftResult(name=name, seeds=seed_results))
    return BenchmarkResult(shifts=results)


# -- metrics serialization ----------------------------------------------------

def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _epoch_line(shift: str, seed: int, rec: EpochRecord) -> str:
    return _dump(
        {
            "type": "epoch",
            "shift": shift,
            "seed": seed,
            "phase": rec.phase,
            "epoch": rec.epoch,
            "mean_loss": rec.mean_loss,
            "source_acc": rec.source_acc,
            "target_acc": rec.target_acc,
            "mean_entropy": rec.mean_entropy,
        }
    )


def benchmark_jsonl(result: BenchmarkResult, cfg: RunConfig) -> str:
    """Deterministic JSON-lines rendering of a benchmark run."""
    lines = [_dump({"type": "config", "run": cfg.to_json_dict()})]
    for shift in result.shifts:
        if shift.error:
            lines.append(_dump({"type": "shift_error", "shift": shift.name, "error": shift.error}))
            continue
        for sr in shift.seeds:
            for rec in sr.source_metrics.records:
                lines.append(_epoch_line(shift.name, sr.seed, rec))
            for rec in sr.adapt_metrics.records:
                lines.append(_epoch_line(shift.name, sr.seed, rec))
        lines.append(
            _dump(
                {
                    "type": "shift_summary",
                    "shift": shift.name,
                    "seeds": [sr.seed for sr in shift.seeds],
                    "pre_adapt_accs": [sr.pre_adapt_acc for sr in shift.seeds],
                    "final_accs": [sr.final_acc for sr in shift.seeds],
                    "mean_acc": shift.mean_acc,
                    "std_acc": shift.std_acc,
                    "dropped_batches": sum(
                        sr.source_metrics.dropped_batches + sr.adapt_metrics.dropped_batches
                        for sr in shift.seeds
                    ),
                }
            )
        )
    ok = [s for s in result.shifts if not s.error]
    lines.append(
        _dump(
            {
                "type": "benchmark_summary",
                "shifts": [s.name for s in result.shifts],
                "grand_average": result.grand_average if ok else None,
            }
        )
    )
    return "\n".join(lines) + "\n"


def run_jsonl(metrics: RunMetrics, shift: str, seed: int) -> str:
    """JSON-lines rendering of a single training/adaptation run."""
    lines = [_epoch_line(shift, seed, rec) for rec in metrics.records]
    lines.append(
        _dump(
            {
                "type": "run_summary",
                "shift": shift,
                "seed": seed,
                "final_target_acc": metrics.final_target_acc,
                "dropped_batches": metrics.dropped_batches,
            }
        )
    )
    return "\n".join(lines) + "\n"
