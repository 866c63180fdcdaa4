"""Command-line entry point exposing the full workflow.

Subcommands: gen-data, train-source, adapt, eval, analyze, grad-check,
benchmark. Flags mirror the config dataclass fields one to one; a
``--config`` file of key=value lines supplies defaults that explicit flags
override. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import analysis, gradcheck, training
from .data import FeatureDataset, ShiftSpec, generate_shift_pair, read_features, split_dataset, write_features
from .errors import BncError, DataFormatError, ManifestError, ShapeError, UsageError
from .model import BncModel, ModelConfig, load_model
from .training import RunConfig

FLAG_HELP = {
    "input_dim": "feature width the model expects",
    "hidden_dim": "width of the hidden fully connected layer",
    "num_classes": "number of output classes",
    "leak": "negative-side slope of the leaky ReLU",
    "dropout_p": "dropout probability",
    "include_bn2": "keep the batch norm between the last FC layer and softmax",
    "bn_eps": "batch norm variance epsilon",
    "bn_momentum": "weight of the newest batch in the running statistics",
    "init_scheme": "weight initialization scheme",
    "seed": "base seed; run i of a benchmark uses seed+i",
    "epochs_source": "supervised epochs in the source domain",
    "epochs_adapt": "unsupervised adaptation epochs in the target domain",
    "batch_size": "minibatch size",
    "num_seeds": "independent seeded runs per shift",
    "optimizer": "parameter update rule",
    "learning_rate": "optimizer step size",
    "momentum": "SGD momentum coefficient",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "weight_decay": "L2 penalty added to every gradient",
    "eval_stats": "batch-norm statistics used when measuring accuracy",
    "cotrain": "interleave labeled source steps during adaptation",
}

FLAG_CHOICES = {
    "init_scheme": ("he", "xavier"),
    "optimizer": ("sgd_momentum", "adam"),
    "eval_stats": ("running", "batch"),
}

_FROM_DATA = ("input_dim", "num_classes")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_dataclass_flags(parser, cls, skip=(), from_data=()):
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name == "model":
            continue
        flag = "--" + f.name.replace("_", "-")
        help_text = FLAG_HELP.get(f.name, f.name.replace("_", " "))
        if f.type in ("bool", bool):
            parser.add_argument(
                flag, action=argparse.BooleanOptionalAction, default=f.default,
                help=f"{help_text} (default: %(default)s)",
            )
        elif f.name in FLAG_CHOICES:
            parser.add_argument(
                flag, default=f.default, choices=FLAG_CHOICES[f.name],
                help=f"{help_text} (default: %(default)s)",
            )
        elif f.name in from_data:
            parser.add_argument(
                flag, type=int, default=None,
                help=f"{help_text} (default: taken from the dataset)",
            )
        else:
            pytype = {"int": int, "float": float, "str": str}[f.type] if isinstance(f.type, str) else f.type
            parser.add_argument(
                flag, type=pytype, default=f.default,
                help=f"{help_text} (default: %(default)s)",
            )


def _add_config_flag(parser):
    parser.add_argument(
        "--config", default=None, metavar="FILE",
        help="key=value lines supplying flag defaults; explicit flags win",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="bnc", description="Batch-normalization classifier for source-free domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic source/target BNCF pair")
    p.add_argument("--out-dir", required=True, help="directory for source.bncf and target.bncf")
    p.add_argument("--classes", type=int, default=10, help="number of classes (default: %(default)s)")
    p.add_argument("--dim", type=int, default=32, help="feature width (default: %(default)s)")
    p.add_argument("--n-per-class", type=int, default=200, help="samples per class per domain (default: %(default)s)")
    spec_defaults = ShiftSpec.moderate()
    for f in dataclasses.fields(ShiftSpec):
        p.add_argument(
            "--" + f.name.replace("_", "-"), type=float, default=getattr(spec_defaults, f.name),
            help=f"shift transform: {f.name.replace('_', ' ')} (default: %(default)s)",
        )
    p.add_argument("--seed", type=int, default=42, help=FLAG_HELP["seed"] + " (default: %(default)s)")
    _add_config_flag(p)

    p = sub.add_parser("train-source", help="supervised training on a labeled source BNCF file")
    p.add_argument("--source", required=True, help="labeled source BNCF file")
    p.add_argument("--model-out", required=True, help="checkpoint path to write")
    p.add_argument("--metrics-out", default=None, help="optional JSON-lines metrics path")
    _add_dataclass_flags(p, ModelConfig, from_data=_FROM_DATA)
    _add_dataclass_flags(p, RunConfig, skip=("cotrain",))
    _add_config_flag(p)

    p = sub.add_parser("adapt", help="adapt a trained checkpoint to an unlabeled target domain")
    p.add_argument("--model", required=True, help="source-trained checkpoint")
    p.add_argument("--target", required=True, help="target BNCF file (labels, if any, are ignored)")
    p.add_argument("--model-out", required=True, help="adapted checkpoint path to write")
    p.add_argument("--metrics-out", default=None, help="optional JSON-lines metrics path")
    p.add_argument("--source", default=None, help="labeled source BNCF file (co-training only)")
    _add_dataclass_flags(p, RunConfig)
    _add_config_flag(p)

    p = sub.add_parser("eval", help="report accuracy of a checkpoint on a labeled BNCF file")
    p.add_argument("--model", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="labeled BNCF file")
    p.add_argument("--eval-stats", default="running", choices=FLAG_CHOICES["eval_stats"],
                   help=FLAG_HELP["eval_stats"] + " (default: %(default)s)")
    _add_config_flag(p)

    p = sub.add_parser("analyze", help="export histograms, sparsity, and a 2-D projection")
    p.add_argument("--model", required=True, help="checkpoint to analyze")
    p.add_argument("--data", required=True, help="labeled BNCF file to tap")
    p.add_argument("--out-dir", required=True, help="directory for the CSV exports")
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS,
                   help="histogram bins (default: %(default)s)")
    p.add_argument("--tau", type=float, default=analysis.DEFAULT_SPARSITY_THRESHOLD,
                   help="near-zero weight threshold (default: %(default)s)")
    p.add_argument("--eval-stats", default="running", choices=FLAG_CHOICES["eval_stats"],
                   help=FLAG_HELP["eval_stats"] + " (default: %(default)s)")
    _add_config_flag(p)

    p = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=42, help="seed for the random cases (default: %(default)s)")
    p.add_argument("--cases", type=int, default=20, help="random cases per component (default: %(default)s)")
    _add_config_flag(p)

    p = sub.add_parser("benchmark", help="multi-seed pipelines over a shift manifest")
    p.add_argument("--manifest", required=True, help="file of 'source -> target [name]' lines")
    p.add_argument("--out", default="metrics.jsonl", help="JSON-lines metrics path (default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent per-seed pipelines (default: %(default)s)")
    _add_dataclass_flags(p, ModelConfig, from_data=_FROM_DATA)
    _add_dataclass_flags(p, RunConfig)
    _add_config_flag(p)

    return parser


def load_manifest(path) -> list[tuple[str, str, str]]:
    """Parse 'source_path -> target_path [name]' lines; '#' starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    shifts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        left, sep, right = line.partition("->")
        source = left.strip()
        rest = right.strip().split()
        if not sep or not source or not rest:
            raise ManifestError(f"{path}: line {lineno}: expected 'source_path -> target_path [name]'")
        target = rest[0]
        name = " ".join(rest[1:]) if len(rest) > 1 else f"{Path(source).stem}->{Path(target).stem}"
        shifts.append((source, target, name))
    if not shifts:
        raise UsageError(f"manifest {path} lists no shifts")
    return shifts


def _config_tokens(path) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    tokens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        flag = key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "false"):
            tokens.append(("--" if value.lower() == "true" else "--no-") + flag)
        else:
            tokens.extend([f"--{flag}", value])
    return tokens


def _inject_config(argv: list[str]) -> list[str]:
    """Expand --config FILE into its flag tokens, placed before the explicit
    flags so the explicit ones take precedence."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return argv
    out, path, rest = [], None, list(argv)
    i = 0
    while i < len(rest):
        a = rest[i]
        if a == "--config":
            if i + 1 >= len(rest):
                raise UsageError("--config requires a file path")
            path = rest[i + 1]
            i += 2
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
            i += 1
        else:
            out.append(a)
            i += 1
    return out[:1] + _config_tokens(path) + out[1:]


def _model_config_from_args(args, ds: FeatureDataset | None) -> ModelConfig:
    values = {}
    for f in dataclasses.fields(ModelConfig):
        v = getattr(args, f.name)
        if v is None and f.name in _FROM_DATA:
            if ds is None:
                raise UsageError(f"--{f.name.replace('_', '-')} is required here")
            v = ds.dim if f.name == "input_dim" else ds.k
        values[f.name] = v
    return ModelConfig(**values).validate()


def _run_config_from_args(args, model_cfg: ModelConfig) -> RunConfig:
    values = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "model":
            continue
        values[f.name] = getattr(args, f.name, f.default)
    return RunConfig(model=model_cfg, **values).validate()


def _cmd_gen_data(args) -> int:
    spec = ShiftSpec(
        rotation_angle=args.rotation_angle,
        scale=args.scale,
        translation_sigma=args.translation_sigma,
        noise_sigma_multiplier=args.noise_sigma_multiplier,
    )
    source, target = generate_shift_pair(args.classes, args.dim, args.n_per_class, spec, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "source.bncf", source)
    write_features(out / "target.bncf", target)
    print(f"wrote {out / 'source.bncf'} and {out / 'target.bncf'} "
          f"({source.n} rows each, {source.dim} dims, {source.k} classes)")
    return 0


def _cmd_train_source(args) -> int:
    source = read_features(args.source)
    model_cfg = _model_config_from_args(args, source)
    cfg = _run_config_from_args(args, model_cfg)
    model = BncModel(model_cfg)
    metrics = training.train_source(model, source, cfg)
    model.save(args.model_out)
    if args.metrics_out:
        Path(args.metrics_out).write_text(
            training.run_jsonl(metrics, Path(args.source).stem, model_cfg.seed)
        )
    final_acc = metrics.records[-1].source_acc if metrics.records else None
    print(f"trained {cfg.epochs_source} epochs on {source.n} rows; "
          f"source accuracy {final_acc if final_acc is not None else 'n/a'}; "
          f"saved {args.model_out}")
    print(f"wall clock: {metrics.wall_clock_s:.2f}s", file=sys.stderr)
    return 0


def _cmd_adapt(args) -> int:
    model = load_model(args.model)
    target = read_features(args.target)
    cfg = _run_config_from_args(args, model.config)
    if args.source is not None and not cfg.cotrain:
        raise UsageError("--source is only meaningful together with --cotrain")
    if cfg.adapt_split < 1.0:
        adapt_ds, eval_ds = split_dataset(target, cfg.adapt_split, model.config.seed)
    else:
        adapt_ds = eval_ds = target
    if cfg.cotrain:
        if args.source is None:
            raise UsageError("--cotrain requires --source")
        source = read_features(args.source)
        metrics = training.adapt_cotrained(model, source, adapt_ds, cfg)
    else:
        metrics = training.adapt_target(model, adapt_ds, cfg)
    model.save(args.model_out)
    if args.metrics_out:
        Path(args.metrics_out).write_text(
            training.run_jsonl(metrics, Path(args.target).stem, model.config.seed)
        )
    final_acc = metrics.final_target_acc
    where = f"{target.n} rows"
    if eval_ds is not adapt_ds:
        where = f"{adapt_ds.n} rows (evaluating on {eval_ds.n} held out)"
        final_acc = analysis.accuracy(model, eval_ds, cfg.eval_stats) if eval_ds.labels is not None else None
    acc = f"{final_acc:.4f}" if final_acc is not None else "n/a (unlabeled)"
    mode = "co-trained" if cfg.cotrain else "source-free"
    print(f"adapted ({mode}) {cfg.epochs_adapt} epochs on {where}; "
          f"target accuracy {acc}; saved {args.model_out}")
    print(f"wall clock: {metrics.wall_clock_s:.2f}s", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_features(args.data)
    acc = analysis.accuracy(model, ds, eval_stats=args.eval_stats)
    print(f"accuracy {acc:.4f} on {ds.n} rows ({args.eval_stats} statistics)")
    return 0


def _cmd_analyze(args) -> int:
    model = load_model(args.model)
    ds = read_features(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tap in ("fc2_out", "sm_in"):
        correct, other, per_channel = analysis.channel_histograms(
            model, ds, tap, bins=args.bins, eval_stats=args.eval_stats
        )
        analysis.export_histogram(correct, out / f"hist_{tap}_correct.csv")
        analysis.export_histogram(other, out / f"hist_{tap}_other.csv")
        for i, hist in enumerate(per_channel):
            analysis.export_histogram(hist, out / f"hist_{tap}_channel{i}.csv")
    report = analysis.weight_sparsity(model, threshold=args.tau)
    with open(out / "sparsity.csv", "w") as fh:
        fh.write("layer,fraction_near_zero,mean_abs_weight,threshold\n")
        for layer in report.layers:
            fh.write(f"{layer.layer},{layer.fraction_near_zero!r},{layer.mean_abs_weight!r},{report.threshold!r}\n")
            analysis.export_histogram(layer.histogram, out / f"weights_{layer.layer}.csv")
    coords, labels = analysis.project_2d(model, ds, eval_stats=args.eval_stats)
    analysis.export_projection(coords, labels, out / "projection.csv")
    analysis.export_sm_inputs(model, ds, out / "sm_inputs.csv", eval_stats=args.eval_stats)
    acc = analysis.accuracy(model, ds, eval_stats=args.eval_stats)
    sep = analysis.separation(model, ds, eval_stats=args.eval_stats)
    print(f"accuracy {acc:.4f}; softmax-input separation {sep:.4f}")
    for layer in report.layers:
        print(f"{layer.layer}: fraction |w| < {report.threshold} is {layer.fraction_near_zero:.4f}, "
              f"mean |w| {layer.mean_abs_weight:.6f}")
    print(f"exports written to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    results = gradcheck.run_all(seed=args.seed, cases=args.cases)
    ok = True
    for name, err in results.items():
        tol = gradcheck.MODEL_TOLERANCE if name == "model" else gradcheck.LAYER_TOLERANCE
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{name}: max relative error {err:.3e} (tolerance {tol:.0e}) [{status}]")
    return 0 if ok else 3


def _cmd_benchmark(args) -> int:
    shifts = load_manifest(args.manifest)
    ds_probe = None
    if args.input_dim is None or args.num_classes is None:
        ds_probe = read_features(shifts[0][0])
    model_cfg = _model_config_from_args(args, ds_probe)
    cfg = _run_config_from_args(args, model_cfg)
    result = training.run_benchmark(shifts, cfg, jobs=args.jobs)
    Path(args.out).write_text(training.benchmark_jsonl(result, cfg))
    for shift in result.shifts:
        if shift.error:
            print(f"{shift.name}: FAILED to load ({shift.error})")
        else:
            print(f"{shift.name}: mean accuracy {shift.mean_acc:.4f} "
                  f"(std {shift.std_acc:.4f}, {len(shift.seeds)} seeds)")
    ok = [s for s in result.shifts if not s.error]
    if ok:
        print(f"grand average over {len(ok)} shifts: {result.grand_average:.4f}")
    print(f"metrics written to {args.out}")
    return 0 if len(ok) == len(result.shifts) else 2


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train-source": _cmd_train_source,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "grad-check": _cmd_grad_check,
    "benchmark": _cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(_inject_config(list(sys.argv[1:] if argv is None else argv)))
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
