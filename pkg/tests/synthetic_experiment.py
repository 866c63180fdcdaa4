"""The pre-registered synthetic benchmark experiment behind the acceptance
criteria: 10 seeded pipelines on the calibrated moderate shift, with the
co-trained variant and the retrained no-BN2 ablation run from the same
source checkpoints.

Run ``python tests/synthetic_experiment.py`` to regenerate
``tests/data/synthetic_reference.json`` after an intentional change to the
calibrated defaults.
"""

import copy
import dataclasses
import json
import time
from pathlib import Path

from bnc import analysis, losses
from bnc.data import ShiftSpec, generate_shift_pair
from bnc.model import BncModel, ModelConfig
from bnc.training import RunConfig, adapt_cotrained, adapt_target, train_source

K, DIM, N_PER_CLASS = 10, 32, 200
BASE_SEED, NUM_SEEDS = 42, 10

REFERENCE_PATH = Path(__file__).parent / "data" / "synthetic_reference.json"


def run_reference_experiment() -> dict:
    spec = ShiftSpec.moderate()
    seeds = []
    benchmark_elapsed = 0.0
    for i in range(NUM_SEEDS):
        seed = BASE_SEED + i
        source, target = generate_shift_pair(K, DIM, N_PER_CLASS, spec, seed)
        model_cfg = ModelConfig(input_dim=DIM, num_classes=K, seed=seed)
        cfg = RunConfig(model=model_cfg)

        t0 = time.perf_counter()
        model = BncModel(model_cfg)
        source_metrics = train_source(model, source, cfg)
        source_acc = source_metrics.records[-1].source_acc
        pre_adapt_acc = analysis.accuracy(model, target)
        snapshot = copy.deepcopy(model)
        pre_entropy = losses.entropy(model.inference_forward(target.features, stats="batch"))
        adapt_metrics = adapt_target(model, target, cfg)
        benchmark_elapsed += time.perf_counter() - t0

        post_entropy = losses.entropy(model.inference_forward(target.features, stats="batch"))
        epoch_entropies = [r.mean_entropy for r in adapt_metrics.records]

        cotrained = copy.deepcopy(snapshot)
        cot_metrics = adapt_cotrained(cotrained, source, target, cfg)

        ablated_cfg = dataclasses.replace(model_cfg, include_bn2=False)
        ablated = BncModel(ablated_cfg)
        train_source(ablated, source, dataclasses.replace(cfg, model=ablated_cfg))
        adapt_target(ablated, target, dataclasses.replace(cfg, model=ablated_cfg))

        _, other_bn2 = analysis.pooled_class_values(model, target, "sm_in")
        _, other_ablated = analysis.pooled_class_values(ablated, target, "sm_in")
        seeds.append(
            {
                "seed": seed,
                "source_acc": source_acc,
                "pre_adapt_acc": pre_adapt_acc,
                "post_adapt_acc": adapt_metrics.final_target_acc,
                "cotrained_acc": cot_metrics.final_target_acc,
                "pre_entropy_batch_stats": pre_entropy,
                "post_entropy_batch_stats": post_entropy,
                "epoch_mean_entropies": epoch_entropies,
                "other_class_std_bn2": float(other_bn2.std()),
                "other_class_std_ablated": float(other_ablated.std()),
                "separation_bn2": analysis.separation(model, target),
                "separation_ablated": analysis.separation(ablated, target),
            }
        )
    return {
        "config": {
            "k": K,
            "dim": DIM,
            "n_per_class": N_PER_CLASS,
            "base_seed": BASE_SEED,
            "num_seeds": NUM_SEEDS,
            "shift_spec": dataclasses.asdict(spec),
            "run": RunConfig(model=ModelConfig(input_dim=DIM, num_classes=K)).to_json_dict(),
        },
        "seeds": seeds,
        "benchmark_elapsed_s_at_calibration": round(benchmark_elapsed, 2),
    }


def load_reference() -> dict:
    return json.loads(REFERENCE_PATH.read_text())


if __name__ == "__main__":
    result = run_reference_experiment()
    REFERENCE_PATH.parent.mkdir(parents=True, exist_ok=True)
    REFERENCE_PATH.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"wrote {REFERENCE_PATH}")
