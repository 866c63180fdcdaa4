"""Central finite-difference verification of every analytic gradient.

The oracle side never touches backward code: it re-evaluates the forward
pass at perturbed inputs. ``run_all`` drives randomized suites for each
layer (fixed dropout mask) and for the whole model with dropout disabled,
returning the worst relative error per component.
"""

from __future__ import annotations

import numpy as np

from . import losses
from .layers import BatchNorm, Dropout, FcLayer, LeakyRelu
from .linalg import SeededRng, randn
from .model import BncModel, ModelConfig

FD_STEP = 1e-5
REL_FLOOR = 1e-6

LAYER_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d f / d x by central differences, one entry at a time."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _rand_dims(rng: SeededRng, lo: int = 2, hi: int = 7) -> int:
    return lo + rng.next_u64() % (hi - lo + 1)


def check_fc(seed: int = 0, cases: int = 20) -> float:
    rng = SeededRng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d_in, d_out = _rand_dims(rng), _rand_dims(rng), _rand_dims(rng)
        layer = FcLayer(randn(rng, d_in, d_out), randn(rng, 1, d_out)[0])
        x = randn(rng, n, d_in)
        w = randn(rng, n, d_out)  # fixed weighting makes the loss a scalar

        def loss():
            return float((layer.forward(x) * w).sum())

        loss()
        layer.grad_weight[...] = 0.0
        layer.grad_bias[...] = 0.0
        dx = layer.backward(w)
        worst = max(worst, max_rel_error(dx, central_diff(loss, x)))
        worst = max(worst, max_rel_error(layer.grad_weight, central_diff(loss, layer.weight)))
        worst = max(worst, max_rel_error(layer.grad_bias, central_diff(loss, layer.bias)))
    return worst


def check_leaky_relu(seed: int = 1, cases: int = 20) -> float:
    rng = SeededRng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d = _rand_dims(rng), _rand_dims(rng)
        layer = LeakyRelu(0.2)
        x = randn(rng, n, d)
        w = randn(rng, n, d)

        def loss():
            return float((layer.forward(x) * w).sum())

        loss()
        dx = layer.backward(w)
        worst = max(worst, max_rel_error(dx, central_diff(loss, x)))
    return worst


def check_batchnorm(seed: int = 2, cases: int = 20) -> float:
    rng = SeededRng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d = 8, 5
        layer = BatchNorm(d)
        layer.track_running = False  # keep the forward a pure function for the oracle
        layer.gamma[...] = randn(rng, 1, d)[0]
        layer.beta[...] = randn(rng, 1, d)[0]
        x = randn(rng, n, d)
        w = randn(rng, n, d)

        def loss():
            return float((layer.forward(x) * w).sum())

        loss()
        layer.grad_gamma[...] = 0.0
        layer.grad_beta[...] = 0.0
        dx = layer.backward(w)
        worst = max(worst, max_rel_error(dx, central_diff(loss, x)))
        worst = max(worst, max_rel_error(layer.grad_gamma, central_diff(loss, layer.gamma)))
        worst = max(worst, max_rel_error(layer.grad_beta, central_diff(loss, layer.beta)))
    return worst


def check_dropout(seed: int = 3, cases: int = 20) -> float:
    rng = SeededRng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d = _rand_dims(rng), _rand_dims(rng)
        layer = Dropout(0.5, SeededRng(rng.next_u64()))
        mask_state = layer.rng.get_state()
        x = randn(rng, n, d)
        w = randn(rng, n, d)

        def loss():
            layer.rng.set_state(mask_state)  # same mask on every evaluation
            return float((layer.forward(x) * w).sum())

        loss()
        dx = layer.backward(w)
        worst = max(worst, max_rel_error(dx, central_diff(loss, x)))
    return worst


def check_model(seed: int = 4, cases: int = 20) -> float:
    """Whole-stack check at tiny dims, dropout disabled, batch statistics frozen."""
    rng = SeededRng(seed)
    worst = 0.0
    for case in range(cases):
        config = ModelConfig(
            input_dim=8, hidden_dim=6, num_classes=4, dropout_p=0.0,
            include_bn2=True, seed=seed * 1000 + case,
        )
        model = BncModel(config)
        model.set_mode("train")
        model.bn1.track_running = False
        model.bn2.track_running = False
        x = randn(rng, 5, config.input_dim)
        labels = np.array([rng.next_u64() % config.num_classes for _ in range(5)])
        y = losses.one_hot(labels, config.num_classes)

        def loss():
            return losses.cross_entropy(model.forward(x), y)

        y_hat = model.forward(x)
        model.zero_grads()
        model.backward(losses.ce_grad_wrt_presoftmax(y_hat, y))
        analytic = {name: g.copy() for name, g in model.grads()}
        for name, param in model.parameters():
            numeric = central_diff(loss, param)
            worst = max(worst, max_rel_error(analytic[name], numeric))
    return worst


def run_all(seed: int = 42, cases: int = 20) -> dict[str, float]:
    """Max relative error per component; layers must clear 1e-5, the model 1e-4."""
    return {
        "fc": check_fc(seed, cases),
        "leaky_relu": check_leaky_relu(seed + 1, cases),
        "batchnorm": check_batchnorm(seed + 2, cases),
        "dropout": check_dropout(seed + 3, cases),
        "model": check_model(seed + 4, cases),
    }


def passed(results: dict[str, float]) -> bool:
    return all(
        err < (MODEL_TOLERANCE if name == "model" else LAYER_TOLERANCE)
        for name, err in results.items()
    )
