"""The two training objectives and their gradients with respect to the
pre-softmax activations.

Both losses are means over the minibatch and use natural logarithms, with
probabilities clamped at 1e-12 before the log for numerical stability.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import DomainError, ShapeError
from .linalg import Matrix

PROB_CLAMP = 1e-12


def one_hot(labels, num_classes: int) -> Matrix:
    """N x k one-hot matrix from integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError(f"one_hot: labels must be 1-D, got ndim={labels.ndim}")
    if num_classes < 1:
        raise DomainError(f"one_hot: num_classes must be >= 1, got {num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(
            f"one_hot: labels must lie in [0, {num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def validate_one_hot(y) -> Matrix:
    y = linalg.as_matrix(y, "labels")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise DomainError("labels are not one-hot (exactly one 1 per row)")
    return y


def _check_pair(y_hat, y) -> tuple[Matrix, Matrix]:
    y_hat = linalg.as_matrix(y_hat, "y_hat")
    y = validate_one_hot(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"loss: predictions {y_hat.shape} vs labels {y.shape}")
    return y_hat, y


def cross_entropy(y_hat, y) -> float:
    """Mean over the batch of -sum_c y_c * log(max(y_hat_c, 1e-12))."""
    y_hat, y = _check_pair(y_hat, y)
    logs = np.log(np.maximum(y_hat, PROB_CLAMP))
    return float(-(y * logs).sum() / y_hat.shape[0])


def entropy(y_hat) -> float:
    """Mean over the batch of -sum_c y_hat_c * log(max(y_hat_c, 1e-12))."""
    y_hat = linalg.as_matrix(y_hat, "y_hat")
    logs = np.log(np.maximum(y_hat, PROB_CLAMP))
    return float(-(y_hat * logs).sum() / y_hat.shape[0])


def ce_grad_wrt_presoftmax(y_hat, y) -> Matrix:
    """Gradient of cross_entropy(softmax(z), y) with respect to z: (y_hat - y) / N."""
    y_hat, y = _check_pair(y_hat, y)
    return (y_hat - y) / y_hat.shape[0]


def entropy_grad_wrt_presoftmax(y_hat) -> Matrix:
    """Gradient of entropy(softmax(z)) with respect to z.

    With s_c = log(y_hat_c) + 1 and s_bar = sum_c y_hat_c * s_c, the gradient
    is y_hat * (s_bar - s) / N: the softmax Jacobian applied to
    -(log(y_hat) + 1) / N. Each output row sums to zero.
    """
    y_hat = linalg.as_matrix(y_hat, "y_hat")
    s = np.log(np.maximum(y_hat, PROB_CLAMP)) + 1.0
    s_bar = (y_hat * s).sum(axis=1, keepdims=True)
    return y_hat * (s_bar - s) / y_hat.shape[0]
