"""Forward and backward passes for the layers of the refinement head.

Each layer owns its parameters, gradient buffers of matching shape, and the
activation caches its backward pass needs. Backward calls accumulate into the
gradient buffers; the optimizer zeroes them after each update.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import DegenerateBatchError, DomainError, ShapeError, StateError
from .linalg import Matrix, SeededRng

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> str:
    if mode not in (TRAIN, EVAL):
        raise DomainError(f"unknown mode {mode!r}, expected 'train' or 'eval'")
    return mode


def init_std(scheme: str, fan_in: int, fan_out: int) -> float:
    """Weight-init standard deviation: He (default) or Xavier/Glorot."""
    if scheme == "he":
        return float(np.sqrt(2.0 / fan_in))
    if scheme == "xavier":
        return float(np.sqrt(2.0 / (fan_in + fan_out)))
    raise DomainError(f"unknown init scheme {scheme!r}")


class FcLayer:
    """Fully connected layer: y = x @ W + b."""

    def __init__(self, weight, bias):
        self.weight = linalg.as_matrix(weight, "weight")
        self.bias = linalg.as_vector(bias, "bias")
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"fc: weight is {self.weight.shape} but bias has {self.bias.shape[0]} entries"
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache_input: Matrix | None = None

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: SeededRng, scheme: str = "he") -> "FcLayer":
        std = init_std(scheme, in_dim, out_dim)
        weight = linalg.randn(rng, in_dim, out_dim, 0.0, std)
        return cls(weight, np.zeros(out_dim))

    def forward(self, x) -> Matrix:
        x = linalg.as_matrix(x, "x")
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"fc forward: input has {x.shape[1]} columns, weight expects {self.weight.shape[0]}"
            )
        self._cache_input = x
        return linalg.add_row(linalg.matmul(x, self.weight), self.bias)

    def backward(self, d_out) -> Matrix:
        if self._cache_input is None:
            raise StateError("fc backward called before forward")
        d_out = linalg.as_matrix(d_out, "d_out")
        x = self._cache_input
        if d_out.shape != (x.shape[0], self.weight.shape[1]):
            raise ShapeError(
                f"fc backward: gradient shape {d_out.shape} does not match "
                f"forward output {(x.shape[0], self.weight.shape[1])}"
            )
        self.grad_weight += x.T @ d_out
        self.grad_bias += d_out.sum(axis=0)
        return d_out @ self.weight.T


class LeakyRelu:
    """f(x) = x for x >= 0, leak * x otherwise. Gradient at exactly 0 is 1."""

    def __init__(self, leak: float):
        if not 0.0 <= leak < 1.0:
            raise DomainError(f"leak must be in [0, 1), got {leak}")
        self.leak = float(leak)
        self._cache_input: Matrix | None = None

    def forward(self, x) -> Matrix:
        x = linalg.as_matrix(x, "x")
        self._cache_input = x
        return np.where(x >= 0.0, x, self.leak * x)

    def backward(self, d_out) -> Matrix:
        if self._cache_input is None:
            raise StateError("leaky relu backward called before forward")
        d_out = linalg.as_matrix(d_out, "d_out")
        x = self._cache_input
        if d_out.shape != x.shape:
            raise ShapeError(f"leaky relu backward: {d_out.shape} vs cached {x.shape}")
        return d_out * np.where(x >= 0.0, 1.0, self.leak)


class BatchNorm:
    """Per-column batch normalization with learnable scale/shift.

    Train mode normalizes with the batch's biased statistics and updates the
    running statistics as running <- (1 - momentum) * running + momentum * batch
    (momentum is the weight of the new batch). Eval mode applies the frozen
    running statistics as a fixed affine map. ``track_running`` lets analysis
    code use batch statistics without perturbing the stored ones.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        if dim < 1:
            raise DomainError(f"batchnorm dim must be >= 1, got {dim}")
        if eps <= 0.0:
            raise DomainError(f"batchnorm eps must be > 0, got {eps}")
        if not 0.0 < momentum < 1.0:
            raise DomainError(f"batchnorm momentum must be in (0, 1), got {momentum}")
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.mode = TRAIN
        self.track_running = True
        self.grad_gamma = np.zeros(dim)
        self.grad_beta = np.zeros(dim)
        self._cache_x_hat: Matrix | None = None
        self._cache_inv_std: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def set_mode(self, mode: str) -> None:
        self.mode = _check_mode(mode)

    def forward(self, x) -> Matrix:
        x = linalg.as_matrix(x, "x")
        if x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm: input has {x.shape[1]} columns, layer has {self.dim}")
        if self.mode == TRAIN:
            if x.shape[0] < 2:
                raise DegenerateBatchError(
                    f"batchnorm train mode needs a batch of >= 2 rows, got {x.shape[0]}"
                )
            mean, var = linalg.col_stats(x)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            if self.track_running:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mean
                self.running_var = (1.0 - m) * self.running_var + m * var
            self._cache_x_hat = x_hat
            self._cache_inv_std = inv_std
            return self.gamma * x_hat + self.beta
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * ((x - self.running_mean) * inv_std) + self.beta

    def backward(self, d_out) -> Matrix:
        if self.mode != TRAIN:
            raise StateError("batchnorm backward is only defined in train mode")
        if self._cache_x_hat is None:
            raise StateError("batchnorm backward called before a train-mode forward")
        d_out = linalg.as_matrix(d_out, "d_out")
        x_hat = self._cache_x_hat
        if d_out.shape != x_hat.shape:
            raise ShapeError(f"batchnorm backward: {d_out.shape} vs cached {x_hat.shape}")
        n = x_hat.shape[0]
        self.grad_gamma += (d_out * x_hat).sum(axis=0)
        self.grad_beta += d_out.sum(axis=0)
        # Full chain rule through the batch mean and variance: projecting out
        # the per-column mean and the x_hat direction.
        d_x_hat = d_out * self.gamma
        d_x = (self._cache_inv_std / n) * (
            n * d_x_hat
            - d_x_hat.sum(axis=0)
            - x_hat * (d_x_hat * x_hat).sum(axis=0)
        )
        return d_x


class Dropout:
    """Inverted dropout: kept entries are scaled by 1/(1-p) so eval is exact identity."""

    def __init__(self, p: float, rng: SeededRng):
        if not 0.0 <= p < 1.0:
            raise DomainError(f"dropout p must be in [0, 1), got {p}")
        self.p = float(p)
        self.rng = rng
        self.mode = TRAIN
        self.mask: Matrix | None = None

    def set_mode(self, mode: str) -> None:
        self.mode = _check_mode(mode)

    def forward(self, x) -> Matrix:
        x = linalg.as_matrix(x, "x")
        if self.mode == EVAL or self.p == 0.0:
            # identity; no stream values consumed
            self.mask = None
            return x
        u = self.rng.uniform_block(x.size).reshape(x.shape)
        self.mask = np.where(u >= self.p, 1.0 / (1.0 - self.p), 0.0)
        return x * self.mask

    def backward(self, d_out) -> Matrix:
        d_out = linalg.as_matrix(d_out, "d_out")
        if self.mask is None:
            return d_out
        if d_out.shape != self.mask.shape:
            raise ShapeError(f"dropout backward: {d_out.shape} vs mask {self.mask.shape}")
        return d_out * self.mask


def softmax(z) -> Matrix:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    z = linalg.as_matrix(z, "z")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
