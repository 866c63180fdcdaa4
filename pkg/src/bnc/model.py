"""The classifier head: a fixed stack of
flatten -> FC(hidden) -> LeakyReLU -> BatchNorm -> Dropout -> FC(k) -> [BatchNorm] -> softmax,
with the second batch-norm removable for the ablation study.

Inputs are pre-extracted backbone features, so the flatten stage is the
identity on the 2-D matrices used here and the input width is configurable:
synthetic low-dimensional experiments and real 2048-dim features share one
code path.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import CheckpointError, DegenerateBatchError, DomainError, ShapeError, StateError
from .layers import EVAL, TRAIN, BatchNorm, Dropout, FcLayer, LeakyRelu, softmax
from .linalg import Matrix, SeededRng

CHECKPOINT_MAGIC = b"BNCM"
CHECKPOINT_VERSION = 1

# rng streams private to a model instance
_STREAM_INIT = 1


@dataclass
class ModelConfig:
    input_dim: int = 2048
    hidden_dim: int = 512
    num_classes: int = 65
    leak: float = 0.2
    dropout_p: float = 0.5
    include_bn2: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_scheme: str = "he"
    seed: int = 42

    def validate(self) -> "ModelConfig":
        for name in ("input_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 <= self.leak < 1.0:
            raise DomainError(f"leak must be in [0, 1), got {self.leak}")
        if self.bn_eps <= 0.0:
            raise DomainError(f"bn_eps must be > 0, got {self.bn_eps}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise DomainError(f"bn_momentum must be in (0, 1), got {self.bn_momentum}")
        if self.init_scheme not in ("he", "xavier"):
            raise DomainError(f"init_scheme must be 'he' or 'xavier', got {self.init_scheme!r}")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"config block is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise CheckpointError(f"config block has unknown fields: {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass
class ActivationTaps:
    """Captured copies of the last FC output and the softmax input.

    When the second batch norm is present the softmax input is its output;
    otherwise the two taps coincide.
    """

    fc2_out: Matrix | None = None
    sm_in: Matrix | None = None


class BncModel:
    """The Table-ordered layer stack with train/eval modes and a BN2 toggle."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.rng = SeededRng(linalg.derive_seed(config.seed, _STREAM_INIT))
        self.fc1 = FcLayer.init(config.input_dim, config.hidden_dim, self.rng, config.init_scheme)
        self.lr1 = LeakyRelu(config.leak)
        self.bn1 = BatchNorm(config.hidden_dim, eps=config.bn_eps, momentum=config.bn_momentum)
        self.do1 = Dropout(config.dropout_p, self.rng)
        self.fc2 = FcLayer.init(config.hidden_dim, config.num_classes, self.rng, config.init_scheme)
        self.bn2 = (
            BatchNorm(config.num_classes, eps=config.bn_eps, momentum=config.bn_momentum)
            if config.include_bn2
            else None
        )
        self.mode = TRAIN
        self._forward_mode: str | None = None

    def set_mode(self, mode: str) -> None:
        if mode not in (TRAIN, EVAL):
            raise DomainError(f"unknown mode {mode!r}")
        self.mode = mode
        self.bn1.set_mode(mode)
        self.do1.set_mode(mode)
        if self.bn2 is not None:
            self.bn2.set_mode(mode)

    def forward(self, x, taps: ActivationTaps | None = None) -> Matrix:
        x = linalg.as_matrix(x, "features")
        if x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"forward: input has {x.shape[1]} columns, model expects {self.config.input_dim}"
            )
        if self.mode == TRAIN and x.shape[0] < 2:
            raise DegenerateBatchError(
                f"train-mode forward needs a batch of >= 2 rows, got {x.shape[0]}"
            )
        h = self.fc1.forward(x)  # flatten is the identity on 2-D features
        h = self.lr1.forward(h)
        h = self.bn1.forward(h)
        h = self.do1.forward(h)
        z = self.fc2.forward(h)
        sm_in = self.bn2.forward(z) if self.bn2 is not None else z
        if taps is not None:
            taps.fc2_out = z.copy()
            taps.sm_in = sm_in.copy()
        self._forward_mode = self.mode
        return softmax(sm_in)

    def backward(self, d_presoftmax) -> None:
        """Accumulate parameter gradients from the pre-softmax gradient.

        The input gradient is computed and discarded: the backbone producing
        the features is frozen.
        """
        if self.mode != TRAIN:
            raise StateError("backward requires train mode")
        if self._forward_mode != TRAIN:
            raise StateError("backward requires a preceding train-mode forward")
        g = linalg.as_matrix(d_presoftmax, "d_presoftmax")
        if self.bn2 is not None:
            g = self.bn2.backward(g)
        g = self.fc2.backward(g)
        g = self.do1.backward(g)
        g = self.bn1.backward(g)
        g = self.lr1.backward(g)
        self.fc1.backward(g)

    def inference_forward(self, x, taps: ActivationTaps | None = None, stats: str = "running") -> Matrix:
        """Measurement forward: dropout off, running statistics untouched.

        ``stats="running"`` is the standard eval pass; ``stats="batch"``
        normalizes with the statistics of ``x`` itself (requires >= 2 rows).
        """
        if stats not in ("running", "batch"):
            raise DomainError(f"stats must be 'running' or 'batch', got {stats!r}")
        saved_mode = self.mode
        saved_track = self.bn1.track_running
        try:
            self.set_mode(EVAL)
            if stats == "batch":
                self.bn1.set_mode(TRAIN)
                self.bn1.track_running = False
                if self.bn2 is not None:
                    self.bn2.set_mode(TRAIN)
                    self.bn2.track_running = False
            return self.forward(x, taps)
        finally:
            self.bn1.track_running = saved_track
            if self.bn2 is not None:
                self.bn2.track_running = saved_track
            self.set_mode(saved_mode)

    # -- parameter access (fixed stack order) --------------------------------

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        params = [
            ("fc1.weight", self.fc1.weight),
            ("fc1.bias", self.fc1.bias),
            ("bn1.gamma", self.bn1.gamma),
            ("bn1.beta", self.bn1.beta),
            ("fc2.weight", self.fc2.weight),
            ("fc2.bias", self.fc2.bias),
        ]
        if self.bn2 is not None:
            params += [("bn2.gamma", self.bn2.gamma), ("bn2.beta", self.bn2.beta)]
        return params

    def grads(self) -> list[tuple[str, np.ndarray]]:
        grads = [
            ("fc1.weight", self.fc1.grad_weight),
            ("fc1.bias", self.fc1.grad_bias),
            ("bn1.gamma", self.bn1.grad_gamma),
            ("bn1.beta", self.bn1.grad_beta),
            ("fc2.weight", self.fc2.grad_weight),
            ("fc2.bias", self.fc2.grad_bias),
        ]
        if self.bn2 is not None:
            grads += [("bn2.gamma", self.bn2.grad_gamma), ("bn2.beta", self.bn2.grad_beta)]
        return grads

    def zero_grads(self) -> None:
        for _, g in self.grads():
            g[...] = 0.0

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def _state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters plus running statistics, in checkpoint order."""
        arrays = [
            ("fc1.weight", self.fc1.weight),
            ("fc1.bias", self.fc1.bias),
            ("bn1.gamma", self.bn1.gamma),
            ("bn1.beta", self.bn1.beta),
            ("bn1.running_mean", self.bn1.running_mean),
            ("bn1.running_var", self.bn1.running_var),
            ("fc2.weight", self.fc2.weight),
            ("fc2.bias", self.fc2.bias),
        ]
        if self.bn2 is not None:
            arrays += [
                ("bn2.gamma", self.bn2.gamma),
                ("bn2.beta", self.bn2.beta),
                ("bn2.running_mean", self.bn2.running_mean),
                ("bn2.running_var", self.bn2.running_var),
            ]
        return arrays

    # -- checkpoint I/O -------------------------------------------------------

    def save(self, path) -> None:
        """Write a BNCM checkpoint: magic, version, config JSON, then all
        parameter and running-statistic arrays as little-endian float64 in
        the fixed stack order. Round-trips bit-exactly."""
        config_blob = self.config.to_json().encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(config_blob)))
            fh.write(config_blob)
            for _, arr in self._state_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> BncModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12:
        raise CheckpointError(f"checkpoint {path} is truncated (only {len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint {path} has bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported version {version}")
    (config_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + config_len:
        raise CheckpointError(f"checkpoint {path} is truncated inside the config block")
    try:
        config_text = blob[12 : 12 + config_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt config block") from exc
    config = ModelConfig.from_json(config_text)
    model = BncModel(config)
    offset = 12 + config_len
    for name, arr in model._state_arrays():
        nbytes = arr.size * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated inside {name}")
        values = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=offset)
        arr[...] = values.reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    for name, arr in model._state_arrays():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"checkpoint {path}: non-finite values in {name}")
    return model
