"""Dense float64 matrices, a deterministic PRNG, and the primitive operations
every layer is built from.

A ``Matrix`` is a plain 2-D C-contiguous ``numpy.ndarray`` of float64; row
vectors (biases, batch-norm parameters, per-column statistics) are 1-D arrays.
Arrays are treated as immutable once returned: no operation in this package
mutates its inputs. All operations are shape-checked and guarantee finite
outputs (no NaN/Inf).

The heavy paths are delegated to numpy. The naive triple-loop reference
implementations live in the test suite and every numpy-backed operation is
required to agree with them to 1e-12.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

Matrix = np.ndarray

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SeededRng:
    """Deterministic 64-bit PRNG (splitmix64).

    The state advances by the golden-ratio increment and each output is the
    splitmix64 finalizer of the new state, so the stream is a pure function
    of a counter. That makes scalar generation (``next_u64``) and vectorized
    block generation (``next_u64_block``) produce bit-identical streams,
    which is why splitmix64 was chosen over stateful generators: the training
    loop draws single values while weight init and dropout draw large blocks,
    and both must replay exactly from a seed on any platform.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def get_state(self) -> int:
        return self._state

    def set_state(self, state: int) -> None:
        self._state = state & _MASK64

    def reseed(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_u64_block(self, n: int) -> np.ndarray:
        """n consecutive outputs, identical to n calls of ``next_u64``."""
        if n < 0:
            raise DomainError(f"block size must be >= 0, got {n}")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform_block(self, n: int, open_zero: bool = False) -> np.ndarray:
        """n uniforms from the top 53 bits of the stream.

        Default range is [0, 1); ``open_zero`` shifts it to (0, 1] for use
        under a logarithm.
        """
        bits = self.next_u64_block(n) >> np.uint64(11)
        if open_zero:
            bits = bits + np.uint64(1)
        return bits.astype(np.float64) * (2.0 ** -53)


def derive_seed(base: int, stream: int) -> int:
    """Decorrelated child seed for an independent stream of a run."""
    return SeededRng((base & _MASK64) ^ ((stream * _GAMMA) & _MASK64)).next_u64()


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Validate/convert to a 2-D C-contiguous float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={a.ndim}")
    return a

def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D row vector, got ndim={a.ndim}")
    return a

def check_finite(a: np.ndarray, context: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise DomainError(f"{context}: non-finite values produced")
    return a


def matmul(a, b) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):  # overflow becomes a typed error
        return check_finite(a @ b, "matmul")

def transpose(a) -> Matrix:
    return np.ascontiguousarray(as_matrix(a, "a").T)

def add(a, b) -> Matrix:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes disagree: {a.shape} vs {b.shape}")
    return check_finite(a + b, "add")

def sub(a, b) -> Matrix:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes disagree: {a.shape} vs {b.shape}")
    return check_finite(a - b, "sub")

def mul(a, b) -> Matrix:
    """Elementwise (Hadamard) product."""
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes disagree: {a.shape} vs {b.shape}")
    return check_finite(a * b, "mul")

def scale(a, s: float) -> Matrix:
    return check_finite(as_matrix(a, "a") * float(s), "scale")

def add_row(a, row) -> Matrix:
    """Broadcast-add a row vector to every row of ``a``."""
    a = as_matrix(a, "a")
    row = as_vector(row, "row")
    if a.shape[1] != row.shape[0]:
        raise ShapeError(f"add_row: matrix has {a.shape[1]} columns, row has {row.shape[0]}")
    return check_finite(a + row, "add_row")

def row_sums(a) -> np.ndarray:
    return as_matrix(a, "a").sum(axis=1)

def col_sums(a) -> np.ndarray:
    return as_matrix(a, "a").sum(axis=0)


def col_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased (divide-by-N) variance."""
    x = as_matrix(x, "x")
    if x.shape[0] < 1:
        raise DomainError("col_stats: matrix has no rows")
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), 0.0)  # biased estimator; clamp -0.0
    check_finite(mean, "col_stats mean")
    check_finite(var, "col_stats var")
    return mean, var


def randn(rng: SeededRng, rows: int, cols: int, mu: float = 0.0, sigma: float = 1.0) -> Matrix:
    """rows x cols of i.i.d. N(mu, sigma^2) samples via Box-Muller.

    Consumes 2*ceil(rows*cols/2) stream values: first half become radii
    (from (0,1] uniforms), second half angles. Pair outputs are interleaved
    (cos, sin) and the sequence is truncated to rows*cols, row-major.
    """
    if sigma < 0:
        raise DomainError(f"randn: sigma must be >= 0, got {sigma}")
    if rows < 0 or cols < 0:
        raise DomainError(f"randn: negative shape ({rows}, {cols})")
    n = rows * cols
    if n == 0:
        return np.zeros((rows, cols))
    pairs = (n + 1) // 2
    u1 = rng.uniform_block(pairs, open_zero=True)
    u2 = rng.uniform_block(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = (mu + sigma * z[:n]).reshape(rows, cols)
    return check_finite(out, "randn")


def permutation(rng: SeededRng, n: int) -> np.ndarray:
    """Fisher-Yates permutation of 0..n-1, deterministic given the seed."""
    if n < 0:
        raise DomainError(f"permutation: n must be >= 0, got {n}")
    idx = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx
