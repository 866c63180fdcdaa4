"""Self-contained BNCF writer/reader.

The format is the shared contract with the classifier package (which reads
these files with zero conversion): magic "BNCF", u32 version=1, u64 N,
u32 D, u32 k, u8 has_labels, 16-byte zero-padded UTF-8 domain name, N*D
little-endian f32 features row-major, then N little-endian u16 labels when
has_labels is set.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"BNCF"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIB16s")
_DOMAIN_BYTES = 16


def write(path, features: np.ndarray, labels: np.ndarray | None, k: int, domain_name: str) -> None:
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise FormatError(f"features must be a non-empty 2-D array, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise FormatError("refusing to write non-finite features")
    name = domain_name.encode("utf-8")
    if len(name) > _DOMAIN_BYTES:
        raise FormatError(f"domain name {domain_name!r} exceeds {_DOMAIN_BYTES} bytes")
    n, dim = features.shape
    has_labels = labels is not None
    if has_labels:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise FormatError(f"labels shape {labels.shape} does not match {n} rows")
        if labels.min() < 0 or labels.max() >= k:
            raise FormatError(f"labels must lie in [0, {k})")
        if k > 65536:
            raise FormatError(f"k={k} does not fit the u16 label encoding")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dim, k, int(has_labels), name.ljust(_DOMAIN_BYTES, b"\0")))
        fh.write(features.astype("<f4").tobytes())
        if has_labels:
            fh.write(labels.astype("<u2").tobytes())


def read(path) -> tuple[np.ndarray, np.ndarray | None, int, str]:
    """Returns (features f64, labels or None, k, domain_name), fully validated."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: too short for a BNCF header")
    magic, version, n, dim, k, has_labels, name = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or dim < 1 or k < 1 or has_labels not in (0, 1):
        raise FormatError(f"{path}: invalid header fields (N={n}, D={dim}, k={k}, has_labels={has_labels})")
    expected = _HEADER.size + n * dim * 4 + (n * 2 if has_labels else 0)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    try:
        domain = name.split(b"\0", 1)[0].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: domain name is not valid UTF-8") from exc
    features = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=_HEADER.size)
    features = features.astype(np.float64).reshape(n, dim)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=_HEADER.size + n * dim * 4).astype(np.int64)
    return features, labels, int(k), domain
