"""Flat parameter vectors, task vectors, merge coefficients and the ``.mrgl`` format.

Parameter vectors are plain 1-D ``float64`` numpy arrays marked read-only.
Every public function here validates its inputs and returns a fresh array.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

from . import kernels

MAGIC = b"MRGL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")

SIMPLEX_TOL = 1e-12
NORMALIZE_TOL = 1e-9

PathOrFile = Union[str, os.PathLike, BinaryIO]


class DimensionMismatchError(ValueError):
    pass


class ParamFormatError(ValueError):
    """Base class for malformed parameter files."""


class BadMagicError(ParamFormatError):
    pass


class VersionMismatchError(ParamFormatError):
    pass


class TruncatedPayloadError(ParamFormatError):
    pass


class TrailingBytesError(ParamFormatError):
    pass


def as_params(values, *, name: str = "params") -> np.ndarray:
    """Validate ``values`` as a parameter vector and return a read-only copy."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def _frozen(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} produced non-finite entries")
    arr.flags.writeable = False
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray, left: str, right: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"dimension mismatch: {left} has dim {a.shape[0]}, {right} has dim {b.shape[0]}"
        )


@dataclass(frozen=True)
class MergeCoefficients:
    """Non-negative merge weights summing to one.

    Inputs within ``NORMALIZE_TOL`` of the simplex are renormalized; inputs
    already within ``SIMPLEX_TOL`` are stored unchanged so that e.g.
    ``[1/3, 1/3, 1/3]`` keeps its exact bits.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if w.size == 0:
            raise ValueError("merge coefficients must be non-empty")
        if not np.all(np.isfinite(w)):
            raise ValueError("merge coefficients must be finite")
        if np.any(w < 0):
            raise ValueError(f"merge coefficients must be non-negative, got {w.tolist()}")
        total = float(np.sum(w))
        dev = abs(total - 1.0)
        if dev > NORMALIZE_TOL:
            raise ValueError(f"merge coefficients sum to {total!r}, not 1")
        if dev > SIMPLEX_TOL:
            w = w / total
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n: int) -> "MergeCoefficients":
        if n < 1:
            raise ValueError("need at least one task")
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.weights.shape[0]

    def __iter__(self):
        return iter(self.weights.tolist())

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def tolist(self) -> list[float]:
        return self.weights.tolist()


def coerce_coefficients(coeffs) -> MergeCoefficients:
    if isinstance(coeffs, MergeCoefficients):
        return coeffs
    return MergeCoefficients(np.asarray(coeffs, dtype=np.float64))


def task_vector(expert, base) -> np.ndarray:
    """Return ``expert - base``."""
    e = as_params(expert, name="expert")
    b = as_params(base, name="base")
    _check_dims(e, b, "expert", "base")
    return _frozen(e - b, "task_vector")


def merge_linear(base, taskvecs: Sequence, coeffs) -> np.ndarray:
    """``base + sum_i coeffs[i] * taskvecs[i]``, accumulated in task order."""
    b = as_params(base, name="base")
    lam = coerce_coefficients(coeffs)
    if len(taskvecs) != len(lam):
        raise ValueError(
            f"got {len(taskvecs)} task vectors but {len(lam)} coefficients"
        )
    out = b.copy()
    for i, (w, tv) in enumerate(zip(lam.weights, taskvecs)):
        t = np.asarray(tv, dtype=np.float64)
        _check_dims(b, t, "base", f"task vector {i}")
        out += w * t
    return _frozen(out, "merge_linear")


def squared_distance(a, b) -> float:
    """Squared Euclidean distance, summed sequentially in index order."""
    x = np.ascontiguousarray(a, dtype=np.float64)
    y = np.ascontiguousarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("squared_distance expects 1-D vectors")
    _check_dims(x, y, "a", "b")
    return float(kernels.sq_dist(x, y))


def _encode(v: np.ndarray) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, v.shape[0]) + v.astype("<f8").tobytes()


def write_params(v, sink: PathOrFile) -> None:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError("refusing to write an empty or non-1-D parameter vector")
    arr = as_params(arr)
    payload = _encode(arr)
    if hasattr(sink, "write"):
        sink.write(payload)
    else:
        with open(sink, "wb") as fh:
            fh.write(payload)


def decode_params(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    _, version, dim = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    if dim == 0:
        raise ParamFormatError("parameter file declares dim 0")
    expected = _HEADER.size + 8 * dim
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"truncated payload: need {expected} bytes for dim {dim}, got {len(data)}"
        )
    if len(data) > expected:
        raise TrailingBytesError(f"{len(data) - expected} trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f8", count=dim, offset=_HEADER.size)
    return as_params(values.astype(np.float64))


def read_params(source: PathOrFile) -> np.ndarray:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return decode_params(bytes(data))


def params_to_bytes(v) -> bytes:
    buf = io.BytesIO()
    write_params(v, buf)
    return buf.getvalue()


def stack(vectors: Iterable) -> np.ndarray:
    """Stack same-dimension vectors into an ``(N, d)`` array."""
    rows = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not rows:
        raise ValueError("nothing to stack")
    for i, r in enumerate(rows[1:], start=1):
        _check_dims(rows[0], r, "vector 0", f"vector {i}")
    return np.stack(rows)
