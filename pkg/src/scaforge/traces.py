"""Trace dataset container, SCAT file format, standardization, and splits.

A TraceSet is the universal dataset currency: an N x L sample matrix
(widened to float64 in memory) plus per-trace plaintext/key/label metadata.
The on-disk form is the little-endian "SCAT" container described in
`save_native`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import aes

MAGIC = b"SCAT"
VERSION = 1

# dtype codes in the SCAT header
_DTYPE_CODES = {"f32": 1, "i8": 2, "i16": 3}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("<i1"), "i16": np.dtype("<i2")}

_FLAG_KEYS = 0x0001
_FLAG_LABELS = 0x0002

_HEADER = struct.Struct("<4sHHQIBB6s")


class ScatError(Exception):
    """Base class for SCAT container errors."""


class BadMagicError(ScatError):
    pass


class UnsupportedVersionError(ScatError):
    pass


class UnsupportedDtypeError(ScatError):
    pass


class UnsupportedFlagsError(ScatError):
    pass


class TruncatedFileError(ScatError):
    pass


class MetadataMismatchError(ScatError):
    pass


@dataclass
class TraceSet:
    """N traces of L samples each, with per-trace metadata.

    samples holds float64 regardless of the stored dtype; source_dtype
    records the on-disk representation so round-trips are bit-exact.
    """

    samples: np.ndarray            # (N, L) float64
    plaintexts: np.ndarray         # (N, 16) uint8
    keys: Optional[np.ndarray] = None    # (N, 16) uint8 when known
    labels: Optional[np.ndarray] = None  # (N,) uint8 when known
    byte_index: int = 2
    source_dtype: str = "f32"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.plaintexts = np.ascontiguousarray(self.plaintexts, dtype=np.uint8)
        if self.keys is not None:
            self.keys = np.ascontiguousarray(self.keys, dtype=np.uint8)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.validate()

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def trace_len(self) -> int:
        return self.samples.shape[1]

    def validate(self) -> None:
        n, _ = self.samples.shape
        if n < 1 or self.trace_len < 1:
            raise ValueError("TraceSet requires N >= 1 and L >= 1")
        if not 0 <= self.byte_index <= 15:
            raise ValueError("byte_index must be in 0..15")
        if self.source_dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported source dtype {self.source_dtype!r}")
        if self.plaintexts.shape != (n, 16):
            raise ValueError("plaintexts must have shape (N, 16)")
        if self.keys is not None and self.keys.shape != (n, 16):
            raise ValueError("keys must have shape (N, 16)")
        if self.labels is not None and self.labels.shape != (n,):
            raise ValueError("labels must have shape (N,)")
        if self.labels is not None and self.keys is not None:
            expected = aes.sbox_label(self.plaintexts[:, self.byte_index],
                                      self.keys[:, self.byte_index])
            if not np.array_equal(expected, self.labels):
                raise ValueError("labels do not match Sbox(pt XOR key) at byte_index")


def save_native(tset: TraceSet, path) -> None:
    """Write a TraceSet as a SCAT v1 container (little-endian).

    Layout: magic "SCAT"; u16 version=1; u16 flags (bit0 keys, bit1 labels);
    u64 n_traces; u32 trace_len; u8 dtype (1=f32, 2=i8, 3=i16); u8 byte_index;
    6 reserved zero bytes; then samples row-major in the stored dtype,
    plaintexts (N x 16), keys (N x 16, iff bit0), labels (N, iff bit1).
    """
    flags = 0
    if tset.keys is not None:
        flags |= _FLAG_KEYS
    if tset.labels is not None:
        flags |= _FLAG_LABELS
    header = _HEADER.pack(MAGIC, VERSION, flags, tset.n_traces, tset.trace_len,
                          _DTYPE_CODES[tset.source_dtype], tset.byte_index, b"\0" * 6)
    stored = tset.samples.astype(_NUMPY_DTYPES[tset.source_dtype])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stored.tobytes())
        fh.write(tset.plaintexts.tobytes())
        if tset.keys is not None:
            fh.write(tset.keys.tobytes())
        if tset.labels is not None:
            fh.write(tset.labels.tobytes())


def load_native(path) -> TraceSet:
    """Read a SCAT container; inverse of save_native."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError("file shorter than SCAT header")
    magic, version, flags, n, length, dtype_code, byte_index, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype_code not in _DTYPE_NAMES:
        raise UnsupportedDtypeError(f"unknown dtype code {dtype_code}")
    if flags & ~(_FLAG_KEYS | _FLAG_LABELS):
        raise UnsupportedFlagsError(f"reserved flag bits set: {flags:#06x}")

    dtype_name = _DTYPE_NAMES[dtype_code]
    np_dtype = _NUMPY_DTYPES[dtype_name]
    expected = n * length * np_dtype.itemsize + n * 16
    if flags & _FLAG_KEYS:
        expected += n * 16
    if flags & _FLAG_LABELS:
        expected += n
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, need {expected}")
    if len(payload) > expected:
        raise MetadataMismatchError(f"payload has {len(payload)} bytes, expected {expected}")

    off = 0
    samples = np.frombuffer(payload, dtype=np_dtype, count=n * length, offset=off)
    samples = samples.reshape(n, length).astype(np.float64)
    off += n * length * np_dtype.itemsize
    plaintexts = np.frombuffer(payload, dtype=np.uint8, count=n * 16, offset=off).reshape(n, 16)
    off += n * 16
    keys = None
    if flags & _FLAG_KEYS:
        keys = np.frombuffer(payload, dtype=np.uint8, count=n * 16, offset=off).reshape(n, 16)
        off += n * 16
    labels = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off)

    try:
        return TraceSet(samples=samples, plaintexts=plaintexts.copy(),
                        keys=None if keys is None else keys.copy(),
                        labels=None if labels is None else labels.copy(),
                        byte_index=byte_index, source_dtype=dtype_name)
    except ValueError as exc:
        raise MetadataMismatchError(str(exc)) from exc


@dataclass
class Scaler:
    """Per-feature mean/std fitted on profiling data only."""

    mean: np.ndarray
    std: np.ndarray


def fit_scaler(profiling: TraceSet) -> Scaler:
    """Column means and population standard deviations of the profiling set.

    Columns with std below 1e-12 get std 1.0 so constant features map to
    zero instead of blowing up.
    """
    mean = profiling.samples.mean(axis=0)
    std = profiling.samples.std(axis=0)  # population: divide by N
    std = np.where(std < 1e-12, 1.0, std)
    return Scaler(mean=mean, std=std)


def apply_scaler(scaler: Scaler, tset: TraceSet) -> TraceSet:
    """Standardize samples with a fitted scaler; metadata unchanged."""
    if tset.trace_len != scaler.mean.shape[0]:
        raise ValueError(f"scaler fitted for L={scaler.mean.shape[0]}, "
                         f"set has L={tset.trace_len}")
    return replace(tset, samples=(tset.samples - scaler.mean) / scaler.std)


def select_features(tset: TraceSet, indices: Sequence[int]) -> TraceSet:
    """Restrict samples to the listed columns, in the listed order."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= tset.trace_len):
        raise IndexError("feature index out of bounds")
    return replace(tset, samples=tset.samples[:, idx])


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic k-fold split of 0..n-1 into (train, validation) pairs.

    Validation folds partition the index range with sizes differing by at
    most one.
    """
    if not 2 <= k <= n:
        raise ValueError(f"k must satisfy 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, val in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(val)))
    return out
