"""ASCAD HDF5 to SCAT conversion.

A pure format bridge: traces and per-trace metadata are copied byte-exactly
into the SCAT v1 container, labels are always recomputed from plaintext and
key (and cross-checked against stored labels when the source carries them),
and nothing is standardized or reordered. Input is streamed in chunks so
full-size captures convert in bounded memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import h5py
import numpy as np

CHUNK = 4096

# SCAT v1 header, little-endian (the trace container understood by the
# primary toolkit): magic, u16 version, u16 flags, u64 n_traces,
# u32 trace_len, u8 dtype, u8 byte_index, 6 reserved bytes.
_SCAT_HEADER = struct.Struct("<4sHHQIBB6s")
_SCAT_MAGIC = b"SCAT"
_SCAT_VERSION = 1
_FLAG_KEYS = 0x0001
_FLAG_LABELS = 0x0002
_DTYPE_CODES = {"f32": 1, "i8": 2, "i16": 3}


def _scat_dtype(dtype) -> tuple[Optional[str], Optional[np.dtype]]:
    """SCAT name and little-endian numpy dtype for a source trace dtype."""
    d = np.dtype(dtype)
    if d.kind == "f" and d.itemsize == 4:
        return "f32", np.dtype("<f4")
    if d.kind == "i" and d.itemsize == 1:
        return "i8", np.dtype("<i1")
    if d.kind == "i" and d.itemsize == 2:
        return "i16", np.dtype("<i2")
    return None, None

_DEFAULT_GROUPS = {"profiling": "Profiling_traces", "attack": "Attack_traces"}

AES_SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)


class ConvertError(Exception):
    """Base class for conversion failures (exit code 2)."""


class MissingDatasetError(ConvertError):
    pass


class ShapeMismatchError(ConvertError):
    pass


class LabelMismatchError(ConvertError):
    pass


class UnsupportedDtypeError(ConvertError):
    pass


@dataclass
class ConvertSpec:
    input_path: str
    output_path: str
    group: str = "profiling"                 # or "attack"
    byte_index: int = 2
    trace_range: Optional[tuple[int, int]] = None  # (start, count)
    traces_path: Optional[str] = None        # explicit HDF5 dataset overrides
    metadata_path: Optional[str] = None
    labels_path: Optional[str] = None

    def __post_init__(self):
        if self.group not in _DEFAULT_GROUPS:
            raise ValueError(f"group must be profiling or attack, got {self.group!r}")
        if not 0 <= self.byte_index <= 15:
            raise ValueError("byte_index must be in 0..15")
        if self.trace_range is not None:
            start, count = self.trace_range
            if start < 0 or count < 1:
                raise ValueError("trace_range needs start >= 0 and count >= 1")


def _resolve(h5file, spec: ConvertSpec):
    base = _DEFAULT_GROUPS[spec.group]
    traces_path = spec.traces_path or f"{base}/traces"
    metadata_path = spec.metadata_path or f"{base}/metadata"
    if traces_path not in h5file:
        raise MissingDatasetError(f"no dataset {traces_path!r} in input file")
    if metadata_path not in h5file:
        raise MissingDatasetError(f"no dataset {metadata_path!r} in input file")
    labels_path = spec.labels_path or f"{base}/labels"
    labels = h5file[labels_path] if labels_path in h5file else None
    return h5file[traces_path], h5file[metadata_path], labels


def _field(metadata_chunk, name, rows):
    try:
        arr = np.asarray(metadata_chunk[name])
    except (KeyError, ValueError) as exc:
        raise MissingDatasetError(f"metadata has no {name!r} field") from exc
    if arr.shape != (rows, 16):
        raise ShapeMismatchError(f"metadata {name} has shape {arr.shape}, "
                                 f"expected ({rows}, 16)")
    return arr.astype(np.uint8)


def convert(spec: ConvertSpec) -> int:
    """Convert one trace group into a SCAT file; returns the trace count."""
    with h5py.File(spec.input_path, "r") as h5file:
        traces, metadata, stored_labels = _resolve(h5file, spec)
        if traces.ndim != 2:
            raise ShapeMismatchError(f"trace dataset must be 2-D, got {traces.shape}")
        total, trace_len = traces.shape
        if metadata.shape[0] != total:
            raise ShapeMismatchError(f"{total} traces but {metadata.shape[0]} "
                                     "metadata rows")
        if stored_labels is not None and stored_labels.shape[0] != total:
            raise ShapeMismatchError(f"{total} traces but {stored_labels.shape[0]} "
                                     "stored labels")
        dtype_name, le_dtype = _scat_dtype(traces.dtype)
        if dtype_name is None:
            raise UnsupportedDtypeError(f"trace dtype {traces.dtype} has no SCAT "
                                        "equivalent (f32, i8, i16)")

        start, count = 0, total
        if spec.trace_range is not None:
            start, count = spec.trace_range
            if start + count > total:
                raise ShapeMismatchError(f"trace_range ({start}, {count}) exceeds "
                                         f"{total} available traces")

        header = _SCAT_HEADER.pack(_SCAT_MAGIC, _SCAT_VERSION,
                                   _FLAG_KEYS | _FLAG_LABELS, count, trace_len,
                                   _DTYPE_CODES[dtype_name], spec.byte_index,
                                   b"\0" * 6)
        plaintexts = np.empty((count, 16), dtype=np.uint8)
        keys = np.empty((count, 16), dtype=np.uint8)
        labels = np.empty(count, dtype=np.uint8)

        with open(spec.output_path, "wb") as out:
            out.write(header)
            for lo in range(start, start + count, CHUNK):
                hi = min(lo + CHUNK, start + count)
                out.write(np.ascontiguousarray(traces[lo:hi], dtype=le_dtype).tobytes())
                meta_chunk = metadata[lo:hi]
                pts = _field(meta_chunk, "plaintext", hi - lo)
                kys = _field(meta_chunk, "key", hi - lo)
                recomputed = AES_SBOX[pts[:, spec.byte_index]
                                      ^ kys[:, spec.byte_index]]
                if stored_labels is not None:
                    stored = np.asarray(stored_labels[lo:hi]).astype(np.uint8)
                    if not np.array_equal(stored, recomputed):
                        bad = int(np.flatnonzero(stored != recomputed)[0])
                        raise LabelMismatchError(
                            f"stored label disagrees with Sbox(pt XOR key) "
                            f"at trace {lo + bad}")
                sl = slice(lo - start, hi - start)
                plaintexts[sl], keys[sl], labels[sl] = pts, kys, recomputed
            out.write(plaintexts.tobytes())
            out.write(keys.tobytes())
            out.write(labels.tobytes())
    return count
