"""Synthetic leaky-trace generator and SNR diagnostics.

Stands in for a real EM capture at desk scale: additive, time-localized
leakage of the S-box output (Hamming weight or scaled value) on top of
Gaussian noise, with fixed- or variable-key modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import aes
from .traces import TraceSet

SNR_CAP = 1e12  # sentinel for zero within-class variance


@dataclass
class SimConfig:
    trace_len: int
    leak_points: Sequence[int]
    leak_model: str = "hamming_weight"   # or "value"
    amplitude: float = 1.0
    noise_sigma: float = 1.0
    baseline: float = 0.0
    key_mode: str = "fixed"              # or "variable"
    key: Optional[bytes] = None          # 16 bytes, required for fixed mode
    byte_index: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.trace_len < 1:
            raise ValueError("trace_len must be >= 1")
        pts = np.asarray(self.leak_points, dtype=np.int64)
        if pts.size and (pts.min() < 0 or pts.max() >= self.trace_len):
            raise ValueError("leak_points must lie within trace_len")
        if len(np.unique(pts)) != pts.size:
            raise ValueError("leak_points must be distinct")
        if self.leak_model not in ("hamming_weight", "value"):
            raise ValueError(f"unknown leak model {self.leak_model!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not np.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")
        if self.key_mode == "fixed":
            if self.key is None or len(self.key) != 16:
                raise ValueError("fixed key mode requires a 16-byte key")
        elif self.key_mode != "variable":
            raise ValueError(f"unknown key mode {self.key_mode!r}")
        if not 0 <= self.byte_index <= 15:
            raise ValueError("byte_index must be in 0..15")


def simulate(cfg: SimConfig, n: int) -> TraceSet:
    """Generate n traces; bit-identical for a given config/seed.

    Samples at leak points carry baseline + amplitude * leak(label) on top
    of the noise floor; leak is HW(label) or label/255 depending on the
    model. Values are rounded through float32 so SCAT round-trips are exact.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    plaintexts = rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
    if cfg.key_mode == "fixed":
        keys = np.tile(np.frombuffer(bytes(cfg.key), dtype=np.uint8), (n, 1))
    else:
        keys = rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
    labels = aes.sbox_label(plaintexts[:, cfg.byte_index], keys[:, cfg.byte_index])

    samples = rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.trace_len)) if cfg.noise_sigma > 0 \
        else np.zeros((n, cfg.trace_len))
    samples += cfg.baseline
    if cfg.leak_model == "hamming_weight":
        leak = aes.hamming_weight(labels).astype(np.float64)
    else:
        leak = labels.astype(np.float64) / 255.0
    pts = np.asarray(cfg.leak_points, dtype=np.int64)
    if pts.size:
        samples[:, pts] += cfg.amplitude * leak[:, None]

    samples = samples.astype(np.float32).astype(np.float64)
    return TraceSet(samples=samples, plaintexts=plaintexts, keys=keys,
                    labels=labels, byte_index=cfg.byte_index, source_dtype="f32")


def estimate_snr(tset: TraceSet) -> np.ndarray:
    """Per-sample SNR: variance of class means over mean within-class variance.

    Classes with fewer than two traces are excluded. Samples whose pooled
    within-class variance is zero report the capped sentinel 1e12.
    """
    if tset.labels is None:
        raise ValueError("SNR estimation requires labels")
    x = tset.samples
    counts = np.bincount(tset.labels, minlength=256)
    usable = np.flatnonzero(counts >= 2)
    if usable.size < 2:
        raise ValueError("need at least two classes with two or more traces")

    class_means = np.zeros((usable.size, x.shape[1]))
    within = np.zeros((usable.size, x.shape[1]))
    for row, cls in enumerate(usable):
        grp = x[tset.labels == cls]
        class_means[row] = grp.mean(axis=0)
        within[row] = grp.var(axis=0)

    signal = class_means.var(axis=0)
    noise = within.mean(axis=0)
    snr = np.where(signal > 0, SNR_CAP, 0.0)  # noise-free columns
    nz = noise > 0
    snr[nz] = np.minimum(signal[nz] / noise[nz], SNR_CAP)
    return snr
