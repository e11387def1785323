"""Gaussian template baseline and the shared probabilistic-classifier contract.

Every attacker in this toolkit satisfies ProbClassifier: fit on labeled
profiling traces, then emit one normalized log-probability row over the 256
S-box output classes per attack trace. The template model is the closed-form
workhorse: per-class means with a diagonal pooled within-class covariance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

N_CLASSES = 256
_VAR_FLOOR = 1e-12

_MAGIC = b"SCTM"
_VERSION = 1


@runtime_checkable
class ProbClassifier(Protocol):
    """Fit on labeled traces; predict normalized per-trace class log-probabilities."""

    def fit(self, samples: np.ndarray, labels: np.ndarray) -> "ProbClassifier": ...

    def predict_log_proba(self, samples: np.ndarray) -> np.ndarray: ...


@dataclass
class TemplateModel:
    class_means: np.ndarray      # (256, L)
    pooled_var: np.ndarray       # (L,) strictly positive
    class_log_prior: np.ndarray  # (256,) log-sum-exps to 0
    seen_mask: np.ndarray        # (256,) bool


def fit_templates(samples: np.ndarray, labels: np.ndarray) -> TemplateModel:
    """Per-class means, diagonal pooled variance, and smoothed log priors.

    Unseen classes fall back to the global mean (seen_mask False). The
    pooled variance averages squared within-class residuals over all N
    traces, floored at 1e-12. Priors use add-one smoothing so no class has
    exactly zero probability.
    """
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    n, length = samples.shape
    if n < 2:
        raise ValueError("template fitting requires at least two traces")
    if labels.shape != (n,):
        raise ValueError("labels must have shape (N,)")

    counts = np.bincount(labels, minlength=N_CLASSES).astype(np.float64)
    sums = np.zeros((N_CLASSES, length))
    np.add.at(sums, labels, samples)
    seen = counts > 0
    global_mean = samples.mean(axis=0)
    class_means = np.tile(global_mean, (N_CLASSES, 1))
    class_means[seen] = sums[seen] / counts[seen, None]

    residuals = samples - class_means[labels]
    pooled_var = np.maximum((residuals ** 2).sum(axis=0) / n, _VAR_FLOOR)

    priors = (counts + 1.0) / (n + N_CLASSES)
    return TemplateModel(class_means=class_means, pooled_var=pooled_var,
                         class_log_prior=np.log(priors), seen_mask=seen)


def predict_log_proba(model: TemplateModel, samples: np.ndarray) -> np.ndarray:
    """Normalized log P(class | trace) rows under the diagonal Gaussian model.

    Row z is proportional to log prior_z - sum_j (x_j - mu_zj)^2 / (2 v_j);
    the shared Gaussian normalizer cancels in the row normalization.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != model.class_means.shape[1]:
        raise ValueError("sample width does not match the fitted model")
    inv_v = 1.0 / model.pooled_var
    # -(x - mu)^2 / 2v expanded so the class axis is a single matmul
    cross = samples @ (model.class_means * inv_v).T            # (M, 256)
    mu_term = 0.5 * ((model.class_means ** 2) * inv_v).sum(axis=1)  # (256,)
    x_term = 0.5 * ((samples ** 2) * inv_v).sum(axis=1)        # (M,)
    logp = model.class_log_prior + cross - mu_term - x_term[:, None]
    return normalize_log_rows(logp)


def normalize_log_rows(logp: np.ndarray) -> np.ndarray:
    """Shift each row so it log-sum-exps to zero."""
    m = logp.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True))
    return logp - lse


def dump_templates(model: TemplateModel, fh) -> None:
    length = model.class_means.shape[1]
    fh.write(struct.pack("<4sHI", _MAGIC, _VERSION, length))
    fh.write(model.class_means.astype("<f8").tobytes())
    fh.write(model.pooled_var.astype("<f8").tobytes())
    fh.write(model.class_log_prior.astype("<f8").tobytes())
    fh.write(model.seen_mask.astype("<u1").tobytes())


def parse_templates(raw: bytes) -> TemplateModel:
    magic, version, length = struct.unpack_from("<4sHI", raw)
    if magic != _MAGIC:
        raise ValueError(f"not a template checkpoint: magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported template checkpoint version {version}")
    off = struct.calcsize("<4sHI")

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    means = take("<f8", N_CLASSES * length).reshape(N_CLASSES, length).astype(np.float64)
    pooled = take("<f8", length).astype(np.float64)
    prior = take("<f8", N_CLASSES).astype(np.float64)
    seen = take("<u1", N_CLASSES).astype(bool)
    if off != len(raw):
        raise ValueError("trailing bytes in template checkpoint")
    return TemplateModel(class_means=means, pooled_var=pooled,
                         class_log_prior=prior, seen_mask=seen)


class TemplateClassifier:
    """ProbClassifier adapter around fit_templates/predict_log_proba."""

    def __init__(self):
        self.model: TemplateModel | None = None

    def fit(self, samples: np.ndarray, labels: np.ndarray) -> "TemplateClassifier":
        self.model = fit_templates(samples, labels)
        return self

    def predict_log_proba(self, samples: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("classifier is not fitted")
        return predict_log_proba(self.model, samples)
