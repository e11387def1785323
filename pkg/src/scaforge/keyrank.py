"""Key-byte evidence aggregation: SLP scores, ranks, and rank-vs-traces curves.

Converts per-trace class log-probabilities into per-key-hypothesis summed
log-probability (SLP) scores, the pessimistic rank of the true key, and the
rank curve as attack traces accumulate. Also houses the plain accuracy
metric for contrast and the SCLP on-disk form of a log-probability matrix.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .aes import SBOX
from .traces import (BadMagicError, MetadataMismatchError, TruncatedFileError,
                     UnsupportedVersionError)

N_CLASSES = 256

_SCLP_MAGIC = b"SCLP"
_SCLP_VERSION = 1
_SCLP_HEADER = struct.Struct("<4sHQH")


@dataclass
class KeyRankConfig:
    epsilon: float = 1e-40  # added in the linear domain before the log

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ScoreTable:
    scores: np.ndarray  # (256,) SLP score per key hypothesis


@dataclass
class RankCurve:
    points: list[tuple[int, int]] = field(default_factory=list)  # (n_traces, rank)


def _select_pt_bytes(pts, byte_index: int) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.uint8)
    if pts.ndim == 2:
        pts = pts[:, byte_index]
    return pts


def _per_trace_key_scores(probs: np.ndarray, pts: np.ndarray,
                          cfg: KeyRankConfig) -> np.ndarray:
    """(N, 256) matrix: log(P(hyp label | trace) + eps) per trace and key guess."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
        raise ValueError("probs must have shape (N, 256)")
    if pts.shape[0] != probs.shape[0]:
        raise ValueError("plaintexts and probability rows disagree in length")
    hyp = SBOX[pts[:, None] ^ np.arange(N_CLASSES, dtype=np.uint8)[None, :]]
    picked = np.take_along_axis(probs, hyp.astype(np.int64), axis=1)
    # log(exp(x) + eps): underflow degrades gracefully to log(eps)
    return np.logaddexp(picked, math.log(cfg.epsilon))


def score_keys(probs: np.ndarray, pts, byte_index: int = 2,
               cfg: KeyRankConfig | None = None) -> ScoreTable:
    """SLP score per key guess: sum over traces of log(P(hyp label) + eps)."""
    cfg = cfg or KeyRankConfig()
    pts = _select_pt_bytes(pts, byte_index)
    if pts.shape[0] < 1:
        raise ValueError("need at least one trace")
    return ScoreTable(scores=_per_trace_key_scores(probs, pts, cfg).sum(axis=0))


def true_key_rank(table: ScoreTable, k_true: int) -> int:
    """Pessimistic rank: number of other keys scoring >= the true key."""
    scores = table.scores
    return int(np.sum(scores >= scores[k_true])) - 1


def rank_curve(probs: np.ndarray, pts, byte_index: int, k_true: int,
               step: int = 10, cfg: KeyRankConfig | None = None) -> RankCurve:
    """Rank of the true key after each prefix of step, 2*step, ... traces.

    Computed incrementally from cumulative per-key scores; identical to
    recomputing score_keys on every prefix. A final point at N is included
    when step does not divide N.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    cfg = cfg or KeyRankConfig()
    pts = _select_pt_bytes(pts, byte_index)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("need at least one trace")
    cumulative = np.cumsum(_per_trace_key_scores(probs, pts, cfg), axis=0)
    checkpoints = list(range(step, n + 1, step))
    if not checkpoints or checkpoints[-1] != n:
        checkpoints.append(n)
    curve = RankCurve()
    for cp in checkpoints:
        curve.points.append((cp, true_key_rank(ScoreTable(cumulative[cp - 1]), k_true)))
    return curve


def traces_to_rank0(curve: RankCurve) -> int | None:
    """Smallest trace count from which the rank stays 0 for the rest of the curve."""
    if not curve.points:
        raise ValueError("curve is empty")
    best = None
    for n, rank in reversed(curve.points):
        if rank == 0:
            best = n
        else:
            break
    return best


def guessing_entropy_curve(probs: np.ndarray, pts, byte_index: int, k_true: int,
                           step: int = 10, cfg: KeyRankConfig | None = None,
                           runs: int = 10, seed: int = 0) -> list[tuple[int, float]]:
    """Mean rank over seeded random trace orderings (off the default path)."""
    cfg = cfg or KeyRankConfig()
    pts = _select_pt_bytes(pts, byte_index)
    rng = np.random.default_rng(seed)
    sums: dict[int, float] = {}
    for _ in range(runs):
        perm = rng.permutation(pts.shape[0])
        curve = rank_curve(np.asarray(probs)[perm], pts[perm], byte_index,
                           k_true, step=step, cfg=cfg)
        for n, rank in curve.points:
            sums[n] = sums.get(n, 0.0) + rank
    return [(n, total / runs) for n, total in sorted(sums.items())]


def accuracy(probs: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels disagree in length")
    return float(np.mean(probs.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# serialization: SCLP binary container, CSV and JSON report forms

def save_logprobs(probs: np.ndarray, path) -> None:
    """Write an N x 256 log-probability matrix: magic "SCLP", u16 version,
    u64 N, u16 n_classes, then row-major float64 little-endian."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
        raise ValueError("probs must have shape (N, 256)")
    with open(path, "wb") as fh:
        fh.write(_SCLP_HEADER.pack(_SCLP_MAGIC, _SCLP_VERSION, probs.shape[0], N_CLASSES))
        fh.write(probs.astype("<f8").tobytes())


def load_logprobs(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _SCLP_HEADER.size:
        raise TruncatedFileError("file shorter than SCLP header")
    magic, version, n, n_classes = _SCLP_HEADER.unpack_from(raw)
    if magic != _SCLP_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != _SCLP_VERSION:
        raise UnsupportedVersionError(f"unsupported SCLP version {version}")
    if n_classes != N_CLASSES:
        raise MetadataMismatchError(f"expected 256 classes, found {n_classes}")
    payload = raw[_SCLP_HEADER.size:]
    expected = n * n_classes * 8
    if len(payload) < expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, need {expected}")
    if len(payload) > expected:
        raise MetadataMismatchError(f"payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, n_classes).astype(np.float64)


def score_table_csv(table: ScoreTable) -> str:
    lines = ["key,score"]
    lines += [f"{k},{float(table.scores[k])!r}" for k in range(N_CLASSES)]
    return "\n".join(lines) + "\n"


def rank_curve_csv(curve: RankCurve) -> str:
    lines = ["n_traces,rank"]
    lines += [f"{n},{rank}" for n, rank in curve.points]
    return "\n".join(lines) + "\n"


def score_table_json(table: ScoreTable) -> str:
    return json.dumps({"scores": [float(s) for s in table.scores]}, indent=2) + "\n"


def rank_curve_json(curve: RankCurve) -> str:
    return json.dumps({"points": [{"n_traces": n, "rank": r} for n, r in curve.points]},
                      indent=2) + "\n"
