import math

import numpy as np
import pytest

from scaforge import aes, keyrank
from scaforge.keyrank import (KeyRankConfig, RankCurve, ScoreTable, accuracy,
                              load_logprobs, rank_curve, save_logprobs,
                              score_keys, traces_to_rank0, true_key_rank)
from scaforge.traces import BadMagicError, TruncatedFileError


def _uniform_rows(n):
    return np.full((n, 256), math.log(1.0 / 256.0))


def _one_hot_rows(labels):
    rows = np.full((len(labels), 256), -1000.0)
    rows[np.arange(len(labels)), labels] = 0.0
    return rows


def _naive_score_keys(probs, pts, epsilon):
    # independent double-loop oracle, linear-domain epsilon as written
    scores = np.zeros(256)
    for k in range(256):
        total = 0.0
        for i in range(len(pts)):
            hyp = aes.sbox(int(pts[i]) ^ k)
            total += math.log(math.exp(probs[i, hyp]) + epsilon)
        scores[k] = total
    return scores


def test_one_hot_single_trace_scores():
    pt = 0x5A
    k_true = 0xC3
    label = aes.sbox_label(pt, k_true)
    probs = _one_hot_rows([label])
    table = score_keys(probs, np.array([pt], dtype=np.uint8))
    log_eps = math.log(1e-40)  # -92.10340371976182
    assert table.scores[k_true] == pytest.approx(0.0, abs=1e-12)
    wrong = np.delete(np.arange(256), k_true)
    assert np.allclose(table.scores[wrong], log_eps, atol=1e-9)
    assert log_eps == pytest.approx(-92.10340371976182)


def test_uniform_rows_equal_scores():
    n = 17
    probs = _uniform_rows(n)
    pts = np.arange(n, dtype=np.uint8)
    table = score_keys(probs, pts)
    expected = n * math.log(1.0 / 256.0 + 1e-40)
    assert np.allclose(table.scores, expected, atol=1e-9)


def test_score_keys_matches_naive_oracle():
    rng = np.random.default_rng(100)
    probs = np.log(rng.dirichlet(np.ones(256), size=20))
    pts = rng.integers(0, 256, size=20, dtype=np.uint8)
    got = score_keys(probs, pts).scores
    expected = _naive_score_keys(probs, pts, 1e-40)
    assert np.max(np.abs(got - expected)) < 1e-9


def test_score_keys_accepts_full_plaintext_matrix():
    rng = np.random.default_rng(101)
    probs = np.log(rng.dirichlet(np.ones(256), size=8))
    pts16 = rng.integers(0, 256, size=(8, 16), dtype=np.uint8)
    via_matrix = score_keys(probs, pts16, byte_index=5).scores
    via_vector = score_keys(probs, pts16[:, 5]).scores
    assert np.array_equal(via_matrix, via_vector)


def test_score_keys_permutation_invariant():
    rng = np.random.default_rng(102)
    probs = np.log(rng.dirichlet(np.ones(256), size=30))
    pts = rng.integers(0, 256, size=30, dtype=np.uint8)
    base = score_keys(probs, pts).scores
    perm = rng.permutation(30)
    shuffled = score_keys(probs[perm], pts[perm]).scores
    assert np.allclose(shuffled, base, atol=1e-9)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        score_keys(_uniform_rows(3), np.zeros(4, dtype=np.uint8))


def test_true_key_rank_extremes_and_ties():
    scores = np.zeros(256)
    scores[42] = 1.0
    assert true_key_rank(ScoreTable(scores), 42) == 0
    assert true_key_rank(ScoreTable(np.zeros(256)), 7) == 255
    scores = np.zeros(256)
    scores[9] = -1.0
    assert true_key_rank(ScoreTable(scores), 9) == 255


def test_uniform_extra_trace_never_changes_rank():
    rng = np.random.default_rng(103)
    probs = np.log(rng.dirichlet(np.ones(256), size=25))
    pts = rng.integers(0, 256, size=25, dtype=np.uint8)
    base = score_keys(probs, pts).scores
    extended = score_keys(np.vstack([probs, _uniform_rows(1)]),
                          np.concatenate([pts, [123]])).scores
    shift = extended - base
    assert np.allclose(shift, shift[0], atol=1e-9)
    for k_true in (0, 50, 255):
        assert (true_key_rank(ScoreTable(base), k_true)
                == true_key_rank(ScoreTable(extended), k_true))


def test_perfect_classifier_rank_zero_everywhere():
    rng = np.random.default_rng(104)
    k_true = 0xB4
    pts = rng.integers(0, 256, size=60, dtype=np.uint8)
    labels = aes.sbox_label(pts, np.full(60, k_true, dtype=np.uint8))
    curve = rank_curve(_one_hot_rows(labels), pts, 2, k_true, step=10)
    assert all(rank == 0 for _, rank in curve.points)
    assert traces_to_rank0(curve) == 10


def test_rank_curve_matches_prefix_recomputation():
    rng = np.random.default_rng(105)
    k_true = 0x11
    probs = np.log(rng.dirichlet(np.ones(256), size=50))
    pts = rng.integers(0, 256, size=50, dtype=np.uint8)
    curve = rank_curve(probs, pts, 2, k_true, step=7)
    assert curve.points[-1][0] == 50  # partial final prefix included
    for n, rank in curve.points:
        table = score_keys(probs[:n], pts[:n])
        assert rank == true_key_rank(table, k_true)


def test_reordering_keeps_final_scores():
    rng = np.random.default_rng(106)
    probs = np.log(rng.dirichlet(np.ones(256), size=40))
    pts = rng.integers(0, 256, size=40, dtype=np.uint8)
    perm = rng.permutation(40)
    a = rank_curve(probs, pts, 2, 0, step=10)
    b = rank_curve(probs[perm], pts[perm], 2, 0, step=10)
    sa = score_keys(probs, pts).scores
    sb = score_keys(probs[perm], pts[perm]).scores
    assert np.allclose(sa, sb, atol=1e-9)
    assert a.points[-1][1] == b.points[-1][1]


def test_traces_to_rank0_rules():
    assert traces_to_rank0(RankCurve([(10, 3), (20, 0), (30, 0)])) == 20
    assert traces_to_rank0(RankCurve([(10, 0), (20, 1), (30, 0)])) == 30
    assert traces_to_rank0(RankCurve([(10, 4), (20, 2), (30, 1)])) is None
    with pytest.raises(ValueError):
        traces_to_rank0(RankCurve([]))


def test_accuracy_one_hot_and_uniform():
    rng = np.random.default_rng(107)
    labels = rng.integers(0, 256, size=30, dtype=np.uint8)
    assert accuracy(_one_hot_rows(labels), labels) == 1.0
    # uniform rows argmax to index 0 by the tie rule
    freq0 = float(np.mean(labels == 0))
    assert accuracy(_uniform_rows(30), labels) == freq0


def test_accuracy_hand_counted_fixture():
    argmaxes = [3, 17, 3, 200, 9, 9, 250, 0, 77, 128]
    labels = np.array([3, 17, 4, 200, 9, 8, 250, 1, 77, 128], dtype=np.uint8)
    rows = np.full((10, 256), math.log(1.0 / 256.0))
    rows[np.arange(10), argmaxes] += 1.0
    # rows 0,1,3,4,6,8,9 match: 7 of 10
    assert accuracy(rows, labels) == pytest.approx(0.7)


def test_guessing_entropy_curve_runs():
    rng = np.random.default_rng(108)
    k_true = 0x42
    pts = rng.integers(0, 256, size=40, dtype=np.uint8)
    labels = aes.sbox_label(pts, np.full(40, k_true, dtype=np.uint8))
    ge = keyrank.guessing_entropy_curve(_one_hot_rows(labels), pts, 2, k_true,
                                        step=10, runs=3, seed=1)
    assert [n for n, _ in ge] == [10, 20, 30, 40]
    assert all(mean_rank == 0.0 for _, mean_rank in ge)


def test_sclp_round_trip(tmp_path):
    rng = np.random.default_rng(109)
    probs = np.log(rng.dirichlet(np.ones(256), size=12))
    path = tmp_path / "p.sclp"
    save_logprobs(probs, path)
    loaded = load_logprobs(path)
    assert np.array_equal(loaded, probs)

    (tmp_path / "bad.sclp").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(BadMagicError):
        load_logprobs(tmp_path / "bad.sclp")
    blob = path.read_bytes()
    (tmp_path / "trunc.sclp").write_bytes(blob[:-5])
    with pytest.raises(TruncatedFileError):
        load_logprobs(tmp_path / "trunc.sclp")


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        KeyRankConfig(epsilon=0.0)
