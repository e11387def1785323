import numpy as np
import pytest

from scaforge import aes


def test_sbox_spot_values():
    # FIPS-197 table: first entry and the worked example input 0x53
    assert aes.sbox(0x00) == 0x63
    assert aes.sbox(0x53) == 0xED


def test_sbox_is_a_permutation():
    image = sorted(aes.sbox(x) for x in range(256))
    assert image == list(range(256))


def test_inv_sbox_spot_value():
    assert aes.inv_sbox(0x63) == 0x00


def test_inverse_round_trips_exhaustive():
    xs = np.arange(256, dtype=np.uint8)
    assert np.array_equal(aes.inv_sbox(aes.sbox(xs)), xs)
    assert np.array_equal(aes.sbox(aes.inv_sbox(xs)), xs)


def test_sbox_label_spot_and_self_xor():
    assert aes.sbox_label(0x00, 0x00) == 0x63
    for b in (0x00, 0x17, 0xFF):
        assert aes.sbox_label(b, b) == 0x63


def test_sbox_label_injective_in_key_for_fixed_pt():
    pt = 0xA7
    outputs = {aes.sbox_label(pt, k) for k in range(256)}
    assert len(outputs) == 256


def test_hamming_weight_values():
    assert aes.hamming_weight(0x00) == 0
    assert aes.hamming_weight(0xFF) == 8
    # 0xA5 = 1010_0101
    assert aes.hamming_weight(0xA5) == 4


def test_hamming_weight_uniform_moments():
    hw = aes.hamming_weight(np.arange(256, dtype=np.uint8)).astype(float)
    assert hw.mean() == pytest.approx(4.0)
    assert hw.var() == pytest.approx(2.0)


def test_hypothesis_labels_single_element_matches_sbox_label():
    assert aes.hypothesis_labels([0x12], 0x34)[0] == aes.sbox_label(0x12, 0x34)


def test_hypothesis_labels_true_key_reproduces_labels():
    rng = np.random.default_rng(7)
    pts = rng.integers(0, 256, size=50, dtype=np.uint8)
    key = 0x3C
    true_labels = aes.sbox_label(pts, np.full(50, key, dtype=np.uint8))
    assert np.array_equal(aes.hypothesis_labels(pts, key), true_labels)


def test_hypothesis_labels_matches_per_element_loop():
    rng = np.random.default_rng(11)
    pts = rng.integers(0, 256, size=200, dtype=np.uint8)
    k = int(rng.integers(0, 256))
    got = aes.hypothesis_labels(pts, k)
    expected = np.array([aes.sbox(int(p) ^ k) for p in pts], dtype=np.uint8)
    assert np.array_equal(got, expected)


def test_hypothesis_labels_rejects_empty():
    with pytest.raises(ValueError):
        aes.hypothesis_labels([], 0)
