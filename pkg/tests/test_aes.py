import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltscope.aes import (
    SBOX,
    LeakageModel,
    build_hypothesis,
    first_round_model_power,
    hamming_weight,
    model_power,
    sbox,
)


def _gf_mul(a, b):
    p = 0
    for _ in range(8):
        if b & 1:
            p ^= a
        hi = a & 0x80
        a = (a << 1) & 0xFF
        if hi:
            a ^= 0x1B
        b >>= 1
    return p


def _reference_sbox(x):
    # multiplicative inverse in GF(2^8) followed by the affine map
    inv = 0 if x == 0 else next(y for y in range(1, 256) if _gf_mul(x, y) == 1)
    out = 0x63
    for shift in range(5):
        out ^= ((inv << shift) | (inv >> (8 - shift))) & 0xFF
    return out


def test_sbox_matches_field_construction():
    assert [sbox(x) for x in range(256)] == [_reference_sbox(x) for x in range(256)]


def test_sbox_anchors():
    assert sbox(0x00) == 0x63
    assert sbox(0x53) == 0xED


def test_sbox_bijection():
    assert sorted(SBOX.tolist()) == list(range(256))


def test_hamming_weight():
    assert hamming_weight(0x00) == 0
    assert hamming_weight(0xFF) == 8
    assert hamming_weight(0x63) == 4
    assert [hamming_weight(x) for x in range(256)] == [bin(x).count("1") for x in range(256)]


def test_hypothesis_single_entry():
    h = build_hypothesis(np.zeros((1, 16), np.uint8), 0, "hw")
    assert h.values[0, 0] == 4


def test_hypothesis_shape_and_bounds():
    rng = np.random.default_rng(1)
    pts = rng.integers(0, 256, size=(3, 16), dtype=np.uint8)
    h = build_hypothesis(pts, 5, LeakageModel.HAMMING_WEIGHT)
    assert h.values.shape == (3, 256)
    assert h.values.min() >= 0 and h.values.max() <= 8
    assert h.byte_index == 5


def test_hypothesis_correct_guess_constant():
    rng = np.random.default_rng(2)
    k = 0x3C
    pts = np.full((10, 16), k, np.uint8)
    pts[:, 1:] = rng.integers(0, 256, size=(10, 15))
    h = build_hypothesis(pts, 0, "hw")
    assert np.all(h.values[:, k] == 4)


def test_hypothesis_hd_reference_is_plaintext():
    pts = np.full((1, 16), 0x11, np.uint8)
    h = build_hypothesis(pts, 0, "hd")
    for g in (0, 7, 200):
        assert h.values[0, g] == bin(sbox(0x11 ^ g) ^ 0x11).count("1")


def test_hypothesis_errors():
    with pytest.raises(ValueError, match="empty plaintext list"):
        build_hypothesis(np.zeros((0, 16), np.uint8), 0)
    with pytest.raises(ValueError):
        build_hypothesis(np.zeros((2, 16), np.uint8), 16)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(0, 255), seed=st.integers(0, 2**31))
def test_xor_relabeling(c, seed):
    pts = np.random.default_rng(seed).integers(0, 256, size=(8, 16), dtype=np.uint8)
    h = build_hypothesis(pts, 3, "hw").values
    shifted = pts.copy()
    shifted[:, 3] ^= c
    h2 = build_hypothesis(shifted, 3, "hw").values
    np.testing.assert_array_equal(h[:, np.arange(256) ^ c], h2)


def test_deterministic():
    pts = np.random.default_rng(0).integers(0, 256, size=(5, 16), dtype=np.uint8)
    for model in ("hw", "hd"):
        np.testing.assert_array_equal(build_hypothesis(pts, 2, model).values,
                                      build_hypothesis(pts, 2, model).values)


def test_model_power_anchors():
    zero = bytes(16)
    assert first_round_model_power(zero, zero) == 64
    block = bytes(range(16))
    assert first_round_model_power(block, block) == 64


@settings(max_examples=50, deadline=None)
@given(pt=st.binary(min_size=16, max_size=16), key=st.binary(min_size=16, max_size=16))
def test_model_power_bounds_and_vectorised(pt, key):
    p = first_round_model_power(pt, key)
    assert 0 <= p <= 128
    expect = sum(bin(sbox(a ^ b)).count("1") for a, b in zip(pt, key))
    assert p == expect
    assert model_power(np.frombuffer(pt, np.uint8)[None, :], key)[0] == expect
