import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specpv.numerics import (
    RopeConfig,
    SeededRNG,
    masked_attention,
    rmsnorm,
    rope_apply,
    rope_frequencies,
    rope_rotate,
    seeded_rng,
    softmax,
    splitmix64,
)

MASK = (1 << 64) - 1

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


# -- softmax ---------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    out = softmax([1000.0, 1000.0, 1000.0])
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1 / 3] * 3)
    np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], rtol=1e-12)


def test_softmax_empty():
    with pytest.raises(ValueError, match="empty logits"):
        softmax([])


@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_softmax_sums_to_one(v):
    p = softmax(v)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-6


# -- rmsnorm ---------------------------------------------------------------


def test_rmsnorm_examples():
    np.testing.assert_array_equal(rmsnorm([0, 0, 0], [2, 3, 4], 1e-6), [0, 0, 0])
    np.testing.assert_allclose(rmsnorm([1, 1, 1, 1], np.ones(4), 1e-12), [1, 1, 1, 1], atol=1e-6)
    np.testing.assert_allclose(rmsnorm([3, 4], [1, 1], 0.0), np.array([3, 4]) / math.sqrt(12.5), rtol=1e-6)
    np.testing.assert_allclose(rmsnorm([3, 4], [1, 1], 0.0), [0.8485, 1.1314], atol=1e-4)


def test_rmsnorm_length_mismatch():
    with pytest.raises(ValueError):
        rmsnorm([1, 2, 3], [1, 1], 1e-6)


def test_rmsnorm_rows_match_vector_form():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    w = rng.standard_normal(8).astype(np.float32)
    rows = rmsnorm(x, w)
    for i in range(5):
        np.testing.assert_array_equal(rows[i], rmsnorm(x[i], w))


# -- rope ------------------------------------------------------------------


def test_rope_config_validation():
    with pytest.raises(ValueError):
        RopeConfig(head_dim=7)
    with pytest.raises(ValueError):
        RopeConfig(head_dim=8, scaling_mode="none", scaling_factor=2.0)
    with pytest.raises(ValueError):
        RopeConfig(head_dim=8, scaling_mode="linear", scaling_factor=0.5)
    with pytest.raises(ValueError):
        RopeConfig(head_dim=8, scaling_mode="ntk")


def test_rope_position_zero_is_identity():
    v = np.arange(16, dtype=np.float32) - 7.5
    for mode, f in (("none", 1.0), ("linear", 4.0), ("yarn-like", 32.0)):
        cfg = RopeConfig(16, scaling_mode=mode, scaling_factor=f)
        np.testing.assert_array_equal(rope_apply(v, 0, cfg), v)


def test_rope_rejects_wrong_length():
    with pytest.raises(ValueError):
        rope_apply(np.ones(8), 3, RopeConfig(16))


def _rope_reference(vec, pos, theta, hd):
    out = np.array(vec, dtype=np.float64)
    for d in range(hd // 2):
        ang = pos * theta ** (-2.0 * d / hd)
        a, b = vec[2 * d], vec[2 * d + 1]
        out[2 * d] = a * math.cos(ang) - b * math.sin(ang)
        out[2 * d + 1] = a * math.sin(ang) + b * math.cos(ang)
    return out


def test_rope_matches_scalar_reference():
    cfg = RopeConfig(8, theta_base=500.0)
    v = np.array([0.3, -1.0, 2.0, 0.5, -0.25, 1.5, 0.0, 1.0], dtype=np.float32)
    for pos in (1, 7, 300):
        np.testing.assert_allclose(rope_apply(v, pos, cfg), _rope_reference(v, pos, 500.0, 8), atol=1e-6)


@settings(max_examples=60)
@given(
    arrays(np.float32, 16, elements=st.floats(-100, 100, width=32)),
    st.integers(0, 1 << 20),
    st.sampled_from([("none", 1.0), ("linear", 8.0), ("yarn-like", 32.0)]),
)
def test_rope_preserves_norm(v, pos, mode):
    cfg = RopeConfig(16, scaling_mode=mode[0], scaling_factor=mode[1])
    out = rope_apply(v, pos, cfg)
    n_in = float(np.linalg.norm(v.astype(np.float64)))
    assert abs(float(np.linalg.norm(out.astype(np.float64))) - n_in) <= 1e-5 * max(1.0, n_in)


def test_rope_linear_equals_divided_position():
    v = np.linspace(-1, 1, 16).astype(np.float32)
    for s in (2.0, 4.0, 32.0):
        lin = RopeConfig(16, scaling_mode="linear", scaling_factor=s)
        plain = RopeConfig(16)
        for p in (0, int(s), int(5 * s), int(1000 * s)):
            np.testing.assert_array_equal(rope_apply(v, p, lin), rope_apply(v, p / s, plain))


def test_yarn_like_frequency_bands():
    cfg = RopeConfig(16, scaling_mode="yarn-like", scaling_factor=32.0)
    base = rope_frequencies(RopeConfig(16))
    got = rope_frequencies(cfg)
    ratio = 2048 / (2 * math.pi / base)
    hi = ratio > 32
    lo = ratio < 1
    assert hi.any() and lo.any()
    np.testing.assert_allclose(got[hi], base[hi])  # fast frequencies untouched
    np.testing.assert_allclose(got[lo], base[lo] / 32.0)  # slow ones fully interpolated
    assert ((got <= base + 1e-15) & (got >= base / 32.0 - 1e-15)).all()


def test_rope_rotate_batch_rows_match_single():
    cfg = RopeConfig(16)
    x = np.random.default_rng(1).standard_normal((3, 5, 16)).astype(np.float32)
    pos = [0, 4, 9, 100, 1023]
    out = rope_rotate(x, pos, cfg)
    for h in range(3):
        for i, p in enumerate(pos):
            np.testing.assert_array_equal(out[h, i], rope_apply(x[h, i], p, cfg))


# -- attention -------------------------------------------------------------


def test_attention_single_key():
    out = masked_attention([[5.0, -3.0]], [[1.0, 2.0]], [[0.25, 0.75]], scale=1.0)
    np.testing.assert_allclose(out, [[0.25, 0.75]])


def test_attention_identical_keys():
    out = masked_attention([[1.0, 2.0]], [[3.0, 4.0], [3.0, 4.0]], [[7.0, 8.0], [7.0, 8.0]])
    np.testing.assert_allclose(out, [[7.0, 8.0]])


def test_attention_hand_example():
    out = masked_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], np.eye(2), scale=1.0)
    w = math.e / (math.e + 1.0)
    np.testing.assert_allclose(out, [[w, 1 - w]], atol=1e-6)
    np.testing.assert_allclose(out, [[0.7311, 0.2689]], atol=1e-4)


def test_attention_isolated_query():
    with pytest.raises(ValueError, match="isolated query"):
        masked_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), mask=[[True, False], [False, False]])


def test_attention_shape_errors():
    with pytest.raises(ValueError):
        masked_attention(np.ones((1, 3)), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        masked_attention(np.ones((1, 2)), np.ones((2, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        masked_attention(np.ones((1, 2)), np.ones((2, 2)), np.ones((2, 2)), mask=np.ones((2, 2), bool))


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31))
def test_attention_convex_and_all_ones_mask(nq, nk, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((2, nq, 4)).astype(np.float32) * 3
    k = rng.standard_normal((2, nk, 4)).astype(np.float32) * 3
    v = rng.standard_normal((2, nk, 5)).astype(np.float32)
    plain = masked_attention(q, k, v)
    np.testing.assert_array_equal(masked_attention(q, k, v, mask=np.ones((nq, nk), bool)), plain)
    lo = v.min(axis=1, keepdims=True) - 1e-6
    hi = v.max(axis=1, keepdims=True) + 1e-6
    assert ((plain >= lo) & (plain <= hi)).all()


def test_attention_against_dense_reference():
    rng = np.random.default_rng(3)
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    mask = np.tril(np.ones((3, 6), bool), k=3)
    s = q @ k.T * 0.5
    s[~mask] = -np.inf
    w = np.exp(s - s.max(axis=1, keepdims=True))
    ref = (w / w.sum(axis=1, keepdims=True)) @ v
    np.testing.assert_allclose(masked_attention(q, k, v, mask, scale=0.5), ref, atol=1e-5)


# -- RNG -------------------------------------------------------------------

SEED0_FIRST16 = [
    0x99EC5F36CB75F2B4, 0xBF6E1F784956452A, 0x1A5F849D4933E6E0, 0x6AA594F1262D2D2C,
    0xBBA5AD4A1F842E59, 0xFFEF8375D9EBCACA, 0x6C160DEED2F54C98, 0x8920AD648FC30A3F,
    0xDB032C0BA7539731, 0xEB3A475A3E749A3D, 0x1D42993FA43F2A54, 0x11361BF526A14BB5,
    0x1B4F07A5AB3D8E9C, 0xA7A3257F6986DB7F, 0x7EFDAA95605DFC9C, 0x4BDE97C0A78EAAB8,
]


def _reference_stream(seed, n):
    """Straight transcription of the published splitmix64 and xoshiro256** rules."""
    x = seed & MASK
    s = []
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))
    rotl = lambda v, k: ((v << k) | (v >> (64 - k))) & MASK
    out = []
    for _ in range(n):
        out.append((rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_splitmix_known_value():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_seed0_pinned_outputs():
    r = SeededRNG(0)
    assert [r.next_u64() for _ in range(16)] == SEED0_FIRST16
    assert _reference_stream(0, 16) == SEED0_FIRST16


@given(st.integers(0, 2**64 - 1))
def test_stream_matches_reference(seed):
    r = SeededRNG(seed)
    assert [r.next_u64() for _ in range(8)] == _reference_stream(seed, 8)


def test_same_seed_same_stream():
    a, b = seeded_rng(123), seeded_rng(123)
    assert [a.uniform() for _ in range(1000)] == [b.uniform() for _ in range(1000)]
    assert seeded_rng(1).uniform() != seeded_rng(2).uniform()


def test_uniform_uses_top_53_bits():
    r1, r2 = SeededRNG(9), SeededRNG(9)
    assert r1.uniform() == (r2.next_u64() >> 11) / 2.0**53


def test_uniform_array_reference():
    key = SeededRNG(5).next_u64()
    expected = []
    for i in range(1, 9):
        z = (key + i * 0x9E3779B97F4A7C15) & MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        expected.append(((z ^ (z >> 31)) >> 11) / 2.0**53)
    assert SeededRNG(5).uniform_array(8).tolist() == expected


def test_categorical_degenerate():
    r = seeded_rng(0)
    assert all(r.categorical([1.0, 0.0]) == 0 for _ in range(1000))
    assert all(r.categorical([0.0, 0.0, 2.0]) == 2 for _ in range(100))


def test_categorical_balanced_frequency():
    r = seeded_rng(0)
    n = 100_000
    zeros = sum(r.categorical([0.5, 0.5]) == 0 for _ in range(n))
    # five standard deviations of Binomial(n, 1/2) is about 0.008 n
    assert 0.49 <= zeros / n <= 0.51


def test_categorical_errors():
    r = seeded_rng(0)
    for bad in ([], [0.0, 0.0], [-1.0, 2.0], [np.nan, 1.0]):
        with pytest.raises(ValueError):
            r.categorical(bad)


def test_integer_range():
    r = seeded_rng(4)
    vals = [r.integer(7) for _ in range(5000)]
    assert set(vals) == set(range(7))
    with pytest.raises(ValueError):
        r.integer(0)
