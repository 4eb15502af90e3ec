import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnsc.channel import (
    BitBuffer,
    Channel,
    ChannelConfig,
    ChannelKind,
    SplitMix64,
    bec_transmit,
    bsc_transmit,
    derive_seed,
    pack_bits,
    unpack_bits,
)

MASK = (1 << 64) - 1


def splitmix_reference(seed, n):
    """Textbook sequential SplitMix64 on Python ints."""
    out, state = [], seed & MASK
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def random_bits(n, seed=0):
    return np.random.default_rng(seed).integers(0, 2, size=n, dtype=np.uint8)


class TestGenerator:
    def test_matches_sequential_reference(self):
        rng = SplitMix64(1234567)
        got = [int(v) for v in rng.next_u64(5)] + [int(v) for v in rng.next_u64(3)]
        assert got == splitmix_reference(1234567, 8)

    def test_known_first_output_seed_zero(self):
        # first output of SplitMix64 seeded with 0
        assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF

    def test_uniform_range(self):
        u = SplitMix64(5).uniform(10000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_derive_seed_distinct_and_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        seeds = {derive_seed(0, t, p) for t in range(10) for p in range(10)}
        assert len(seeds) == 100


class TestBSC:
    def test_p_zero_identity(self):
        x = random_bits(1000)
        np.testing.assert_array_equal(bsc_transmit(x, ChannelConfig("bsc", 0.0, 1)), x)

    def test_p_one_flips_everything(self):
        x = random_bits(1000)
        np.testing.assert_array_equal(bsc_transmit(x, ChannelConfig("bsc", 1.0, 1)), 1 - x)

    def test_flip_fraction(self):
        x = random_bits(10**6)
        y = bsc_transmit(x, ChannelConfig("bsc", 0.15, 7))
        assert 0.148 <= np.mean(x != y) <= 0.152

    def test_preserves_dtype_and_shape(self):
        x = random_bits(24).reshape(2, 3, 4).astype(np.float32)
        y = bsc_transmit(x, ChannelConfig("bsc", 0.5, 3))
        assert y.dtype == np.float32 and y.shape == (2, 3, 4)
        assert set(np.unique(y)) <= {0.0, 1.0}

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            bsc_transmit(np.array([0, 2]), ChannelConfig("bsc", 0.1))
        with pytest.raises(ValueError):
            bsc_transmit(np.array([0.5]), ChannelConfig("bsc", 0.1))

    def test_kind_checked(self):
        with pytest.raises(ValueError):
            bsc_transmit(random_bits(4), ChannelConfig("bec", 0.1))


class TestBEC:
    def test_p_zero_identity(self):
        x = random_bits(1000)
        np.testing.assert_array_equal(bec_transmit(x, ChannelConfig("bec", 0.0, 1)), x)

    def test_p_one_is_independent_of_input(self):
        n = 10**6
        x = random_bits(n, 1)
        y = bec_transmit(x, ChannelConfig("bec", 1.0, 9))
        assert abs(np.sum(x != y) - n / 2) <= 0.002 * n
        # the output does not depend on the input at all
        np.testing.assert_array_equal(y, bec_transmit(1 - x, ChannelConfig("bec", 1.0, 9)))

    def test_effective_flip_rate_is_half(self):
        x = random_bits(10**6, 2)
        y = bec_transmit(x, ChannelConfig("bec", 0.3, 11))
        assert 0.148 <= np.mean(x != y) <= 0.152


class TestChannelObject:
    def test_fresh_noise_per_call(self):
        ch = Channel(ChannelConfig("bsc", 0.5, 3))
        x = np.zeros(256, dtype=np.uint8)
        assert not np.array_equal(ch(x), ch(x))

    def test_same_seed_same_output(self):
        x = random_bits(5000)
        for kind in ("bsc", "bec"):
            a, b = Channel(ChannelConfig(kind, 0.2, 42)), Channel(ChannelConfig(kind, 0.2, 42))
            for _ in range(3):
                np.testing.assert_array_equal(a(x), b(x))

    def test_p_zero_leaves_stream_untouched(self):
        ch = Channel(ChannelConfig("bsc", 0.0, 3))
        ch(random_bits(100))
        assert ch.rng.counter == 0

    def test_backward_is_identity(self):
        g = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(Channel.backward(g), g)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChannelConfig("bsc", 1.5)
        assert ChannelConfig("BEC", 0.1).kind is ChannelKind.BEC
        assert ChannelConfig("bsc", 0.1, 4).with_(p=0.2) == ChannelConfig("bsc", 0.2, 4)


@pytest.mark.parametrize("kind,p", [("bsc", 0.15), ("bec", 0.3)])
def test_events_independent_across_positions(kind, p):
    """Chi-square test on the joint counts of adjacent error events."""
    n = 200_000
    x = np.zeros(n, dtype=np.uint8)
    e = bsc_transmit(x, ChannelConfig(kind, p, 5)) if kind == "bsc" else bec_transmit(x, ChannelConfig(kind, p, 5))
    a, b = e[:-1:2], e[1::2]
    observed = np.array([[np.sum((a == i) & (b == j)) for j in (0, 1)] for i in (0, 1)], dtype=float)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 < 10.83  # 1 dof, p = 0.001


def test_events_independent_across_time_steps():
    ch = Channel(ChannelConfig("bsc", 0.25, 8))
    x = np.zeros(100_000, dtype=np.uint8)
    a, b = ch(x), ch(x)
    observed = np.array([[np.sum((a == i) & (b == j)) for j in (0, 1)] for i in (0, 1)], dtype=float)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    assert float(((observed - expected) ** 2 / expected).sum()) < 10.83


class TestPacking:
    def test_lsb_first_example(self):
        buf = pack_bits(np.array([1, 0, 1, 1, 0, 0, 0, 0]))
        assert buf.data == bytes([0x0D]) and buf.bit_len == 8

    def test_512_bits(self):
        buf = pack_bits(random_bits(512).reshape(32, 4, 4))
        assert len(buf.data) == 64 and buf.bit_len == 512

    def test_padding_zero(self):
        buf = pack_bits(np.ones(3, dtype=np.uint8))
        assert buf.data == bytes([0x07])

    def test_unpack_validation(self):
        buf = pack_bits(np.ones(10, dtype=np.uint8))
        with pytest.raises(ValueError):
            unpack_bits(buf, (11,))
        with pytest.raises(ValueError):
            unpack_bits(BitBuffer(b"\xff\xff", 10), (10,))
        with pytest.raises(ValueError):
            BitBuffer(b"\x00", 9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_pack_roundtrip(n, seed):
    x = random_bits(n, seed)
    np.testing.assert_array_equal(unpack_bits(pack_bits(x), (n,)), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.floats(0.0, 1.0), st.integers(0, 2**63 - 1), st.sampled_from(["bsc", "bec"]))
def test_output_always_binary_and_reproducible(n, p, seed, kind):
    x = random_bits(n, n)
    cfg = ChannelConfig(kind, p, seed)
    a, b = Channel(cfg)(x), Channel(cfg)(x)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}
