import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe2pc.fixed import (
    DEFAULT, FixedConfig, FixedPointOverflow, FixedTensor, decode, encode, fixed_mul, ring_add, ring_sub,
    truncate_plain,
)


class TestEncode:
    def test_known_values(self):
        assert encode(1.0) == 1 << 18
        assert encode(0.0) == 0
        assert encode(-1.0) == np.uint64(2**64 - 2**18)

    def test_half_rounds_away_from_zero(self):
        ulp = 2.0 ** -18
        assert decode(encode(0.5 * ulp)) == ulp
        assert decode(encode(-0.5 * ulp)) == -ulp

    def test_overflow(self):
        with pytest.raises(FixedPointOverflow):
            encode(2.0 ** 45)
        with pytest.raises(FixedPointOverflow):
            encode(float("nan"))

    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_round_trip_within_half_ulp(self, v):
        assert abs(decode(encode(v)) - v) <= 2.0 ** -19

    def test_small_ring(self):
        cfg = FixedConfig(12, 4)
        e = encode([-3.0, 2.5], cfg)
        assert e.max() < 1 << 12
        np.testing.assert_array_equal(decode(e, cfg), [-3.0, 2.5])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FixedConfig(65, 18)
        with pytest.raises(ValueError):
            FixedConfig(16, 16)


class TestRing:
    def test_wraparound(self):
        top = np.uint64(2**64 - 1)
        assert ring_add(top, 1) == 0
        assert ring_sub(0, 1) == top

    def test_truncate_examples(self):
        one = encode(1.0)
        assert truncate_plain(one * one, 18) == one
        assert truncate_plain(0, 18) == 0
        got = decode(truncate_plain(encode(-0.5) * encode(0.5), 18))
        assert abs(got + 0.25) <= 2.0 ** -18

    @settings(max_examples=200)
    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_product_bound(self, a, b):
        got = decode(fixed_mul(encode(a), encode(b)))
        ea, eb = decode(encode(a)), decode(encode(b))
        assert abs(got - ea * eb) <= 2.0 ** -18

    def test_small_ring_masks(self):
        cfg = FixedConfig(10, 3)
        assert ring_add(1000, 100, cfg) == (1100 % 1024)


class TestFixedTensor:
    def test_round_trip_and_eq(self):
        t = FixedTensor.from_real([[0.25, -1.5]])
        assert t.dims == (1, 2)
        np.testing.assert_array_equal(t.to_real(), [[0.25, -1.5]])
        assert t == FixedTensor(t.data.copy())
        assert t != FixedTensor(t.data.copy(), FixedConfig(64, 12))

    def test_default_config(self):
        assert DEFAULT.ell == 64 and DEFAULT.scale_s == 18
