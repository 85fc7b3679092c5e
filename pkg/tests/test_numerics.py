import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mibminet.numerics import (QuantTensor, ShapeError, check_finite, dequantize, fake_quantize, quantize,
                               quantize_to_grid, reshape, round_half_away, rshift_round)
from mibminet.quantizer import choose_scale_exp


class TestReshape:
    def test_preserves_elements(self):
        t = np.arange(12.0)
        assert reshape(t, (3, 4)).shape == (3, 4)
        np.testing.assert_array_equal(reshape(t, (3, 4)).ravel(), t)

    def test_wrong_count_raises(self):
        with pytest.raises(ShapeError):
            reshape(np.zeros(12), (5, 3))

    def test_check_finite(self):
        with pytest.raises(FloatingPointError):
            check_finite(np.array([1.0, np.nan]))


class TestRounding:
    @pytest.mark.parametrize("x, want", [(0.5, 1), (-0.5, -1), (1.5, 2), (-2.5, -3), (0.49, 0), (2.51, 3)])
    def test_half_away_from_zero(self, x, want):
        assert round_half_away(x) == want

    @pytest.mark.parametrize("v, s, want", [(21, 1, 11), (-21, 1, -11), (20, 2, 5), (22, 2, 6),
                                            (-22, 2, -6), (7, 0, 7), (3, 3, 0), (4, 3, 1), (-4, 3, -1)])
    def test_rshift_round(self, v, s, want):
        assert int(rshift_round(v, s)) == want

    @given(st.integers(-(2 ** 40), 2 ** 40), st.integers(0, 20))
    def test_rshift_matches_exact_rational(self, v, s):
        # oracle: exact rational rounding with Python ints
        q, r = divmod(abs(v), 1 << s)
        want = q + (1 if s and 2 * r >= (1 << s) else 0)
        assert int(rshift_round(v, s)) == (want if v >= 0 else -want)


class TestQuantize:
    def test_grid_example(self):
        # multiplier 127 scales max |t| = 1 to the edge of the weight range
        data, sat = quantize_to_grid([0.5, -1.0, 0.25], 127)
        assert data.tolist() == [64, -127, 32]
        assert sat == 0

    def test_power_of_two_example(self):
        q = quantize(np.array([0.5, -1.0, 0.25]), choose_scale_exp([0.5, -1.0, 0.25]))
        assert q.scale_exp == 6
        assert q.data.tolist() == [32, -64, 16]

    def test_weight_range_is_symmetric(self):
        q = quantize(np.array([-10.0, 10.0]), 4)
        assert q.data.tolist() == [-127, 127]
        assert q.saturated == 2

    def test_activation_range_allows_minus_128(self):
        assert fake_quantize(np.array([-100.0]), 0).tolist() == [-100.0]
        assert fake_quantize(np.array([-200.0]), 0).tolist() == [-128.0]

    def test_quant_tensor_rejects_non_int8(self):
        with pytest.raises(TypeError):
            QuantTensor(np.zeros(3, np.int16), 0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40))
    def test_round_trip_within_half_step(self, values):
        t = np.array(values)
        n = choose_scale_exp(t)
        q = quantize(t, n)
        assert q.saturated == 0
        assert np.all(np.abs(dequantize(q, np.float64) - t) <= 0.5 * 2.0 ** -n + 1e-12)


class TestChooseScaleExp:
    @pytest.mark.parametrize("m, n", [(1.0, 6), (127.0, 0), (0.0, 0), (0.5, 7), (128.0, -1), (1.0 / 1e9, 24)])
    def test_examples(self, m, n):
        assert choose_scale_exp(np.array([m, -m / 2])) == n

    @pytest.mark.parametrize("m, n", [(1e-300, 24), (5e-324, 24), (1e300, -24)])
    def test_clamped_extremes(self, m, n):
        assert choose_scale_exp(np.array([m])) == n

    def test_zero_tensor_quantizes_to_zero(self):
        q = quantize(np.zeros(5), choose_scale_exp(np.zeros(5)))
        assert q.scale_exp == 0 and not q.data.any()

    @given(st.floats(1e-5, 1e6))
    def test_largest_exponent_that_fits(self, m):
        n = choose_scale_exp(np.array([m]))
        assert m * 2.0 ** n <= 127
        assert m * 2.0 ** (n + 1) > 127
