import math

import numpy as np
import pytest

from radio.quantize import (
    CompanderParams,
    QuantizeError,
    build_dequant_lut,
    compand_mse,
    compand_quantize,
    compander_forward,
    compander_inverse,
    grid_calibrate,
    lloyd_max_oracle,
    mmse_step,
    rtn_quantize,
    uniform_quantize,
)

SQRT2 = math.sqrt(2.0)
UNIT = CompanderParams(S=1.0, mu=0.0)


class TestUniformQuantize:
    def test_hand_example(self):
        assert uniform_quantize(0.7, 2, 0.5) == pytest.approx(0.75, abs=1e-15)

    def test_clipping(self):
        assert uniform_quantize(-10.0, 3, 1.0) == pytest.approx(-3.5, abs=1e-15)

    def test_infinite_depth_passthrough(self):
        x = np.array([0.3, -1.7, 2.2])
        assert uniform_quantize(x, math.inf, 0.5) is x

    def test_midrise_has_no_zero_level(self):
        x = np.linspace(-1, 1, 101)
        q = uniform_quantize(x, 4, 0.25)
        assert np.all(np.abs(q) >= 0.124)

    def test_bad_args(self):
        with pytest.raises(QuantizeError):
            uniform_quantize(1.0, 0, 0.5)
        with pytest.raises(QuantizeError):
            uniform_quantize(1.0, 3, -1.0)


class TestCompander:
    def test_median_maps_to_half(self):
        p = CompanderParams(S=2.0, mu=-1.3)
        assert compander_forward(-1.3, p) == pytest.approx(0.5, abs=1e-15)

    def test_hand_value(self):
        # theta - mu = 3S/sqrt(2) makes the exponent exactly -1
        val = compander_forward(3.0 / SQRT2, UNIT)
        assert val == pytest.approx(0.5 * (2.0 - math.exp(-1.0)), abs=1e-12)
        assert val == pytest.approx(0.81606, abs=5e-6)

    def test_odd_symmetry(self, rng):
        p = CompanderParams(S=0.7, mu=0.4)
        t = rng.normal(size=1000)
        total = compander_forward(p.mu + t, p) + compander_forward(p.mu - t, p)
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_inverse_of_midpoint(self):
        p = CompanderParams(S=3.0, mu=1.5)
        assert compander_inverse(0.5, p) == pytest.approx(1.5, abs=1e-15)

    def test_inverse_of_forward_example(self):
        u = compander_forward(3.0 / SQRT2, UNIT)
        assert compander_inverse(u, UNIT) == pytest.approx(3.0 / SQRT2, rel=1e-12)

    def test_round_trip(self, rng):
        p = CompanderParams(S=0.37, mu=-2.1)
        theta = rng.laplace(-2.1, 0.3, size=100_000)
        back = compander_inverse(compander_forward(theta, p), p)
        assert np.max(np.abs(back - theta) / (1.0 + np.abs(theta))) < 1e-12

    def test_inverse_domain(self):
        with pytest.raises(QuantizeError):
            compander_inverse(0.0, UNIT)
        with pytest.raises(QuantizeError):
            compander_inverse(1.0, UNIT)


class TestDequantLUT:
    def test_depth_one_symmetric(self):
        lut = build_dequant_lut(1, CompanderParams(S=2.0, mu=0.5))
        assert len(lut.values) == 2
        assert lut.values[0] + lut.values[1] == pytest.approx(1.0, abs=1e-12)

    def test_depth_two_closed_form(self):
        lut = build_dequant_lut(2, UNIT)
        expected = [compander_inverse(u, UNIT) for u in (0.125, 0.375, 0.625, 0.875)]
        assert np.allclose(lut.values, expected, atol=1e-15)

    def test_monotone_for_all_depths(self, rng):
        for _ in range(20):
            p = CompanderParams(S=float(np.exp(rng.normal())), mu=float(rng.normal()))
            for b in range(1, 9):
                vals = np.array(build_dequant_lut(b, p).values)
                assert np.all(np.diff(vals) > 0)

    def test_depth_bounds(self):
        with pytest.raises(QuantizeError):
            build_dequant_lut(0, UNIT)
        with pytest.raises(QuantizeError):
            build_dequant_lut(9, UNIT)


class TestCompandQuantize:
    def test_depth_zero_prunes_to_mean(self):
        p = CompanderParams(S=1.0, mu=0.25)
        idx, deq = compand_quantize(np.array([3.0, -2.0, 0.1]), 0, p)
        assert idx.size == 0
        assert np.all(deq == 0.25)

    def test_median_deterministic(self):
        idx, deq = compand_quantize(np.array([0.0]), 4, UNIT)
        lut = build_dequant_lut(4, UNIT)
        # u = 0.5 falls in cell 8 of 16; reconstruction is that cell's midpoint
        assert idx[0] == 8
        assert deq[0] == lut.values[8]

    def test_round_trip_through_lut_bitexact(self, rng):
        p = CompanderParams(S=1.3, mu=-0.2)
        theta = rng.laplace(-0.2, 1.0, size=4096)
        for b in (1, 3, 8):
            idx, deq = compand_quantize(theta, b, p)
            lut = np.asarray(build_dequant_lut(b, p).values)
            assert np.array_equal(deq, lut[idx])

    def test_mse_close_to_lloyd_max(self, rng):
        theta = rng.laplace(0.0, 1.0 / SQRT2, size=10**6)
        mse = compand_mse(theta, 8, UNIT)
        _, _, lm = lloyd_max_oracle(theta, 8)
        assert abs(mse - lm) / lm < 0.05


class TestLloydMax:
    def test_two_point_source(self):
        levels, _, mse = lloyd_max_oracle(np.array([-1.0, 1.0, -1.0, 1.0]), 1)
        assert mse == pytest.approx(0.0, abs=1e-15)
        assert sorted(levels) == [-1.0, 1.0]

    def test_uniform_source_matches_theory(self, rng):
        samples = rng.uniform(0.0, 1.0, size=300_000)
        _, _, mse = lloyd_max_oracle(samples, 3)
        assert mse == pytest.approx(1.0 / 768.0, rel=0.02)

    def test_mse_nonincreasing_in_iterations(self, rng):
        samples = rng.laplace(0.0, 1.0, size=20_000)
        levels = np.quantile(samples, (np.arange(16) + 0.5) / 16)
        prev = np.inf
        for _ in range(30):  # one fixed-point sweep at a time
            levels, _, mse = lloyd_max_oracle(samples, 4, max_iter=1, init_levels=levels)
            assert mse <= prev + 1e-15
            prev = mse

    def test_degenerate_rejected(self):
        with pytest.raises(QuantizeError):
            lloyd_max_oracle(np.ones(100), 2)


class TestGridCalibrate:
    def test_synthetic_recovery(self, rng):
        p_true = CompanderParams(S=1.0, mu=0.0)
        theta = rng.laplace(0.0, 1.0 / SQRT2, size=300_000)
        p = grid_calibrate(theta, 6, p_true)
        assert abs(math.log2(p.S / p_true.S)) <= 1.0 / 8.0 + 1e-12
        assert abs(p.mu - p_true.mu) <= 1.0 / 8.0

    def test_never_worse_than_start(self, rng):
        for _ in range(10):
            theta = rng.normal(0.3, 2.0, size=5000)
            p0 = CompanderParams(S=float(theta.std()), mu=float(theta.mean()))
            p = grid_calibrate(theta, 4, p0)
            assert compand_mse(theta, 4, p) <= compand_mse(theta, 4, p0) + 1e-18

    def test_scale_equivariance(self, rng):
        theta = rng.laplace(0.0, 1.0, size=100_000)
        p1 = grid_calibrate(theta, 5, CompanderParams(S=float(theta.std()), mu=0.0))
        p2 = grid_calibrate(2.0 * theta, 5, CompanderParams(S=float(2.0 * theta.std()), mu=0.0))
        assert p2.S / p1.S == pytest.approx(2.0, rel=2 ** (1.0 / 8.0) - 1.0)

    def test_constant_stream_returns_start(self):
        p0 = CompanderParams(S=0.5, mu=0.1)
        assert grid_calibrate(np.full(100, 3.3), 4, p0) == p0


class TestErrorLaw:
    def test_slope_minus_two(self, rng):
        theta = rng.laplace(0.0, 1.0 / SQRT2, size=300_000)
        depths = np.arange(4, 9)
        logmse = [math.log2(compand_mse(theta, int(b), UNIT)) for b in depths]
        slope = np.polyfit(depths, logmse, 1)[0]
        assert slope == pytest.approx(-2.0, abs=0.05)

    def test_rtn_dominance_low_depth(self, rng):
        theta = rng.laplace(0.0, 1.0 / SQRT2, size=200_000)
        for b in (2, 3, 4):
            _, deq = rtn_quantize(theta, b)
            rtn_mse = float(np.mean((deq - theta) ** 2))
            assert compand_mse(theta, b, UNIT) < rtn_mse


class TestMmseStep:
    def test_beats_full_range_step(self, rng):
        theta = rng.normal(0.0, 1.0, size=50_000)
        b = 4
        d_full = float(theta.max() - theta.min()) / 2**b
        d_star = mmse_step(theta, b)
        mse = lambda d: float(np.mean((uniform_quantize(theta, b, d) - theta) ** 2))
        assert mse(d_star) <= mse(d_full)
