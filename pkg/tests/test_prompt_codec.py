"""Prompt codec tests: compose/interpolate oracles, quantizer bounds, bitrates."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptstream import prompt_codec as pc
from promptstream.numerics import ShapeMismatchError

RNG = np.random.default_rng(7)


def rand_prompt(rank=8, d=64):
    return pc.random_prompt(rank, d, RNG)


class TestCompose:
    def test_rank_one_all_ones(self):
        p = pc.LowRankPrompt(np.ones((77, 1), np.float32), np.ones((1, 16), np.float32))
        assert np.array_equal(pc.compose(p), np.ones((77, 16), np.float32))

    def test_zero_factors(self):
        p = pc.LowRankPrompt(np.zeros((77, 4), np.float32), RNG.normal(size=(4, 16)).astype(np.float32))
        assert np.array_equal(pc.compose(p), np.zeros((77, 16), np.float32))

    def test_matches_triple_loop_oracle(self):
        p = rand_prompt(rank=8, d=32)
        want = np.empty((77, 32), np.float32)
        for i in range(77):
            for j in range(32):
                s = np.float32(0.0)
                for k in range(8):
                    s = np.float32(s + np.float32(p.U[i, k] * p.V[k, j]))
                want[i, j] = s
        assert np.array_equal(pc.compose(p), want)

    def test_rank_bound_enforced(self):
        with pytest.raises(ValueError, match="rank"):
            pc.LowRankPrompt(np.zeros((77, 20), np.float32), np.zeros((20, 8), np.float32))


class TestInterpolate:
    def setup_method(self):
        self.group = pc.PromptGroup(rand_prompt(), rand_prompt(), group_len=5)

    def test_endpoints_exact(self):
        assert np.array_equal(pc.interpolate(self.group, 0), pc.compose(self.group.keyframe_a))
        assert np.array_equal(pc.interpolate(self.group, 4), pc.compose(self.group.keyframe_b))

    def test_midpoint_is_elementwise_mean(self):
        mid = pc.interpolate(self.group, 2)
        want = 0.5 * (pc.compose(self.group.keyframe_a) + pc.compose(self.group.keyframe_b))
        assert np.abs(mid - want).max() < 1e-6

    def test_affine_in_alpha(self):
        a = pc.compose(self.group.keyframe_a) + pc.compose(self.group.keyframe_b)
        for i in range(5):
            j = 4 - i  # alphas are symmetric for uniform spacing
            s = pc.interpolate(self.group, i) + pc.interpolate(self.group, j)
            assert np.abs(s - a).max() < 1e-5

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            pc.interpolate(self.group, 5)

    def test_alpha_validation(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            pc.PromptGroup(rand_prompt(), rand_prompt(), 3, alphas=(0.0, 0.7, 0.7))
        with pytest.raises(ValueError, match="start at 0"):
            pc.PromptGroup(rand_prompt(), rand_prompt(), 3, alphas=(0.1, 0.5, 1.0))

    def test_mismatched_keyframes(self):
        with pytest.raises(ShapeMismatchError):
            pc.PromptGroup(rand_prompt(rank=4), rand_prompt(rank=8), 5)


class TestQuantizer:
    def test_zeros_roundtrip(self):
        qm = pc.quantize(np.zeros((5, 4), np.float32))
        assert qm.scale == 0.0
        assert (qm.codes == 1 << 11).all()
        assert np.array_equal(pc.dequantize(qm), np.zeros((5, 4), np.float32))

    def test_three_level_bound(self):
        m = np.array([[-1.0, 0.0, 1.0]], np.float32)
        qm = pc.quantize(m, q=12)
        err = np.abs(pc.dequantize(qm) - m).max()
        assert err <= 2.0 / (2 ** 12 - 1) / 2 + 1e-9

    def test_random_roundtrip_bound(self):
        m = RNG.uniform(-3, 3, size=(77, 64)).astype(np.float32)
        qm = pc.quantize(m, q=12)
        err = np.abs(pc.dequantize(qm).astype(np.float64) - m).max()
        assert err <= qm.scale / 2 * (1 + 1e-5)

    @given(st.integers(2, 14), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_requantize_is_idempotent(self, q, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(0, 1, size=(9, 7)).astype(np.float32)
        qm = pc.quantize(m, q=q)
        qm2 = pc.quantize(pc.dequantize(qm), q=q)
        assert np.array_equal(qm.codes, qm2.codes)

    def test_codes_within_width(self):
        m = RNG.normal(size=(20, 20)).astype(np.float32)
        qm = pc.quantize(m, q=6)
        assert qm.codes.max() <= 63 and qm.codes.min() >= 0


class TestBitrate:
    def test_paper_operating_point(self):
        assert pc.bitrate_estimate(1024, 1, 12, 1) == 13212

    def test_zero_rank(self):
        assert pc.bitrate_estimate(1024, 0, 12, 1) == 0

    def test_rank_sixteen(self):
        assert pc.bitrate_estimate(1024, 16, 12, 1) == 211392

    def test_linear_in_each_factor(self):
        base = pc.bitrate_estimate(64, 3, 10, 2)
        assert pc.bitrate_estimate(64, 6, 10, 2) == 2 * base
        assert pc.bitrate_estimate(64, 3, 20, 2) == 2 * base
        assert pc.bitrate_estimate(64, 3, 10, 4) == 2 * base

    def test_exact_with_fractional_rate(self):
        r = pc.bitrate_estimate(1024, 1, 12, Fraction(3, 2))
        assert r == 19818 and isinstance(r, int)
