import math
from fractions import Fraction

import pytest

from tileq.accounting import (all_budgets, bits_1d, bits_basic, bits_per_expert, bits_tileq, budget_json,
                              flops_estimate, metadata_bits)
from tileq.errors import ParameterError

QWEN = dict(d_fp=16, d_factor=8, r=32, i=768, o=2048)


class TestBasic:
    def test_two_bit(self):
        b = bits_basic(2, 128, 16)
        assert b.total_avg_bits == Fraction(17, 8)
        assert b.lowrank_factor_bits == b.singular_bits == 0

    def test_three_bit(self):
        assert float(bits_basic(3, 128).total_avg_bits) == 3.125

    def test_single_scale_limit(self):
        b = bits_basic(4, 768 * 2048)
        assert abs(float(b.total_avg_bits) - 4) < 1e-4

    def test_total_is_sum(self):
        b = bits_tileq(3, 64, 16, 8, 16, 512, 256, 32, 6, 6)
        assert b.total_avg_bits == b.base_bits + b.scale_bits + b.lowrank_factor_bits + b.singular_bits


class TestPerExpert:
    def test_qwen_values(self):
        b = bits_per_expert(2, 128, **QWEN)
        assert b.lowrank_factor_bits == Fraction(11, 24)
        assert b.singular_bits == Fraction(1, 96)
        assert b.extra_bits == Fraction(15, 32)

    def test_sixteen_bit_factors(self):
        b = bits_per_expert(2, 128, **{**QWEN, "d_factor": 16})
        assert float(b.extra_bits) == pytest.approx(0.927083, abs=1e-6)

    def test_zero_rank_is_basic(self):
        assert bits_per_expert(2, 128, r=0, i=768, o=2048).total_avg_bits == bits_basic(2, 128).total_avg_bits


class TestShared1d:
    def test_qwen_value(self):
        assert float(bits_1d(2, 128, K=128, **QWEN).extra_bits) == pytest.approx(0.127604, abs=1e-6)

    def test_one_expert(self):
        one = bits_1d(2, 128, K=1, **QWEN)
        pe = bits_per_expert(2, 128, **QWEN)
        assert one.extra_bits == pe.lowrank_factor_bits

    def test_large_k_limit(self):
        b = bits_1d(2, 128, K=10**9, **QWEN)
        assert abs(float(b.extra_bits) - 32 * 8 / 2048) < 1e-6


class TestTileq:
    def test_qwen_values(self):
        b = bits_tileq(2, 128, K=128, M=12, N=12, **QWEN)
        assert float(b.lowrank_factor_bits) == pytest.approx(0.04297, abs=1e-5)
        assert float(b.singular_bits) == pytest.approx(0.0000814, abs=1e-7)
        assert float(b.extra_bits) == pytest.approx(0.0430, abs=1e-4)

    def test_ratios(self):
        t = bits_tileq(2, 128, K=128, M=12, N=12, **QWEN).extra_bits
        assert float(bits_per_expert(2, 128, **QWEN).extra_bits / t) == pytest.approx(10.9, abs=0.05)
        assert float(bits_1d(2, 128, K=128, **QWEN).extra_bits / t) == pytest.approx(2.97, abs=0.01)

    def test_degenerate_grid(self):
        assert bits_tileq(2, 128, K=1, M=1, N=1, **QWEN).total_avg_bits == \
            bits_per_expert(2, 128, **QWEN).total_avg_bits

    def test_mixtral_ordering(self):
        p = dict(d_fp=16, d_factor=8, r=32, i=14336, o=4096)
        t = bits_tileq(2, 128, K=8, M=3, N=3, **p).extra_bits
        s = bits_1d(2, 128, K=8, **p).extra_bits
        e = bits_per_expert(2, 128, **p).extra_bits
        assert t < s < e

    def test_sqrt_k_trend(self):
        for k in (16, 64, 256):
            m = math.isqrt(k)
            ratio = bits_per_expert(2, 128, 16, 8, 8, 4096, 4096).extra_bits / \
                bits_tileq(2, 128, 16, 8, 8, 4096, 4096, k, m, m).extra_bits
            assert abs(float(ratio) / math.sqrt(k) - 1) <= 0.15

    def test_rejects_bad_dims(self):
        with pytest.raises(ParameterError):
            bits_tileq(2, 128, K=0, **QWEN)
        with pytest.raises(ParameterError):
            bits_basic(-1, 128)


class TestFlops:
    def test_degenerate(self):
        assert flops_estimate("tileq_2d", 1, 768, 2048, 32) == 768 * 32 + 32 * 2048 + 32

    def test_qwen_like(self):
        assert flops_estimate("tileq_2d", 16, 768, 2048, 32, 12, 12, 128, 8) == \
            16 * (768 * 12 * 32 + 12 * 32 * 2048 + 8 * 32)
        assert flops_estimate("element_wise", 16, 768, 2048, 32, top_k=8) == 16 * 8 * (768 * 32 + 32 * 2048)

    def test_unknown_scheme(self):
        with pytest.raises(ParameterError):
            flops_estimate("dense", 1, 2, 2, 1)


class TestReport:
    def test_budget_json(self):
        out = budget_json(all_budgets(2, 128, 16, 8, 32, 768, 2048, 128, 12, 12))
        assert set(out) >= {"basic", "per_expert", "shared_1d", "tileq_2d"}
        assert out["basic"]["total_avg_bits"] == 2.125
        assert out["ratio_per_expert_over_tileq_2d"] == pytest.approx(10.888, abs=1e-3)
        assert out["ratio_shared_1d_over_tileq_2d"] == pytest.approx(2.964, abs=1e-3)
        assert out["tileq_2d"]["params"]["M"] == 12

    def test_metadata_small_for_large_layers(self):
        meta = metadata_bits(2, 128, 768, 2048, 128, 12, 12)
        assert 0 < float(meta) < 0.05
        # zero points at d bits per group dominate
        assert float(meta) == pytest.approx(2 / 128 + 2 * 32 / 2048, abs=1e-3)
