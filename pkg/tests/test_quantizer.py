import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tileq.errors import DataError, FormatError, NumericError, ParameterError
from tileq.packing import pack_codes, packed_length, unpack_codes
from tileq.quantizer import (HessianProxy, QuantizedExpert, dequantize, estimate_hessian,
                             expected_packed_length, identity_hessian, proxy_loss, quantize,
                             quantize_gptq, quantize_rtn, quantize_vq)


def _loss(r, q, h):
    return proxy_loss(r, dequantize(q), h)


def _random_hessian(rng, i, samples=None):
    x = rng.standard_normal((samples or 4 * i, i)) * rng.uniform(0.2, 3.0, i)
    return estimate_hessian(x, 0.01)


class TestPacking:
    def test_two_bit_layout(self):
        assert pack_codes([1, 2, 3, 0], 2).tolist() == [0x39]

    def test_three_bit_layout(self):
        assert pack_codes([5, 3, 7], 3).tolist() == [221, 1]

    def test_eight_bit_passthrough(self):
        assert pack_codes([0, 255, 7], 8).tolist() == [0, 255, 7]

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from([1, 2, 3, 4, 5, 6, 7, 8]), st.data())
    def test_bijective(self, bits, data):
        codes = data.draw(st.lists(st.integers(0, (1 << bits) - 1), max_size=80))
        packed = pack_codes(codes, bits)
        assert packed.size == packed_length(len(codes), bits)
        assert unpack_codes(packed, len(codes), bits).tolist() == codes

    def test_trailing_bits_rejected(self):
        with pytest.raises(FormatError):
            unpack_codes(np.array([0b1100_0000], dtype=np.uint8), 3, 2)

    def test_length_mismatch(self):
        with pytest.raises(FormatError):
            unpack_codes(np.zeros(3, dtype=np.uint8), 3, 4)

    def test_code_out_of_range(self):
        with pytest.raises(ParameterError):
            pack_codes([4], 2)


class TestHessian:
    def test_single_basis_sample(self):
        h = estimate_hessian(np.array([[1.0, 0.0, 0.0]]), 0.0)
        np.testing.assert_array_equal(h.matrix, np.diag([1.0, 0, 0]))

    def test_isotropic(self):
        x = np.random.default_rng(0).standard_normal((10_000, 6))
        h = estimate_hessian(x, 0.0)
        np.testing.assert_allclose(np.diag(h.matrix), 1.0, rtol=0.1)

    def test_damping(self):
        x = np.random.default_rng(1).standard_normal((50, 5)) * [1, 2, 3, 4, 5]
        plain = estimate_hessian(x, 0.0).matrix
        damped = estimate_hessian(x, 0.01)
        lam = 0.01 * np.mean(np.diag(plain))
        np.testing.assert_allclose(np.diag(damped.matrix) - np.diag(plain), lam, rtol=1e-12)
        assert damped.damping == pytest.approx(lam)
        np.testing.assert_allclose(damped.matrix, damped.matrix.T)
        assert np.linalg.eigvalsh(damped.matrix).min() >= 0

    def test_empty(self):
        with pytest.raises(DataError):
            estimate_hessian(np.zeros((0, 3)))


class TestRtn:
    def test_grid_aligned(self):
        r = np.array([[0.0, 1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(dequantize(quantize_rtn(r, 2, 4)), r)

    def test_zero_group(self):
        q = quantize_rtn(np.zeros((2, 4)), 3, 4)
        np.testing.assert_array_equal(q.codes(), np.repeat(q.zeros.ravel(), 4))
        np.testing.assert_array_equal(dequantize(q), 0.0)

    def test_constant_group_with_exact_scale(self):
        # 1.75 / 7 = 0.25 is exact in float16, so the constant is reproduced exactly
        q = quantize_rtn(np.full((1, 8), 1.75), 3, 8)
        np.testing.assert_array_equal(dequantize(q), 1.75)
        assert len(set(q.codes().tolist())) == 1

    def test_half_step_bound(self):
        r = np.random.default_rng(2).standard_normal((6, 8))
        q = quantize_rtn(r, 3, 8)
        err = np.abs(dequantize(q).astype(np.float64) - r)
        step = q.scales.astype(np.float64)[:, [0]]
        assert np.all(err <= step / 2 + 1e-6 * step)

    def test_short_final_group(self):
        r = np.random.default_rng(3).standard_normal((3, 10))
        q = quantize_rtn(r, 4, 4)
        assert q.num_groups == 3 and q.scales.shape == (3, 3)
        assert q.packed.size == expected_packed_length(q) == -(-3 * 10 * 4 // 8)

    def test_bad_bits(self):
        with pytest.raises(ParameterError):
            quantize_rtn(np.zeros((1, 4)), 5, 4)

    def test_idempotent(self):
        r = np.random.default_rng(4).standard_normal((4, 16))
        q1 = quantize_rtn(r, 3, 8)
        q2 = quantize_rtn(dequantize(q1), 3, 8)
        np.testing.assert_array_equal(dequantize(q1), dequantize(q2))

    def test_zero_points_in_range(self):
        r = np.random.default_rng(5).standard_normal((8, 32)) + 3.0
        for bits in (2, 3, 4, 8):
            q = quantize_rtn(r, bits, 16)
            assert q.zeros.max() < (1 << bits)
            assert np.all(q.scales > 0)


class TestGptq:
    def test_identity_hessian_equals_rtn(self):
        r = np.random.default_rng(0).standard_normal((5, 12))
        h = identity_hessian(12)
        g, t = quantize_gptq(r, h, 3, 4), quantize_rtn(r, 3, 4)
        assert abs(_loss(r, g, h) - _loss(r, t, h)) <= 1e-6

    def test_anisotropic_two_column(self):
        h = HessianProxy(np.diag([100.0, 1.0]), 0.0, 0)
        r = np.array([[0.37, -0.81]])
        for bits in (2, 3):
            q = quantize_gptq(r, h, bits, 2)
            scale, zero = q.scales.astype(np.float64)[0, 0], float(q.zeros[0, 0])
            best = min(proxy_loss(r, (np.array([[a, b]]) - zero) * scale, h)
                       for a, b in itertools.product(range(1 << bits), repeat=2))
            loss = _loss(r, q, h)
            assert loss <= _loss(r, quantize_rtn(r, bits, 2), h) + 1e-12
            assert abs(loss - best) <= 1e-9

    def test_dominates_rtn(self):
        for seed in range(60):
            rng = np.random.default_rng(seed)
            i = int(rng.integers(2, 24))
            r = rng.standard_normal((int(rng.integers(1, 6)), i))
            h = _random_hessian(rng, i, samples=int(rng.integers(i, 4 * i)))
            bits = int(rng.choice([2, 3, 4]))
            g = int(rng.integers(1, i + 1))
            assert _loss(r, quantize_gptq(r, h, bits, g), h) <= _loss(r, quantize_rtn(r, bits, g), h) + 1e-12

    def test_usually_strictly_better_with_correlated_inputs(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal((400, 4))
        x = base @ rng.standard_normal((4, 32)) + 0.1 * rng.standard_normal((400, 32))
        h = estimate_hessian(x, 0.01)
        r = rng.standard_normal((16, 32))
        assert _loss(r, quantize_gptq(r, h, 3, 32), h) < 0.9 * _loss(r, quantize_rtn(r, 3, 32), h)

    def test_singular_hessian(self):
        h = HessianProxy(np.zeros((3, 3)), 0.0, 0)
        with pytest.raises(NumericError, match="damping"):
            quantize_gptq(np.ones((1, 3)), h, 2, 3)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            quantize_gptq(np.ones((1, 3)), identity_hessian(4), 2, 3)


class TestVq:
    def test_exact_support(self):
        rng = np.random.default_rng(0)
        support = np.array([[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5], [1.0, 1.0]])
        r = support[rng.integers(0, 4, 32)].reshape(4, 16)
        q = quantize_vq(r, bits=2, sub_dim=2, seed=0)
        np.testing.assert_array_equal(dequantize(q), r)
        assert q.codebook.shape == (4, 2) and q.mode == "vector"

    def test_zero_residual(self):
        q = quantize_vq(np.zeros((4, 8)), bits=2, sub_dim=2)
        np.testing.assert_array_equal(dequantize(q), 0.0)

    def test_padding(self):
        r = np.random.default_rng(1).standard_normal((6, 7))
        q = quantize_vq(r, bits=3, sub_dim=2, seed=1)
        assert q.code_count == 6 * 4
        assert dequantize(q).shape == (6, 7)

    def test_codebook_too_large(self):
        with pytest.raises(ParameterError):
            quantize_vq(np.zeros((1, 4)), bits=3, sub_dim=2)

    def test_scalar_kmeans_beats_rtn_on_heavy_tails(self):
        wins = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            r = rng.standard_t(2, size=(1, 64))  # one group: same 8 levels for both
            vq = np.linalg.norm(dequantize(quantize_vq(r, bits=3, sub_dim=1, seed=seed)) - r)
            rtn = np.linalg.norm(dequantize(quantize_rtn(r, 3, 64)) - r)
            wins += vq <= rtn
        assert wins >= 40

    def test_deterministic(self):
        r = np.random.default_rng(2).standard_normal((5, 10))
        a, b = quantize_vq(r, bits=3, seed=4), quantize_vq(r, bits=3, seed=4)
        np.testing.assert_array_equal(a.packed, b.packed)
        np.testing.assert_array_equal(a.codebook, b.codebook)


class TestDequantize:
    def test_zero_matrix(self):
        np.testing.assert_array_equal(dequantize(quantize_rtn(np.zeros((3, 5)), 2, 2)), 0.0)

    def test_codes_roundtrip(self):
        r = np.random.default_rng(3).standard_normal((7, 9))
        q = quantize_rtn(r, 3, 4)
        again = pack_codes(q.codes(), 3)
        np.testing.assert_array_equal(again, q.packed)

    def test_corrupt_trailing_bits(self):
        q = quantize_rtn(np.random.default_rng(4).standard_normal((1, 3)), 3, 3)
        packed = q.packed.copy()
        packed[-1] |= 0x80
        bad = QuantizedExpert(q.shape, q.bits, q.group_size, q.mode, packed, q.scales, q.zeros)
        with pytest.raises(FormatError):
            dequantize(bad)

    def test_dispatch(self):
        r = np.random.default_rng(5).standard_normal((3, 8))
        assert quantize(r, "rtn", 4, 4).method == "rtn"
        assert quantize(r, "gptq", 4, 4, identity_hessian(8)).method == "gptq"
        assert quantize(r, "vq", 2, 4, sub_dim=2).method == "vq"
        with pytest.raises(ParameterError):
            quantize(r, "gptq", 4, 4)
        with pytest.raises(ParameterError):
            quantize(r, "nope", 4, 4)
