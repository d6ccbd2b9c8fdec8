import numpy as np
import pytest
from scipy.stats import norm

from peft_forge import quant
from peft_forge.errors import ConfigError, IntegrityError, QuantizationError


def build_nf4_from_quantiles():
    """Independent reconstruction of the codebook from normal quantiles.

    Evenly spaced probability grid offset by (1/32 + 1/30)/2 from 1.0; the
    positive side contributes 8 levels (9-point grid minus the 0.5 endpoint),
    the negative side 7, plus exact zero; normalized by the largest magnitude.
    """
    offset = 1.0 - 0.5 * (1 / 32 + 1 / 30)
    positive = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
    negative = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
    levels = np.sort(np.concatenate([negative, [0.0], positive]))
    return levels / np.abs(levels).max()


class TestCodebook:
    def test_matches_quantile_construction(self):
        oracle = build_nf4_from_quantiles()
        assert np.abs(quant.nf4_codebook() - oracle).max() < 1e-6

    def test_endpoints_and_zero(self):
        levels = quant.nf4_codebook()
        assert levels[0] == -1.0
        assert levels[-1] == 1.0
        assert levels[7] == 0.0
        assert 0.0 in levels

    def test_sixteen_strictly_increasing(self):
        levels = quant.nf4_codebook()
        assert len(levels) == 16
        assert (np.diff(levels) > 0).all()


def nearest_level_bruteforce(x_norm):
    """Reference nearest-level search: scan all 16 levels, ties to lower index."""
    best, best_dist = 0, abs(x_norm - quant.NF4_LEVELS[0])
    for i in range(1, 16):
        d = abs(x_norm - quant.NF4_LEVELS[i])
        if d < best_dist:
            best, best_dist = i, d
    return best


class TestNf4RoundTrip:
    def test_zero_block(self):
        q = quant.quantize_nf4(np.zeros(4), block_size=4)
        assert q.scales[0] == 0.0
        assert (q.codes == quant.NF4_ZERO_CODE).all()
        assert (dq := quant.dequantize_nf4(q)).shape == (4,)
        assert (dq == 0).all()

    def test_two_element_block(self):
        q = quant.quantize_nf4(np.array([2.0, -1.0]), block_size=2)
        assert q.scales[0] == 2.0
        assert q.codes[0] == 15  # 1.0 level
        assert q.codes[1] == nearest_level_bruteforce(-0.5)

    def test_codes_match_bruteforce(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=256)
        q = quant.quantize_nf4(x, block_size=64)
        scale = np.repeat(q.scales.astype(np.float64), 64)
        expected = [nearest_level_bruteforce(v / s) for v, s in zip(x, scale)]
        assert list(q.codes) == expected

    def test_roundtrip_error_bound(self):
        # |x - deq(quant(x))| <= scale * (largest adjacent gap)/2, per element
        max_gap = np.diff(quant.NF4_LEVELS).max()
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.normal(size=128)
            q = quant.quantize_nf4(x, block_size=64)
            err = np.abs(x - quant.dequantize_nf4(q))
            bound = np.repeat(q.scales.astype(np.float64), 64) * max_gap / 2
            assert (err <= bound + 1e-12).all()

    def test_requantize_idempotent_fp32(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 40))
        q1 = quant.quantize_nf4(x, block_size=64)
        q2 = quant.quantize_nf4(quant.dequantize_nf4(q1), block_size=64)
        assert (q1.codes == q2.codes).all()
        assert (q1.scales == q2.scales).all()

    def test_requantize_double_quantized_keeps_codes_and_absmax(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=2048)
        q1 = quant.quantize_nf4(x, scale_encoding=quant.SCALE_DQ)
        deq = quant.dequantize_nf4(q1)
        q2 = quant.quantize_nf4(deq, scale_encoding=quant.SCALE_DQ)
        assert (q1.codes == q2.codes).all()
        # the raw absmax of the dequantized blocks equals the stored scales
        raw = np.abs(deq.reshape(-1, 64)).max(axis=1).astype(np.float32)
        assert (raw == q1.scales).all()

    def test_absmax_element_exact(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 64))
        q = quant.quantize_nf4(x.reshape(-1), block_size=64)
        deq = quant.dequantize_nf4(q).reshape(4, 64)
        for b in range(4):
            idx = np.abs(x[b]).argmax()
            assert abs(deq[b, idx]) == q.scales[b]

    def test_rejects_non_finite(self):
        with pytest.raises(QuantizationError):
            quant.quantize_nf4(np.array([1.0, np.nan]))
        with pytest.raises(QuantizationError):
            quant.quantize_nf4(np.array([np.inf]))

    def test_rejects_empty(self):
        with pytest.raises(QuantizationError):
            quant.quantize_nf4(np.zeros(0))

    def test_corrupted_code_detected(self):
        q = quant.quantize_nf4(np.ones(4), block_size=4)
        q.codes = q.codes.astype(np.uint8).copy()
        q.codes[0] = 16
        with pytest.raises(IntegrityError):
            quant.dequantize_nf4(q)

    def test_tie_breaks_to_lower_index(self):
        mid = float(quant._NF4_MIDPOINTS[9])
        q = quant.quantize_nf4(np.array([1.0, mid]), block_size=2)
        assert q.codes[1] == 9


class TestQ8:
    def test_zero_input(self):
        blocks = quant.quantize_q8(np.zeros(2))
        assert blocks[0].absmax == 0.0
        assert (blocks[0].codes == 0).all()

    def test_round_half_away_from_zero(self):
        blocks = quant.quantize_q8(np.array([1.0, -0.5]))
        assert blocks[0].absmax == 1.0
        assert list(blocks[0].codes) == [127, -64]

    def test_endpoint_dequant(self):
        out = quant.dequantize_q8([quant.Q8Block(np.array([127]), 2.0)], (1,))
        assert out[0] == 2.0
        out = quant.dequantize_q8([quant.Q8Block(np.array([0]), 5.0)], (1,))
        assert out[0] == 0.0

    def test_roundtrip_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=300)
            blocks = quant.quantize_q8(x, block_size=256)
            back = quant.dequantize_q8(blocks, (300,))
            absmax = np.concatenate(
                [np.full(b.codes.size, b.absmax) for b in blocks]
            )
            assert (np.abs(x - back) <= absmax / 254 + 1e-12).all()

    def test_code_stable_requantization(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=512)
        b1 = quant.quantize_q8(x)
        b2 = quant.quantize_q8(quant.dequantize_q8(b1, (512,)))
        for a, b in zip(b1, b2):
            assert (a.codes == b.codes).all()
            assert a.absmax == b.absmax

    def test_shape_mismatch(self):
        with pytest.raises(IntegrityError):
            quant.dequantize_q8(quant.quantize_q8(np.ones(4)), (5,))

    def test_rejects_non_finite(self):
        with pytest.raises(QuantizationError):
            quant.quantize_q8(np.array([np.nan]))

    def test_bad_block_size(self):
        with pytest.raises(ConfigError):
            quant.quantize_q8(np.ones(4), block_size=0)


class TestDoubleQuantization:
    def test_constant_scales_exact(self):
        scales = np.full(10, 0.75)
        store = quant.double_quantize_scales(scales, group_size=256)
        assert store.means[0] == np.float32(0.75)
        assert (store.blocks[0].codes == 0).all()
        back = quant.dequantize_scales(store)
        assert (back == np.float32(0.75)).all()

    def test_roundtrip_bound(self):
        rng = np.random.default_rng(9)
        scales = np.abs(rng.normal(size=700))
        store = quant.double_quantize_scales(scales, group_size=256)
        back = quant.dequantize_scales(store).astype(np.float64)
        for g in range(3):
            lo, hi = g * 256, min((g + 1) * 256, 700)
            group = scales[lo:hi]
            dev = np.abs(group - np.float32(group.mean())).max()
            # mean is stored in fp32, so allow its rounding on top of the
            # residual quantization half-step
            tol = dev / 254 + abs(np.float32(group.mean()) - group.mean()) + 1e-7
            assert np.abs(back[lo:hi] - group).max() <= tol

    def test_bytes_per_weight_under_0p6(self):
        bpw = quant.nf4_bytes_per_weight(64, quant.SCALE_DQ, 256)
        assert bpw == 0.5 + 1 / 64 + 8 / (64 * 256)
        assert bpw < 0.6


class TestErrorStats:
    def test_exact_multiples_zero_error(self):
        x = quant.NF4_LEVELS * 2.0  # one block, scale 2, all exact levels
        q = quant.quantize_nf4(x, block_size=16)
        stats = quant.quant_error_stats(x, q)
        assert stats == {"max_abs_err": 0.0, "mean_abs_err": 0.0, "mse": 0.0}

    def test_zero_tensor(self):
        x = np.zeros(8)
        stats = quant.quant_error_stats(x, quant.quantize_nf4(x, block_size=8))
        assert stats["max_abs_err"] == 0.0 and stats["mse"] == 0.0

    def test_gaussian_sample(self):
        x = np.random.default_rng(1).normal(size=512)
        stats = quant.quant_error_stats(x, quant.quantize_nf4(x))
        assert 0 < stats["mean_abs_err"] < stats["max_abs_err"]
        assert np.isfinite(stats["mse"])

    def test_shape_mismatch(self):
        q = quant.quantize_nf4(np.ones(4), block_size=4)
        with pytest.raises(IntegrityError):
            quant.quant_error_stats(np.ones(5), q)


class TestWireFormat:
    @pytest.mark.parametrize("encoding", [quant.SCALE_FP32, quant.SCALE_DQ])
    def test_roundtrip(self, encoding):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(5, 77))
        q = quant.quantize_nf4(x, scale_encoding=encoding)
        back = quant.deserialize_quantized(quant.serialize_quantized(q))
        assert back.shape == q.shape
        assert back.block_size == q.block_size
        assert back.scale_encoding == q.scale_encoding
        assert (back.codes == q.codes).all()
        assert (back.scales == q.scales).all()
        assert (quant.dequantize_nf4(back) == quant.dequantize_nf4(q)).all()

    def test_serialize_stable(self):
        x = np.random.default_rng(21).normal(size=130)
        q = quant.quantize_nf4(x, scale_encoding=quant.SCALE_DQ)
        blob = quant.serialize_quantized(q)
        again = quant.serialize_quantized(quant.deserialize_quantized(blob))
        assert blob == again

    def test_low_nibble_is_even_index(self):
        q = quant.quantize_nf4(np.array([1.0, -1.0, 0.5]), block_size=4)
        packed = quant.pack_codes(q.codes)
        assert packed[0] & 0x0F == q.codes[0]
        assert packed[0] >> 4 == q.codes[1]

    def test_truncated_buffer(self):
        q = quant.quantize_nf4(np.ones(64))
        blob = quant.serialize_quantized(q)
        with pytest.raises(IntegrityError):
            quant.deserialize_quantized(blob[: len(blob) // 2])
