import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glmlab import corruption as cr
from glmlab import model as gm
from glmlab import quant as q
from glmlab.model import GLMConfig


def gaussian(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def heavy_tailed(shape, seed, df=3):
    # Student t rescaled to unit variance
    return np.random.default_rng(seed).standard_t(df, size=shape) / np.sqrt(df / (df - 2))


def group_bounds(qm):
    """Per-element half-scale, broadcast back to the matrix shape."""
    half = qm.scales / 2
    if qm.group_axis == q.ROW:
        return np.broadcast_to(half[:, None], qm.shape)
    if qm.group_axis == q.COLUMN:
        return np.broadcast_to(half[None, :], qm.shape)
    return np.full(qm.shape, half[0])


class TestPacking:
    def test_empty(self):
        assert q.pack_int4([]) == b""
        assert q.unpack_int4(b"", 0).size == 0

    def test_nibble_layout(self):
        assert q.pack_int4([1, 2]) == bytes([0x21])
        assert q.pack_int4([-1, 7, 3]) == bytes([0x7F, 0x03])

    def test_every_byte_pair(self):
        for a, b in itertools.product(range(-7, 8), repeat=2):
            payload = q.pack_int4([a, b])
            assert payload[0] == ((a & 0xF) | ((b & 0xF) << 4))
            assert q.unpack_int4(payload, 2).tolist() == [a, b]

    @pytest.mark.parametrize("n", range(17))
    def test_lengths(self, n):
        codes = np.random.default_rng(n).integers(-7, 8, size=n)
        payload = q.pack_int4(codes)
        assert len(payload) == (n + 1) // 2
        np.testing.assert_array_equal(q.unpack_int4(payload, n), codes)

    def test_short_vectors_exhaustive(self):
        for n in range(1, 4):
            for codes in itertools.product(range(-7, 8), repeat=n):
                assert tuple(q.unpack_int4(q.pack_int4(codes), n)) == codes

    @given(st.lists(st.integers(-7, 7), max_size=16))
    def test_round_trip(self, codes):
        assert q.unpack_int4(q.pack_int4(codes), len(codes)).tolist() == codes

    @pytest.mark.parametrize("bad", [[8], [-8], [0, 100]])
    def test_out_of_range(self, bad):
        with pytest.raises(q.PackingError):
            q.pack_int4(bad)

    def test_length_mismatch(self):
        with pytest.raises(q.PackingError):
            q.unpack_int4(b"\x00\x00", 5)


class TestAbsmax:
    def test_hand_example(self):
        qm = q.quantize_absmax([[1.0, -2.0, 0.5]], 8)
        assert qm.scales[0] == 2 / 127
        assert qm.codes().tolist() == [[64, -127, 32]]
        np.testing.assert_allclose(q.dequantize(qm), [[1.007874, -2.0, 0.503937]], atol=1e-6)

    def test_round_half_even(self):
        # 0.5 and 1.5 steps land exactly on ties
        qm = q.quantize_absmax([[7.0, 0.5, 1.5, 2.5]], 4)
        assert qm.codes().tolist() == [[7, 0, 2, 2]]

    def test_zero_matrix(self):
        qm = q.quantize_absmax(np.zeros((3, 4)), 4)
        assert not qm.scales.any() and qm.degenerate_groups == [0, 1, 2]
        np.testing.assert_array_equal(q.dequantize(qm), np.zeros((3, 4)))

    def test_grid_is_fixed_point(self):
        s = 0.25
        w = s * np.array([[7, -3, 0, 1], [-7, 2, 5, -6]], dtype=float)
        np.testing.assert_array_equal(q.dequantize(q.quantize_absmax(w, 4)), w)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            q.quantize_absmax([[1.0, np.nan]])

    @given(st.integers(0, 2 ** 31), st.sampled_from([4, 8]),
           st.sampled_from([q.ROW, q.COLUMN, q.WHOLE]), st.integers(1, 9), st.integers(1, 9))
    def test_round_trip_bound(self, seed, bits, axis, r, c):
        w = gaussian((r, c), seed) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
        qm = q.quantize_absmax(w, bits, axis)
        err = np.abs(q.dequantize(qm) - w)
        assert np.all(err <= group_bounds(qm) + 1e-12)
        assert np.abs(qm.codes()).max() <= q.qmax(bits)
        assert qm.scales.size == {q.ROW: r, q.COLUMN: c, q.WHOLE: 1}[axis]

    @given(st.integers(0, 2 ** 31), st.sampled_from([4, 8]), st.sampled_from([q.ROW, q.COLUMN]))
    def test_idempotent(self, seed, bits, axis):
        once = q.quantize_absmax(gaussian((5, 6), seed), bits, axis)
        twice = q.quantize_absmax(q.dequantize(once), bits, axis)
        np.testing.assert_array_equal(twice.codes(), once.codes())

    def test_scale_grows_with_spread(self):
        w = gaussian((4, 16), 0)
        scales = [q.quantize_absmax(w * k, 4).scales for k in (0.5, 1.0, 2.0, 4.0)]
        for a, b in zip(scales, scales[1:]):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


class TestZeropoint:
    def test_hand_example(self):
        qm = q.quantize_zeropoint([[0.0, 0.5, 1.0]], 8)
        assert qm.scales[0] == 1 / 254
        assert qm.zero_points[0] == 127
        assert qm.codes().tolist() == [[-127, 0, 127]]
        np.testing.assert_allclose(q.dequantize(qm), [[0.0, 0.5, 1.0]], atol=1e-15)

    def test_constant_row(self):
        qm = q.quantize_zeropoint([[2.5, 2.5, 2.5], [0.0, 1.0, 2.0]], 4)
        assert qm.degenerate_groups == [0]
        np.testing.assert_array_equal(q.dequantize(qm)[0], [2.5, 2.5, 2.5])

    @given(st.integers(0, 2 ** 31), st.sampled_from([4, 8]))
    def test_symmetric_matches_absmax(self, seed, bits):
        half = np.abs(gaussian((3, 5), seed))
        w = np.concatenate([half, -half], axis=1)
        za = q.dequantize(q.quantize_zeropoint(w, bits))
        ab = q.quantize_absmax(w, bits)
        assert np.all(np.abs(za - q.dequantize(ab)) < ab.scales[:, None])

    @given(st.integers(0, 2 ** 31), st.sampled_from([4, 8]), st.sampled_from([q.ROW, q.COLUMN]))
    def test_bound_and_range(self, seed, bits, axis):
        w = gaussian((4, 7), seed) + 3.0
        qm = q.quantize_zeropoint(w, bits, axis)
        assert np.abs(qm.codes()).max() <= q.qmax(bits)
        assert np.all(qm.scales >= 0)
        err = np.abs(q.dequantize(qm) - w)
        # a clipped extreme can sit up to one full step away when min/s rounds
        assert np.all(err <= 2 * group_bounds(qm) + 1e-12)


class TestErrorOrdering:
    @given(st.integers(0, 2 ** 31), st.sampled_from([q.ABSMAX, q.ZEROPOINT]))
    def test_int4_worse_than_int8(self, seed, scheme):
        w = gaussian((8, 8), seed)
        assert q.quantization_mse(w, 4, scheme) >= q.quantization_mse(w, 8, scheme)

    @given(st.integers(0, 2 ** 31), st.sampled_from([4, 8]))
    def test_row_group_bound_never_looser(self, seed, bits):
        # each row's step is at most the whole-matrix step
        w = gaussian((5, 6), seed)
        rows = q.quantize_absmax(w, bits, q.ROW).scales
        whole = q.quantize_absmax(w, bits, q.WHOLE).scales[0]
        assert np.all(rows <= whole)

    def test_grouping_helps_on_average(self):
        grouped, whole = [], []
        for seed in range(200):
            w = gaussian((6, 6), seed) * np.random.default_rng(seed).uniform(0.1, 3, size=(6, 1))
            grouped.append(q.quantization_mse(w, 4, group_axis=q.ROW))
            whole.append(q.quantization_mse(w, 4, group_axis=q.WHOLE))
        assert np.mean(grouped) < np.mean(whole)

    def test_heavy_tails_cost_more_at_int4(self):
        g = [q.quantization_mse(gaussian((64, 64), s), 4) for s in range(30)]
        h = [q.quantization_mse(heavy_tailed((64, 64), s), 4) for s in range(30)]
        assert np.mean(h) >= np.mean(g)


class TestQuantizeModel:
    cfg = GLMConfig(num_layers=2, hidden=16, num_heads=2, vocab=20)

    def params(self):
        return gm.init_parameters(self.cfg, np.random.default_rng(0))

    def test_only_linear_weights(self):
        p = self.params()
        qmodel = q.quantize_model(p)
        assert set(qmodel.quantized) == {n for n in p.names() if n.startswith("layers.")
                                         and n.endswith(".weight")}
        deq = qmodel.dequantized_params()
        for name in p.names():
            if name not in qmodel.quantized:
                assert deq[name].data.tobytes() == p[name].data.tobytes()

    def test_exclude_everything(self):
        p = self.params()
        qmodel = q.quantize_model(p, q.QuantPolicy(include=lambda n: False))
        for (n, a), (_, b) in zip(p, qmodel.dequantized_params()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_memory_is_quarter_of_fp16(self):
        r = q.quantize_model(self.params(), q.QuantPolicy(bits=4)).memory_report()
        assert r["payload_bytes"] * 4 == r["fp16_bytes"]
        r8 = q.quantize_model(self.params(), q.QuantPolicy(bits=8)).memory_report()
        assert r8["payload_bytes"] * 2 == r8["fp16_bytes"]

    def test_deviation_shrinks_with_bits(self):
        p = self.params()
        s = cr.corrupt_mask(np.arange(6, 18), cr.SpanSet(((2, 3), (8, 2)), (0, 1)))
        base = gm.forward(p, s).data
        dev = {b: np.abs(gm.forward(q.quantize_model(p, q.QuantPolicy(bits=b))
                                    .dequantized_params(), s).data - base).max()
               for b in (4, 8)}
        assert 0 < dev[8] <= dev[4]

    def test_save_and_reload_matrix(self, tmp_path):
        qmodel = q.quantize_model(self.params(), q.QuantPolicy(bits=4, scheme=q.ZEROPOINT))
        qmodel.save(tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert "embedding" in manifest["plain"]
        name = "layers.1.ffn.w2.weight"
        back = q.QuantizedModel.load_matrix(tmp_path, name)
        np.testing.assert_array_equal(q.dequantize(back), q.dequantize(qmodel.quantized[name]))


class TestDiagnostics:
    def test_gaussian_moments(self):
        r = q.weight_distribution_report(np.random.default_rng(0).normal(size=10 ** 6))
        assert abs(r.skewness) < 0.01
        assert abs(r.kurtosis) < 0.05
        assert r.counts.sum() == 10 ** 6

    def test_constant(self):
        r = q.weight_distribution_report(np.full((3, 3), 0.7))
        assert r.variance == 0 and r.outlier_share == 0

    def test_histogram_table(self):
        r = q.weight_distribution_report(np.arange(10.0), bins=5)
        table = r.histogram_table()
        assert [c for _, _, c in table] == [2] * 5
        assert table[0][0] == 0.0 and table[-1][1] == 9.0

    def test_heavy_tail_kurtosis(self):
        assert q.weight_distribution_report(heavy_tailed(10 ** 5, 0)).kurtosis > 1.0

    @given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)))
    def test_counts_sum(self, w):
        assert q.weight_distribution_report(w, bins=7).counts.sum() == w.size

    def test_outlier_scan(self):
        a = np.random.default_rng(0).uniform(-1, 1, size=(20, 10))
        assert q.activation_outlier_scan(a, 6.0) == 0.0
        a[5, [1, 4, 8]] = [100, -100, 100]
        assert q.activation_outlier_scan(a, 6.0) == pytest.approx(0.30)
        assert q.activation_outlier_scan(a, 0.0) == 1.0
