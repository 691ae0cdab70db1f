import dataclasses
import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glmlab import corruption as cr
from glmlab import model as gm
from glmlab import tensorcore as tc
from glmlab.corruption import CorruptionConfig, SpanSet
from glmlab.model import GLMConfig
from glmlab.tensorcore import Tensor

from _oracles import (ManualSample, central_difference, relative_error, rotation_matrix,
                      teacher_forced_loss)

TINY = GLMConfig(num_layers=2, hidden=16, num_heads=2, vocab=11)


def tiny_params(cfg=TINY, seed=0, std=None):
    params = gm.init_parameters(cfg, np.random.default_rng(seed))
    if std is not None:
        # larger weights than the default init, so gradients are not vanishingly small
        rng = np.random.default_rng(seed + 100)
        for name, t in params:
            t.data[...] = rng.normal(0, std, size=t.shape)
    return params


def span_sample(n=9, spans=((1, 2), (5, 1)), perm=(1, 0), vocab=11, seed=0):
    toks = np.random.default_rng(seed).integers(cr.NUM_RESERVED, vocab, size=n)
    return cr.corrupt_mask(toks, SpanSet(spans, perm))


class TestConfig:
    def test_constants(self):
        assert gm.deepnorm_alpha(70) == pytest.approx(math.sqrt(140), abs=1e-12)
        assert abs(gm.deepnorm_alpha(70) - 11.832160) < 1e-6
        assert abs(gm.deepnorm_init_scale(70) - 0.084515) < 1e-6

    def test_default_ffn(self):
        assert GLMConfig(hidden=12, num_heads=2).ffn_hidden == 32
        assert GLMConfig(hidden=12288, num_heads=96).ffn_hidden == 32768
        cfg = GLMConfig(hidden=64, num_heads=4)
        assert cfg.ffn_hidden % 8 == 0 and abs(cfg.ffn_hidden - 64 * 8 / 3) <= 4

    @pytest.mark.parametrize("kw", [dict(hidden=10, num_heads=4), dict(hidden=12, num_heads=4),
                                    dict(num_layers=0), dict(attention="sideways"),
                                    dict(ffn="swish"), dict(dropout=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GLMConfig(**kw)

    def test_manifest_round_trip(self):
        cfg = GLMConfig(num_layers=3, hidden=24, num_heads=3, vocab=40, dropout=0.1,
                        attention=gm.UNIDIRECTIONAL)
        assert GLMConfig.from_manifest(cfg.to_manifest()) == cfg

    def test_manifest_unknown_key(self):
        with pytest.raises(ValueError):
            GLMConfig.from_manifest("colour=blue\n")


class TestInit:
    def test_biases_zero_gains_one(self):
        p = tiny_params()
        for name, t in p:
            if name.endswith(".bias"):
                assert not t.data.any()
            if name.endswith(".gain"):
                assert np.all(t.data == 1.0)

    def test_scaled_std(self):
        cfg = GLMConfig(num_layers=8, hidden=512, num_heads=8, vocab=16, ffn_hidden=512)
        p = gm.init_parameters(cfg, np.random.default_rng(0))
        target = math.sqrt(2 / 1024) * (2 * 8) ** -0.5
        for name in ("layers.0.out.weight", "layers.0.ffn.w1.weight", "layers.0.ffn.v.weight",
                     "layers.0.ffn.w2.weight"):
            assert p[name].data.std() == pytest.approx(target, rel=0.05)
        v = p["layers.0.qkv.weight"].data[:, 1024:]
        assert v.std() == pytest.approx(target, rel=0.05)
        qk = p["layers.0.qkv.weight"].data[:, :1024]
        assert qk.std() == pytest.approx(0.0052, rel=0.05)

    def test_deterministic(self):
        a, b = tiny_params(seed=4), tiny_params(seed=4)
        for (n, x), (_, y) in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_save_load(self, tmp_path):
        p = tiny_params(seed=2)
        p.save(tmp_path / "ck")
        q = gm.ModelParams.load(tmp_path / "ck")
        assert q.cfg == p.cfg and q.names() == p.names()
        for (n, x), (_, y) in zip(p, q):
            assert x.data.tobytes() == y.data.tobytes()


class TestDeepNorm:
    def test_zero_sublayer_constant_input(self):
        x = Tensor(np.full(4, 3.0))
        b = Tensor(np.array([0.1, 0.2, 0.3, 0.4]))
        out = gm.deepnorm_residual(x, Tensor(np.zeros(4)), 11.8, Tensor(np.ones(4)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_alpha_one_is_post_ln(self):
        rng = np.random.default_rng(0)
        x, f = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
        out = gm.deepnorm_residual(Tensor(x), Tensor(f), 1.0, g, b)
        ref = tc.layer_norm(Tensor(x + f), g, b)
        np.testing.assert_array_equal(out.data, ref.data)

    @given(st.integers(0, 2 ** 31), st.floats(-100, 100))
    def test_shift_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        x, f = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
        g, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
        a = gm.deepnorm_residual(Tensor(x), Tensor(f), 3.0, g, b).data
        shifted = gm.deepnorm_residual(Tensor(x), Tensor(f + c), 3.0, g, b).data
        np.testing.assert_allclose(a, shifted, atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(tc.ShapeError):
            gm.deepnorm_residual(Tensor(np.ones(3)), Tensor(np.ones(4)), 1.0,
                                 Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestRope:
    def test_position_zero_is_identity(self):
        x = np.random.default_rng(0).normal(size=8)
        np.testing.assert_array_equal(gm.rope_rotate(x, 0).data, x)

    def test_two_dim_example(self):
        q = gm.rope_rotate(np.array([1.0, 0.0]), 0).data
        k = gm.rope_rotate(np.array([1.0, 0.0]), 1).data
        assert q @ k == pytest.approx(0.540302, abs=1e-6)
        assert q @ k == pytest.approx(math.cos(1.0), abs=1e-15)

    def test_odd_dimension(self):
        with pytest.raises(tc.ShapeError):
            gm.rope_rotate(np.ones(3), 1)

    @given(st.integers(0, 2 ** 31), st.integers(1, 32), st.integers(0, 500))
    def test_matches_rotation_matrix(self, seed, half, m):
        x = np.random.default_rng(seed).normal(size=2 * half)
        np.testing.assert_allclose(gm.rope_rotate(x, m).data,
                                   rotation_matrix(2 * half, m) @ x, atol=1e-12)

    @given(st.integers(0, 2 ** 31), st.integers(1, 32), st.integers(0, 300), st.integers(0, 300),
           st.integers(-50, 50))
    def test_relative(self, seed, half, m, n, shift):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=2 * half), rng.normal(size=2 * half)
        a = gm.rope_rotate(q, m).data @ gm.rope_rotate(k, n).data
        b = gm.rope_rotate(q, m + shift + 50).data @ gm.rope_rotate(k, n + shift + 50).data
        assert abs(a - b) < 1e-9

    @given(st.integers(0, 2 ** 31), st.integers(1, 32), st.integers(0, 10 ** 4))
    def test_norm_preserved(self, seed, half, m):
        x = np.random.default_rng(seed).normal(size=2 * half)
        assert abs(np.linalg.norm(gm.rope_rotate(x, m).data) - np.linalg.norm(x)) < 1e-12


class TestAttention:
    def test_single_token(self):
        v = Tensor([[0.3, -1.2, 2.0, 0.5]])
        out = gm.attention(Tensor([[1.0, 0, 0, 0]]), Tensor([[0.0, 1, 0, 0]]), v,
                           np.ones((1, 1), bool), positions=[0])
        np.testing.assert_array_equal(out.data, v.data)

    def test_uniform_weights_over_visible_set(self):
        q = Tensor(np.ones((4, 4)))
        v = Tensor(np.arange(16.0).reshape(4, 4))
        mask = np.array([[1, 1, 0, 1]] * 4, bool)
        out = gm.attention(q, q, v, mask)
        np.testing.assert_allclose(out.data[0], v.data[[0, 1, 3]].mean(axis=0), atol=1e-12)

    def test_all_masked_row(self):
        with pytest.raises(tc.SoftmaxPolicyError):
            gm.attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))),
                         np.array([[1, 0], [0, 0]], bool))

    def test_later_spans_do_not_leak(self):
        s = span_sample(n=10, spans=((1, 2), (5, 2)), perm=(0, 1))
        rng = np.random.default_rng(1)
        L = len(s)
        q, k, v = (rng.normal(size=(L, 4)) for _ in range(3))
        base = gm.attention(Tensor(q), Tensor(k), Tensor(v), s.attention_mask,
                            positions=s.positions).data
        later = np.flatnonzero(s.span_map[:, 0] == 1)
        v2, k2 = v.copy(), k.copy()
        v2[later] += 5.0
        k2[later] -= 3.0
        out = gm.attention(Tensor(q), Tensor(k2), Tensor(v2), s.attention_mask,
                           positions=s.positions).data
        span0 = np.flatnonzero(s.span_map[:, 0] == 0)
        np.testing.assert_array_equal(out[span0], base[span0])
        np.testing.assert_array_equal(out[:s.context_length], base[:s.context_length])


class TestGeglu:
    def test_zero_input(self):
        rng = np.random.default_rng(0)
        w = [Tensor(rng.normal(size=s)) for s in ((4, 6), (4, 6), (6, 4))]
        assert not gm.geglu(Tensor(np.zeros((2, 4))), *w).data.any()

    def test_saturation(self):
        rng = np.random.default_rng(0)
        w1 = rng.uniform(0.5, 1.0, size=(3, 3))
        x = np.full((1, 3), 20.0)
        out = gm.geglu(Tensor(x), Tensor(w1), Tensor(np.ones((3, 3))), Tensor(np.eye(3))).data
        np.testing.assert_allclose(out, (x @ w1) * (x @ np.ones((3, 3))), rtol=1e-12)

    def test_parameter_parity_example(self):
        assert 12 * 48 * 2 == 1152 == 12 * 32 + 12 * 32 + 32 * 12
        assert gm.ffn_parameter_count(12, 48, gated=False) == 1152
        assert gm.ffn_parameter_count(12, 32, gated=True) == 1152

    @given(st.integers(1, 200))
    def test_parity_from_initialised_weights(self, sixth):
        d = 6 * sixth
        gated = GLMConfig(num_layers=1, hidden=d, num_heads=1, vocab=8)
        vanilla = dataclasses.replace(gated, ffn="vanilla", ffn_hidden=4 * d)

        def ffn_weights(cfg):
            shapes = {"ffn.w1.weight": (d, cfg.ffn_hidden), "ffn.w2.weight": (cfg.ffn_hidden, d)}
            if cfg.ffn == "geglu":
                shapes["ffn.v.weight"] = (d, cfg.ffn_hidden)
            return sum(a * b for a, b in shapes.values())

        assert ffn_weights(gated) == ffn_weights(vanilla) == 8 * d * d


class TestForward:
    def test_shape(self):
        s = span_sample()
        assert gm.forward(tiny_params(), s).shape == (len(s), TINY.vocab)

    def test_vocab_overflow(self):
        s = span_sample(vocab=20)
        s.input_tokens[0] = 15
        with pytest.raises(ValueError):
            gm.forward(tiny_params(), s)

    def test_dropout_off_is_deterministic(self):
        p, s = tiny_params(), span_sample()
        np.testing.assert_array_equal(gm.forward(p, s).data, gm.forward(p, s).data)

    def test_dropout_uses_rng(self):
        cfg = dataclasses.replace(TINY, dropout=0.3)
        p, s = tiny_params(cfg), span_sample()
        a = gm.forward(p, s, rng=np.random.default_rng(1)).data
        b = gm.forward(p, s, rng=np.random.default_rng(1)).data
        c = gm.forward(p, s, rng=np.random.default_rng(2)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unidirectional_equals_causal_override(self):
        s = cr.corrupt_gmask(np.arange(6, 11), CorruptionConfig(), np.random.default_rng(0))
        uni = dataclasses.replace(TINY, attention=gm.UNIDIRECTIONAL)
        p = tiny_params(uni, seed=3)
        p_bi = gm.ModelParams(TINY, p.tensors)
        a = gm.forward(p, s).data
        b = gm.forward(p_bi, s, mask_override=gm.causal_mask(len(s))).data
        np.testing.assert_array_equal(a, b)

    def test_gmask_causal_safety(self):
        s = cr._build(np.arange(6, 11).tolist() + [7, 8, 9], SpanSet(((4, 4),), (0,)),
                      cr.GMASK_KIND, cr.GMASK)
        p = tiny_params(seed=5, std=0.3)
        base = gm.forward(p, s).data
        for t in range(s.context_length + 1, len(s)):
            s2 = dataclasses.replace(s, input_tokens=s.input_tokens.copy())
            s2.input_tokens[t] = 10 if s.input_tokens[t] != 10 else 9
            out = gm.forward(p, s2).data
            np.testing.assert_allclose(out[:t], base[:t], atol=1e-12, rtol=0)
            assert not np.allclose(out[t], base[t])

    def test_half_policy_runs(self):
        p, s = tiny_params(), span_sample()
        wide = gm.forward(p, s).data
        half = gm.forward(p, s, policy=tc.HALF).data
        assert np.all(np.isfinite(half))
        np.testing.assert_allclose(half, wide, atol=5e-2)


class TestLoss:
    def test_uniform_logits(self):
        s = cr.corrupt_mask([6, 7, 8, 9, 10, 11, 12, 13], SpanSet(((2, 2),), (0,)))
        logits = Tensor(np.zeros((len(s), 2)))
        s.targets[s.target_mask] = [0, 1, 1]
        assert gm.loss_blank_infilling(logits, s).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_empty_target_set(self):
        s = cr.corrupt_mask(np.arange(6, 11), SpanSet((), ()))
        with pytest.warns(gm.EmptyTargetWarning):
            loss = gm.loss_blank_infilling(Tensor(np.zeros((5, 11))), s)
        assert loss.item() == 0.0

    def test_context_rows_carry_no_loss(self):
        s = span_sample()
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(len(s), 11))
        a = gm.loss_blank_infilling(Tensor(logits), s).item()
        logits[:s.context_length] = rng.normal(size=(s.context_length, 11)) * 100
        assert gm.loss_blank_infilling(Tensor(logits), s).item() == a

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_teacher_forced_factorisation(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 14))
        s = cr.corrupt_mask(rng.integers(cr.NUM_RESERVED, 11, size=n),
                            cr.sample_spans(n, CorruptionConfig(mask_prob=0.3), rng))
        p = tiny_params(seed=seed % 100, std=0.2)
        full = gm.loss_blank_infilling(gm.forward(p, s), s).item()
        assert abs(full - teacher_forced_loss(gm.forward, p, s)) < 1e-10

    def test_probability_mass_sums_to_one(self):
        cfg = GLMConfig(num_layers=1, hidden=8, num_heads=2, vocab=5)
        p = tiny_params(cfg, seed=1, std=0.5)
        context = [3, 1, 4, 1, 2, 0]
        spans = SpanSet(((1, 1), (4, 1)), (1, 0))
        total = 0.0
        for fill in itertools.product(range(5), repeat=2):
            toks = list(context)
            toks[1], toks[4] = fill
            s = cr.corrupt_mask(toks, spans)
            logits = gm.forward(p, s)
            # both spans have length one, so each part-B block is [start, body]
            # and the end slot is the second row of each block
            ends = [s.context_length + 1, s.context_length + 3]
            for end_fill in itertools.product(range(5), repeat=len(ends)):
                s.targets[ends] = end_fill
                n_targets = int(s.target_mask.sum())
                total += math.exp(-n_targets * gm.loss_blank_infilling(logits, s).item())
        assert abs(total - 1.0) < 1e-6


class TestEgs:
    def test_alpha_range(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                gm.egs_apply(Tensor(np.ones(2), requires_grad=True), bad)

    def test_forward_identity_and_scaled_grad(self):
        p, s = tiny_params(std=0.3), span_sample()
        base = gm.forward(p, s)
        tc.backward(gm.loss_blank_infilling(base, s))
        g0 = p.grads()
        p.zero_grad()
        shrunk = gm.forward(p, s, egs_alpha=0.1)
        np.testing.assert_array_equal(shrunk.data, base.data)
        tc.backward(gm.loss_blank_infilling(shrunk, s))
        g1 = p.grads()
        np.testing.assert_array_equal(g1["embedding"], 0.1 * g0["embedding"])
        for name in g0:
            if name != "embedding":
                np.testing.assert_array_equal(g1[name], g0[name])


def test_full_model_gradient_sample():
    p = tiny_params(std=0.3)
    s = span_sample()
    tc.backward(gm.loss_blank_infilling(gm.forward(p, s), s))
    rng = np.random.default_rng(0)
    for name in p.names():
        arr = p[name].data
        for _ in range(3):
            idx = tuple(int(rng.integers(k)) for k in arr.shape)
            num = central_difference(lambda: gm.loss_blank_infilling(gm.forward(p, s), s).item(),
                                     arr, idx)
            assert relative_error(p[name].grad[idx], num, floor=1e-7) < 1e-4, name
