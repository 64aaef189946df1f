import numpy as np
import pytest

import gendet.numcore as nc
from gendet.numcore import DiffArray
from gendet.rl_decoder import (
    DecoderLayerParams,
    decoder_layer,
    init_text_state,
    run_decoder,
)

from gradcheck import fd_check


def make_layer(seed, d=8, hidden=16):
    return DecoderLayerParams.create(np.random.default_rng(seed), d, hidden, dtype=np.float64)


def random_io(seed, n=3, k=3, d=8, patches=5):
    rng = np.random.default_rng(seed)
    return (
        DiffArray(rng.standard_normal((n, d))),
        DiffArray(rng.standard_normal((n, k, d))),
        DiffArray(rng.standard_normal((patches, d))),
    )


class TestInitTextState:
    def test_shared_across_queries(self):
        slots = DiffArray(np.random.default_rng(0).standard_normal((4, 8)), requires_grad=True)
        text = init_text_state(slots, num_queries=5)
        assert text.data.shape == (5, 4, 8)
        for n in range(5):
            np.testing.assert_array_equal(text.data[n], text.data[0])

    def test_slot_embeddings_stay_shared_after_update(self):
        # one optimizer step on a gradient that differs per query must still
        # produce per-query-identical text states (single shared storage)
        slots = DiffArray(np.random.default_rng(1).standard_normal((3, 8)), requires_grad=True)
        named = [("slots", slots)]
        text = init_text_state(slots, num_queries=4)
        weight = np.random.default_rng(2).standard_normal(text.data.shape)
        nc.array_sum(text * weight).backward()
        assert slots.grad is not None and np.abs(slots.grad).sum() > 0
        nc.adamw_step(named, nc.init_optim_state(named), lr=0.05)
        refreshed = init_text_state(slots, num_queries=4)
        for n in range(4):
            np.testing.assert_array_equal(refreshed.data[n], refreshed.data[0])


class TestDecoderLayer:
    def test_output_shapes(self):
        q, t, m = random_io(3)
        q2, t2 = decoder_layer(q, t, m, make_layer(4), heads=2)
        assert q2.data.shape == q.data.shape
        assert t2.data.shape == t.data.shape

    def test_queries_independent_of_text(self):
        q, t, m = random_io(5)
        params = make_layer(6)
        q2a, _ = decoder_layer(q, t, m, params, heads=2)
        bumped = DiffArray(t.data + np.random.default_rng(7).standard_normal(t.data.shape))
        q2b, _ = decoder_layer(q, bumped, m, params, heads=2)
        assert np.array_equal(q2a.data, q2b.data)

    def test_per_query_text_independence(self):
        q, t, m = random_io(8)
        params = make_layer(9)
        _, t2a = decoder_layer(q, t, m, params, heads=2)
        poked = t.data.copy()
        poked[1] += 3.0  # disturb query 1's text only
        _, t2b = decoder_layer(q, DiffArray(poked), m, params, heads=2)
        np.testing.assert_array_equal(t2a.data[0], t2b.data[0])
        np.testing.assert_array_equal(t2a.data[2], t2b.data[2])
        assert not np.array_equal(t2a.data[1], t2b.data[1])

    def test_numeric_case_matches_straight_line_oracle(self):
        # d=2, N=1, K=2, single head: replay the four steps with plain numpy
        d, n, k = 2, 1, 2
        params = DecoderLayerParams.create(np.random.default_rng(10), d, 4, dtype=np.float64)
        rng = np.random.default_rng(11)
        q = rng.standard_normal((n, d))
        t = rng.standard_normal((n, k, d))
        m = rng.standard_normal((3, d))

        def np_attn(p, xq, xkv):
            qq = xq @ p.wq.data + p.bq.data
            kk = xkv @ p.wk.data + p.bk.data
            vv = xkv @ p.wv.data + p.bv.data
            s = qq @ kk.T / np.sqrt(d)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            w = e / e.sum(axis=-1, keepdims=True)
            return (w @ vv) @ p.wo.data + p.bo.data

        def np_ln(p, x):
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-5) * p.gamma.data + p.beta.data

        def np_ffn(p, x):
            return np.maximum(x @ p.w1.data + p.b1.data, 0.0) @ p.w2.data + p.b2.data

        x = np_ln(params.ln_query_self, q + np_attn(params.self_attn, q, q))
        x = np_ln(params.ln_query_cross, x + np_attn(params.cross_attn, x, m))
        refined = np_ln(params.ln_query_ffn, x + np_ffn(params.ffn_r, x))
        joint = np.concatenate([refined[:, None, :], t], axis=1)[0]
        joint = np_ln(params.ln_text_attn, joint + np_attn(params.self_attn, joint, joint))
        joint = np_ln(params.ln_text_ffn, joint + np_ffn(params.ffn_c, joint))
        expected_t = joint[None, 1:, :]

        q2, t2 = decoder_layer(DiffArray(q), DiffArray(t), DiffArray(m), params, heads=1)
        np.testing.assert_allclose(q2.data, refined, atol=1e-10, rtol=0)
        np.testing.assert_allclose(t2.data, expected_t, atol=1e-10, rtol=0)

    def test_shared_self_attention_is_same_storage(self):
        params = make_layer(12)
        # the fusion stage has no attention parameters of its own: the layer
        # exposes exactly one self-attention parameter set
        names = {name for name, _ in nc.named_parameters(params)}
        assert any(name.startswith("self_attn.") for name in names)
        assert not any("fusion" in name or "text_attn.w" in name for name in names)

    def test_ffn_r_and_ffn_c_distinct_storage(self):
        params = make_layer(13)
        assert params.ffn_r.w1 is not params.ffn_c.w1
        assert params.ffn_r.w2 is not params.ffn_c.w2

    def test_fusion_gradient_reaches_shared_attention(self):
        # a loss touching only the text output must push gradient into the
        # (shared) self-attention weights via the fusion stage
        q, t, m = random_io(14)
        params = make_layer(15)
        for _, p in nc.named_parameters(params):
            p.requires_grad = True
        _, t2 = decoder_layer(q, t, m, params, heads=2)
        nc.array_sum(t2 * np.random.default_rng(16).standard_normal(t2.data.shape)).backward()
        assert params.self_attn.wq.grad is not None
        assert np.abs(params.self_attn.wq.grad).sum() > 0

    def test_shape_mismatch_rejected(self):
        q, t, m = random_io(17)
        with pytest.raises(nc.DimensionError):
            decoder_layer(q, DiffArray(t.data[:, :, :4]), m, make_layer(18), heads=2)


class TestRunDecoder:
    def test_single_layer_equals_direct_call(self):
        q, t, m = random_io(19)
        params = make_layer(20)
        q_direct, t_direct = decoder_layer(q, t, m, params, heads=2)
        q_run, t_run = run_decoder(q, t, m, [params], heads=2)
        assert np.array_equal(q_direct.data, q_run.data)
        assert np.array_equal(t_direct.data, t_run.data)

    def test_six_layer_stack_runs(self):
        q, t, m = random_io(21)
        layers = [make_layer(30 + i) for i in range(6)]
        q6, t6 = run_decoder(q, t, m, layers, heads=2)
        assert q6.data.shape == q.data.shape and t6.data.shape == t.data.shape
        assert np.isfinite(q6.data).all() and np.isfinite(t6.data).all()

    def test_zero_layers_rejected(self):
        q, t, m = random_io(22)
        with pytest.raises(nc.ConfigError):
            run_decoder(q, t, m, [], heads=2)

    def test_cross_modal_gradient_flow(self):
        # text output depends on the initial queries ...
        rng = np.random.default_rng(23)
        layers = [make_layer(40 + i) for i in range(2)]
        q = DiffArray(rng.standard_normal((3, 8)), requires_grad=True)
        t = DiffArray(rng.standard_normal((3, 3, 8)), requires_grad=True)
        m = DiffArray(rng.standard_normal((5, 8)))
        _, t_out = run_decoder(q, t, m, layers, heads=2)
        nc.array_sum(t_out * rng.standard_normal(t_out.data.shape)).backward()
        assert np.abs(q.grad).sum() > 0
        # ... while the query output has exactly zero gradient into the text
        q.zero_grad()
        t.zero_grad()
        q_out, _ = run_decoder(q, t, m, layers, heads=2)
        nc.array_sum(q_out * rng.standard_normal(q_out.data.shape)).backward()
        assert t.grad is None or np.abs(t.grad).sum() == 0
        assert np.abs(q.grad).sum() > 0

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(24)
        layers = [make_layer(50 + i) for i in range(2)]
        qb = rng.standard_normal((2, 3, 8))
        tb = rng.standard_normal((2, 3, 3, 8))
        mb = rng.standard_normal((2, 5, 8))
        q_out, t_out = run_decoder(DiffArray(qb), DiffArray(tb), DiffArray(mb), layers, heads=2)
        for b in range(2):
            qs, ts = run_decoder(
                DiffArray(qb[b]), DiffArray(tb[b]), DiffArray(mb[b]), layers, heads=2
            )
            np.testing.assert_allclose(q_out.data[b], qs.data, atol=1e-12, rtol=0)
            np.testing.assert_allclose(t_out.data[b], ts.data, atol=1e-12, rtol=0)


class TestDecoderGradients:
    def test_decoder_layer_finite_differences(self):
        params = DecoderLayerParams.create(np.random.default_rng(60), 4, 6, dtype=np.float64)
        rng = np.random.default_rng(61)
        q0 = rng.standard_normal((2, 4))
        t0 = rng.standard_normal((2, 2, 4))
        m0 = rng.standard_normal((3, 4))
        weights = rng.standard_normal((2, 2, 4))

        def build(q, t, m):
            q2, t2 = decoder_layer(q, t, m, params, heads=2)
            return nc.array_sum(t2 * weights) + nc.array_sum(q2 * q2) * 0.1

        fd_check(build, [q0, t0, m0], label="decoder_layer")
