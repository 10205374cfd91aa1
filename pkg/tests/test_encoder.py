"""Encoder: pooling semantics, separate-CLS handling, length schedules."""

import numpy as np
import pytest

from funnel.autodiff import ContractError, Rng, Tensor, grad_check, mul, sum_all
from funnel.encoder import (PooledState, block_transition_attention, pool_pair,
                            pool_step, pool_top_attn)
from funnel.layout import BlockSpec, LayoutSpec
from funnel.model import FunnelModel, ModelConfig


def make_state(values, pos=None, mask=None):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    t = values.shape[0]
    return PooledState(Tensor(values),
                       np.arange(t) if pos is None else np.asarray(pos),
                       np.ones(t, bool) if mask is None else np.asarray(mask))


class TestPoolPair:
    def test_mean_even_length(self):
        out, pos, mask = pool_pair(Tensor([[1.0], [3.0], [5.0], [7.0]]),
                                   np.arange(4), np.ones(4, bool), "mean")
        np.testing.assert_allclose(out.data, [[2.0], [6.0]])
        np.testing.assert_array_equal(pos, [0, 2])
        assert mask.all()

    def test_mean_singleton_tail(self):
        out, pos, _ = pool_pair(Tensor([[1.0], [3.0], [5.0]]),
                                np.arange(3), np.ones(3, bool), "mean")
        np.testing.assert_allclose(out.data, [[2.0], [5.0]])
        np.testing.assert_array_equal(pos, [0, 2])

    def test_max(self):
        out, _, _ = pool_pair(Tensor([[1.0], [3.0], [5.0], [7.0]]),
                              np.arange(4), np.ones(4, bool), "max")
        np.testing.assert_allclose(out.data, [[3.0], [7.0]])

    def test_pad_window_semantics(self):
        mask = np.array([True, True, False, False])
        out, _, pooled_mask = pool_pair(Tensor([[1.0], [3.0], [9.0], [9.0]]),
                                        np.arange(4), mask, "mean")
        np.testing.assert_allclose(out.data, [[2.0], [0.0]])
        np.testing.assert_array_equal(pooled_mask, [True, False])

    def test_pooled_position_is_first_of_window(self):
        _, pos, _ = pool_pair(Tensor(np.zeros((6, 2))), np.array([3, 4, 7, 8, 11, 12]),
                              np.ones(6, bool), "mean")
        np.testing.assert_array_equal(pos, [3, 7, 11])


class TestPoolTopAttn:
    def test_keeps_top_half_in_order(self):
        h = Tensor(np.arange(8.0).reshape(4, 2))
        attn = np.zeros((1, 1, 4))
        attn[0, 0] = [0.1, 0.9, 0.5, 0.3]
        out, pos, mask = pool_top_attn(h, np.arange(4), np.ones(4, bool), attn)
        np.testing.assert_array_equal(pos, [1, 2])
        np.testing.assert_allclose(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_tie_break_toward_lower_index(self):
        h = Tensor(np.arange(8.0).reshape(4, 2))
        attn = np.full((2, 3, 4), 0.25)
        out, pos, _ = pool_top_attn(h, np.arange(4), np.ones(4, bool), attn)
        np.testing.assert_array_equal(pos, [0, 1])

    def test_uniform_attention_column_sums(self):
        # row-stochastic uniform map: every column sums to Tq/T, a pure tie
        tq, t = 3, 4
        attn = np.full((2, tq, t), 1.0 / t)
        scores = attn.sum(axis=(0, 1))
        np.testing.assert_allclose(scores, np.full(t, 2 * tq / t))
        out, pos, _ = pool_top_attn(Tensor(np.arange(8.0).reshape(4, 2)),
                                    np.arange(4), np.ones(4, bool), attn)
        np.testing.assert_array_equal(pos, [0, 1])

    def test_keeps_exactly_ceil_half(self):
        for t in range(1, 9):
            gen = np.random.Generator(np.random.Philox(t))
            attn = gen.random((2, t, t))
            out, pos, _ = pool_top_attn(Tensor(gen.standard_normal((t, 3))),
                                        np.arange(t), np.ones(t, bool), attn)
            assert out.shape[0] == (t + 1) // 2
            assert (np.diff(pos) > 0).all()

    def test_missing_map_is_contract_error(self):
        with pytest.raises(ContractError):
            pool_top_attn(Tensor(np.zeros((4, 2))), np.arange(4), np.ones(4, bool), None)


class TestPoolStep:
    def test_separate_cls_with_truncation(self):
        # T=8 keeps CLS intact, pools pairs of the rest, drops the tail singleton
        vals = np.array([100.0, 1, 3, 5, 7, 9, 11, 13])
        out = pool_step(make_state(vals), "mean", separate_cls=True, truncate=True)
        np.testing.assert_allclose(out.hidden.data[:, 0], [100.0, 2.0, 6.0, 10.0])
        np.testing.assert_array_equal(out.pos, [0, 1, 3, 5])
        assert len(out.pos) == 4

    def test_no_separate_cls_plain_stride2(self):
        vals = np.array([100.0, 1, 3, 5, 7, 9, 11, 13])
        out = pool_step(make_state(vals), "mean", separate_cls=False, truncate=True)
        np.testing.assert_allclose(out.hidden.data[:, 0], [50.5, 4.0, 8.0, 12.0])
        assert len(out.pos) == 4

    def test_length_one_rest_unchanged(self):
        out = pool_step(make_state([5.0]), "mean", separate_cls=True, truncate=True)
        np.testing.assert_allclose(out.hidden.data, [[5.0]])

    def test_cls_bit_identical(self):
        gen = np.random.Generator(np.random.Philox(2))
        vals = gen.standard_normal((8, 4))
        out = pool_step(make_state(vals), "mean", separate_cls=True, truncate=True)
        assert (out.hidden.data[0] == vals[0]).all()

    def test_cls_perturbation_does_not_leak(self):
        gen = np.random.Generator(np.random.Philox(3))
        vals = gen.standard_normal((8, 4))
        a = pool_step(make_state(vals), "mean", separate_cls=True, truncate=True)
        vals2 = vals.copy()
        vals2[0] += 10.0
        b = pool_step(make_state(vals2), "mean", separate_cls=True, truncate=True)
        np.testing.assert_array_equal(a.hidden.data[1:], b.hidden.data[1:])

    def test_without_separate_cls_leaks_cls_into_first_window(self):
        gen = np.random.Generator(np.random.Philox(4))
        vals = gen.standard_normal((8, 4))
        a = pool_step(make_state(vals), "mean", separate_cls=False, truncate=True)
        vals2 = vals.copy()
        vals2[0] += 10.0
        b = pool_step(make_state(vals2), "mean", separate_cls=False, truncate=True)
        assert not np.allclose(a.hidden.data[0], b.hidden.data[0])


@pytest.fixture
def tiny_config():
    layout = LayoutSpec(blocks=(BlockSpec(2), BlockSpec(2)), hidden=16,
                        decoder_layers=2, head_dim=8)
    return ModelConfig(layout=layout, vocab_size=11, seed=0)


class TestBlockTransition:
    def test_output_length_equals_pooled_length(self, tiny_config):
        model = FunnelModel(tiny_config)
        gen = np.random.Generator(np.random.Philox(5))
        unpooled = make_state(gen.standard_normal((8, 16)))
        pooled = pool_step(unpooled, "mean", True, True)
        lp = tiny_config.layer_params(model.params, 1, 0)
        out, _ = block_transition_attention(pooled, unpooled, lp,
                                            model.params["rel/w_r"],
                                            tiny_config.encoding(), "factorized",
                                            tiny_config.heads)
        assert out.shape == (4, 16)

    def test_pool_query_only_off_matches_standard_layer(self, tiny_config):
        from funnel.relattn import attention
        model = FunnelModel(tiny_config)
        gen = np.random.Generator(np.random.Philox(6))
        unpooled = make_state(gen.standard_normal((8, 16)))
        pooled = pool_step(unpooled, "mean", True, True)
        lp = tiny_config.layer_params(model.params, 1, 0)
        out, _ = block_transition_attention(pooled, unpooled, lp,
                                            model.params["rel/w_r"],
                                            tiny_config.encoding(), "factorized",
                                            tiny_config.heads, pool_query_only=False)
        ref, _ = attention(pooled.hidden, pooled.hidden, pooled.pos, pooled.pos, lp,
                           model.params["rel/w_r"], tiny_config.encoding(),
                           variant="factorized", key_mask=pooled.mask,
                           n_heads=tiny_config.heads)
        np.testing.assert_array_equal(out.data, ref.data)

    def test_zero_scores_average_unpooled_states(self, tiny_config):
        # identity-ish params with a zeroed score path: every query sees the
        # uniform average of the unpooled states, plus its own residual
        from funnel.autodiff import layer_norm
        model = FunnelModel(tiny_config)
        lp = tiny_config.layer_params(model.params, 1, 0)
        d = 16
        for t, v in [(lp.w_q, 0.0), (lp.w_k, 0.0), (lp.b_q, 0.0), (lp.b_k, 0.0),
                     (lp.u, 0.0), (lp.v, 0.0), (lp.b_v, 0.0), (lp.b_o, 0.0)]:
            t.data[:] = v
        lp.w_v.data[:] = np.eye(d)
        lp.w_o.data[:] = np.eye(d)
        model.params["rel/w_r"].data[:] = 0.0
        gen = np.random.Generator(np.random.Philox(7))
        unpooled = make_state(gen.standard_normal((4, d)))
        pooled = pool_step(unpooled, "mean", True, True)
        out, _ = block_transition_attention(pooled, unpooled, lp,
                                            model.params["rel/w_r"],
                                            tiny_config.encoding(), "factorized",
                                            tiny_config.heads)
        mean_state = unpooled.hidden.data.mean(axis=0)
        expected = layer_norm(Tensor(pooled.hidden.data + mean_state),
                              lp.ln_attn_g, lp.ln_attn_b).data
        np.testing.assert_allclose(out.data, expected, atol=1e-10)


class TestEncoderForward:
    def test_block_length_schedule(self):
        layout = LayoutSpec(blocks=(BlockSpec(2), BlockSpec(2), BlockSpec(2)),
                            hidden=64, head_dim=64)
        config = ModelConfig(layout=layout, vocab_size=11, seed=0)
        model = FunnelModel(config)
        toks = np.concatenate([[2], Rng(1).integers(5, 11, 14), [3]])
        state = model.encode(toks)
        assert [h.shape[0] for h in state.block_hidden] == [16, 8, 4]

    def test_single_block_no_pooling(self):
        config = ModelConfig(layout="L4H64", vocab_size=11, seed=0)
        model = FunnelModel(config)
        toks = np.concatenate([[2], Rng(2).integers(5, 11, 14), [3]])
        state = model.encode(toks)
        assert [h.shape[0] for h in state.block_hidden] == [16]

    def test_two_block_final_length(self, tiny_config):
        model = FunnelModel(tiny_config)
        toks = np.concatenate([[2], Rng(3).integers(5, 11, 6), [3]])
        state = model.encode(toks)
        assert state.h_last.shape[0] == 4

    def test_non_power_of_two_rejected(self, tiny_config):
        model = FunnelModel(tiny_config)
        with pytest.raises(ContractError):
            model.encode(np.arange(6) % 5)

    def test_cls_row_propagates_through_pooling(self, tiny_config):
        # position 0 keeps pos id 0 and real mask in every block
        model = FunnelModel(tiny_config)
        toks = np.concatenate([[2], Rng(4).integers(5, 11, 6), [3]])
        state = model.encode(toks)
        for pos, mask in zip(state.block_pos, state.block_mask):
            assert pos[0] == 0
            assert mask[0]

    def test_top_attn_encoder_runs(self):
        layout = LayoutSpec(blocks=(BlockSpec(2), BlockSpec(2)), hidden=16, head_dim=8)
        config = ModelConfig(layout=layout, vocab_size=11, pool_op="top_attn", seed=0)
        model = FunnelModel(config)
        toks = np.concatenate([[2], Rng(5).integers(5, 11, 6), [3]])
        state = model.encode(toks)
        assert state.h_last.shape[0] == 4
        assert state.block_pos[1][0] == 0

    def test_variant_swap_equivalent_through_whole_model(self):
        # pooled queries against unpooled keys included: the decoder output
        # must agree across all three score implementations
        from funnel.model import build_params
        outs = {}
        for variant in ("naive", "gather", "factorized"):
            layout = LayoutSpec(blocks=(BlockSpec(2), BlockSpec(2)), hidden=16,
                                decoder_layers=1, head_dim=8)
            config = ModelConfig(layout=layout, vocab_size=11, seed=5,
                                 attn_variant=variant)
            model = FunnelModel(config)
            toks = np.concatenate([[2], Rng(9).integers(5, 11, 6), [3]])
            outs[variant] = model.decode(model.encode(toks)).hidden.data
        assert np.abs(outs["naive"] - outs["gather"]).max() < 1e-8
        assert np.abs(outs["naive"] - outs["factorized"]).max() < 1e-8

    def test_grad_flows_through_two_blocks(self, tiny_config):
        model = FunnelModel(tiny_config)
        toks = np.concatenate([[2], Rng(6).integers(5, 11, 6), [3]])

        def f():
            state = model.encode(toks)
            return sum_all(mul(state.h_last, weights))

        gen = np.random.Generator(np.random.Philox(8))
        weights = Tensor(gen.standard_normal((4, 16)))
        keys = ["embed/token", "rel/w_r", "enc/b0/l0/attn/w_q", "enc/b1/l0/attn/w_v",
                "enc/b1/l1/ffn/w2", "enc/b0/l1/attn/ln_g"]
        err = grad_check(f, [model.params[k] for k in keys], eps=1e-4,
                         denominator_floor=1e-6, max_coords_per_param=6, seed=8)
        assert err < 1e-4
