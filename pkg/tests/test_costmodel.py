"""Analytical cost model: effective layers, ratio tables, parameter inventory."""

import json
from fractions import Fraction

import numpy as np
import pytest

from funnel.costmodel import (CostModelError, compare_report, cost_report,
                              display_ratio, effective_layers, flops_exact,
                              flops_ratio, layer_flops, param_count, params_per_layer)
from funnel.layout import BlockSpec, LayoutSpec
from funnel.model import ModelConfig, build_params


class TestEffectiveLayers:
    def test_three_block_base(self):
        assert effective_layers("B6-6-6H768") == Fraction(21, 2)

    def test_plain_stack(self):
        assert effective_layers("L12H768") == 12

    def test_geometric_sum(self):
        assert effective_layers("B8-8-8H1024") == 8 + 4 + 2

    def test_pretrain_adds_decoder(self):
        assert effective_layers("B6-6-6H768D2", "pretrain") == Fraction(25, 2)
        assert effective_layers("B6-6-6H768D2", "finetune") == Fraction(21, 2)

    def test_tying_does_not_change_flops(self):
        assert effective_layers("B6-3x2-3x2H768") == effective_layers("B6-6-6H768")


class TestRatios:
    @pytest.mark.parametrize("a,b,expected", [
        ("B10-10-10H1024", "L24H1024", "0.73"),
        ("B8-8-8H1024", "L24H1024", "0.58"),
        ("B6-6-6H768", "L12H768", "0.88"),
        ("B6-3x2-3x2H768", "L12H768", "0.88"),
        ("B4-4-4H768", "L12H768", "0.58"),
        ("B3-4-4H768", "L6H768", "1.00"),
    ])
    def test_finetune_table_cells(self, a, b, expected):
        assert display_ratio(flops_ratio(a, b, "finetune"), "finetune") == expected

    @pytest.mark.parametrize("a,b,expected", [
        ("B6-6-6H768D2", "L12H768", "1.04"),
        ("B6-3x2-3x2H768D2", "L12H768", "1.04"),
        ("B4-4-4H768D2", "L12H768", "0.75"),
        ("B10-10-10H1024D2", "L24H1024", "0.81"),
        ("B8-8-8H1024D2", "L24H1024", "0.66"),
    ])
    def test_pretrain_table_cells(self, a, b, expected):
        assert display_ratio(flops_ratio(a, b, "pretrain"), "pretrain") == expected

    def test_mixed_hidden_rejected(self):
        with pytest.raises(CostModelError):
            flops_ratio("B6-6-6H768", "L24H1024")

    def test_self_ratio_is_one(self):
        assert flops_ratio("L6H768", "L6H768") == 1

    def test_block_count_study_cells(self):
        # two- and four-block alternatives measured against the three-block
        # default at width 512: FLOPs 1.14x / 0.89x, params 0.91x / 1.08x
        base = "B6-6-6H512"
        assert display_ratio(flops_ratio("B8-8H512", base), "finetune") == "1.14"
        assert display_ratio(flops_ratio("B5-5-5-5H512", base), "finetune") == "0.89"
        pb = param_count(base)["params_total"]
        assert abs(param_count("B8-8H512")["params_total"] / pb - 0.91) <= 0.02
        assert abs(param_count("B5-5-5-5H512")["params_total"] / pb - 1.08) <= 0.02


class TestFlopsExact:
    def test_single_layer_hand_count(self):
        # q=k=1, D=64, factorized: MACs = 4*64^2 (projections) + 2*64
        # (scores+sum) + 64^2 + 2*64 (position) + 8*64^2 (FFN), all doubled
        d = 64
        macs = 4 * d * d + 2 * d + (d * d + 2 * d) + 8 * d * d
        assert layer_flops(1, 1, d, "factorized") == 2 * macs
        assert flops_exact("L1H64", 1) == 2 * macs

    def test_superlinear_in_length(self):
        assert flops_exact("L2H128", 256) > 2 * flops_exact("L2H128", 128)

    def test_linear_in_layer_count(self):
        one = flops_exact("L1H64", 64)
        assert flops_exact("L4H64", 64) == 4 * one

    def test_self_ratio(self):
        assert flops_exact("L1H64", 64) / flops_exact("L1H64", 64) == 1.0

    def test_funnel_cheaper_than_equal_depth_stack(self):
        assert flops_exact("B6-6-6H768", 512) < flops_exact("L18H768", 512)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(CostModelError):
            flops_exact("L2H64", 24)

    def test_transition_layer_uses_unpooled_keys(self):
        # a 2-block funnel costs more than the same layers all run pooled,
        # because its transition layer reads full-length keys
        funnel = flops_exact("B1-1H64", 64)
        all_short = layer_flops(64, 64, 64) + layer_flops(32, 32, 64)
        assert funnel == layer_flops(64, 64, 64) + layer_flops(32, 64, 64)
        assert funnel > all_short


class TestParams:
    def test_per_layer_closed_form(self):
        assert params_per_layer(768) == 12 * 768 * 768 + 15 * 768

    def test_transformer_ratio_exactly_1_5(self):
        a = param_count("B6-6-6H768")
        b = param_count("L12H768")
        assert a["params_transformer"] * 2 == b["params_transformer"] * 3

    @pytest.mark.parametrize("a,b,target", [
        ("B10-10-10H1024", "L24H1024", 1.22),
        ("B8-8-8H1024", "L24H1024", 1.00),
        ("B6-6-6H768", "L12H768", 1.39),
        ("B6-3x2-3x2H768", "L12H768", 1.00),
        ("B4-4-4H768", "L12H768", 1.00),
        ("B3-4-4H768", "L6H768", 1.53),
    ])
    def test_total_ratio_within_tolerance(self, a, b, target):
        ratio = param_count(a)["params_total"] / param_count(b)["params_total"]
        assert abs(ratio - target) <= 0.02

    def test_pretrain_counts_decoder(self):
        ft = param_count("B2-2H128D2", mode="finetune")
        pt = param_count("B2-2H128D2", mode="pretrain")
        assert pt["params_transformer"] - ft["params_transformer"] == 2 * params_per_layer(128)

    def test_matches_built_model_exactly(self):
        # the inventory is not an estimate: it equals the real tensor tree
        layout = LayoutSpec(blocks=(BlockSpec(2), BlockSpec(3, 2)), hidden=64,
                            decoder_layers=2)
        config = ModelConfig(layout=layout, vocab_size=37, seed=0)
        params = build_params(config)
        actual = sum(int(np.prod(p.shape)) for p in params.values())
        assert param_count(layout, vocab=37, mode="pretrain")["params_total"] == actual

    def test_tied_blocks_count_unique_only(self):
        tied = param_count("B6-3x2-3x2H768")["params_transformer"]
        untied = param_count("B6-6-6H768")["params_transformer"]
        assert tied == 12 * params_per_layer(768)
        assert untied == 18 * params_per_layer(768)

    def test_bad_vocab_rejected(self):
        with pytest.raises(CostModelError):
            param_count("L1H64", vocab=0)


class TestCompareReport:
    def test_base_group_text(self):
        out = compare_report(["B6-6-6H768", "B6-3x2-3x2H768", "B4-4-4H768"],
                             "L12H768")
        cells = [line.split()[1] for line in out.splitlines()[2:5]]
        assert cells == ["0.88", "0.88", "0.58"]

    def test_large_group(self):
        out = compare_report(["B10-10-10H1024", "B8-8-8H1024"], "L24H1024")
        cells = [line.split()[1] for line in out.splitlines()[2:4]]
        assert cells == ["0.73", "0.58"]

    def test_small_group(self):
        out = compare_report(["B3-4-4H768"], "L6H768")
        assert out.splitlines()[2].split()[1] == "1.00"

    def test_pretrain_group_json(self):
        out = json.loads(compare_report(
            ["B6-6-6H768D2", "B6-3x2-3x2H768D2", "B4-4-4H768D2"], "L12H768",
            mode="pretrain", fmt="json"))
        assert [r["flops_ratio_linear"] for r in out["rows"]] == ["1.04", "1.04", "0.75"]

    def test_json_schema_stable(self):
        out = json.loads(compare_report(["B2-2H64"], "L2H64", fmt="json"))
        assert set(out) == {"baseline", "mode", "seq_len", "rows"}
        assert set(out["rows"][0]) == {"layout", "flops_ratio_linear",
                                       "flops_ratio_exact", "params_ratio"}


def test_cost_report_fields():
    r = cost_report("B6-6-6H768D2", seq_len=512, mode="pretrain")
    assert r.effective_layers == Fraction(25, 2)
    d = r.to_dict()
    assert d["effective_layers"] == [25, 2]
    assert d["params_total"] == r.params_total
