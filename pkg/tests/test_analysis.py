"""FLOPs accounting, benchmark bookkeeping and view masking."""

import numpy as np
import pytest

from bevkit import (
    BranchBlock,
    ConfigError,
    ConvSpec,
    GraphDesc,
    benchmark_pipeline,
    count_flops,
    mask_views,
)
from bevkit.analysis import conv_flops, nearest_rank
from bevkit.reparam import MergeBudget, reparam_graph

from test_reparam import rand_conv, random_graph


class TestCountFlops:
    def test_closed_form_example(self):
        # 3x3, 16->16 channels, 32x32 output, no-bias formula term
        conv = ConvSpec(
            np.zeros((16, 16, 3, 3), np.float32), np.zeros(16, np.float32), padding=(1, 1)
        )
        assert conv_flops(conv, (32, 32), with_bias=False) == 4_718_592

    def test_empty_graph_is_zero(self):
        report = count_flops(GraphDesc(input_channels=3, blocks=()), (3, 8, 8))
        assert report.total == 0

    def test_additive_over_concatenation(self):
        rng = np.random.default_rng(0)
        g1 = random_graph(rng, max_blocks=3, max_channels=6)
        # second graph must consume g1's output channels
        tail = BranchBlock.plain(rand_conv(rng, 4, g1.output_channels, 3))
        g2 = GraphDesc(input_channels=g1.output_channels, blocks=(tail,))
        joint = GraphDesc(input_channels=g1.input_channels, blocks=g1.blocks + g2.blocks)
        a = count_flops(g1, (g1.input_channels, 16, 16))
        # spatial size is preserved by these blocks (stride 1, same padding)
        b = count_flops(g2, (g2.input_channels, 16, 16))
        c = count_flops(joint, (joint.input_channels, 16, 16))
        assert c.total == a.total + b.total

    def test_reparam_never_costs_more(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            g = random_graph(rng, max_blocks=4, max_channels=8)
            out = reparam_graph(g, MergeBudget(0.02, 0.01, cap=2))
            before = count_flops(g, (g.input_channels, 16, 16))
            after = count_flops(out, (g.input_channels, 16, 16))
            assert after.total <= before.total

    def test_percentages_sum_to_100(self):
        rng = np.random.default_rng(2)
        g = random_graph(rng, max_blocks=5, max_channels=8)
        report = count_flops(g, (g.input_channels, 16, 16))
        assert sum(report.percentages().values()) == pytest.approx(100.0, abs=0.1)

    def test_csv_output(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, max_blocks=2, max_channels=4)
        text = count_flops(g, (g.input_channels, 8, 8)).to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "module,flops,percent"
        assert lines[-1].startswith("total,")


class TestBenchmark:
    def test_fps_identity_and_warmup(self):
        calls = {"n": 0}

        def stage():
            calls["n"] += 1

        result = benchmark_pipeline(stage, frames=10, warmup=3)
        assert calls["n"] == 13  # warmup excluded from stats but executed
        assert result.frames == 10
        assert result.wall_seconds > 0
        assert result.fps == pytest.approx(result.frames / result.wall_seconds)
        assert result.p50_ms <= result.p95_ms

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            benchmark_pipeline(lambda: None, frames=0)
        with pytest.raises(ConfigError):
            benchmark_pipeline(lambda: None, frames=1, warmup=-1)

    def test_nearest_rank(self):
        vals = [1.0, 2.0, 3.0, 4.0]
        assert nearest_rank(vals, 50) == 2.0
        assert nearest_rank(vals, 95) == 4.0
        assert nearest_rank([7.0], 50) == 7.0


class TestMaskViews:
    def make_inputs(self):
        rng = np.random.default_rng(4)
        return {
            name: (
                rng.uniform(-1, 1, (2, 4, 4)).astype(np.float32),
                rng.uniform(0, 1, (3, 4, 4)).astype(np.float32),
            )
            for name in ("front", "back")
        }

    def test_empty_mask_is_identity(self):
        inputs = self.make_inputs()
        out = mask_views(inputs, set())
        for name in inputs:
            np.testing.assert_array_equal(out[name][0], inputs[name][0])
            np.testing.assert_array_equal(out[name][1], inputs[name][1])

    def test_mask_all_zeroes_everything(self):
        inputs = self.make_inputs()
        out = mask_views(inputs, {"front", "back"})
        for name in inputs:
            assert not out[name][0].any() and not out[name][1].any()

    def test_partial_mask(self):
        inputs = self.make_inputs()
        out = mask_views(inputs, {"front"})
        assert not out["front"][0].any()
        np.testing.assert_array_equal(out["back"][0], inputs["back"][0])

    def test_unknown_camera_rejected(self):
        with pytest.raises(ConfigError):
            mask_views(self.make_inputs(), {"left"})
