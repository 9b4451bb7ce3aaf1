"""Command-line surface and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from bevkit import save_detections_jsonl, save_graph, save_tensor
from bevkit.cli import main
from bevkit.head import Detection
from bevkit.liftsplat import lut_load
from bevkit.reparam import GraphDesc, BranchBlock, load_graph

from test_reparam import rand_bn, rand_conv

REPO = Path(__file__).resolve().parent.parent
REFERENCE = str(REPO / "configs" / "reference.json")


@pytest.fixture
def fast_config(tmp_path):
    """Reference config shrunk for CLI tests."""
    doc = json.loads(Path(REFERENCE).read_text())
    doc["rig"] = str(REPO / "configs" / "rig.json")
    doc["aug"]["scale"] = 0.125
    doc["depth_bins"]["num_bins"] = 28
    doc["channels"] = 2
    doc["temporal"]["max_frames"] = 1
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return str(p)


def make_graph(tmp_path, seed=0):
    rng = np.random.default_rng(seed)
    blocks = (
        BranchBlock(
            main_conv=rand_conv(rng, 4, 4, 3),
            main_bn=rand_bn(rng, 4),
            one_by_one_conv=rand_conv(rng, 4, 4, 1, padding=(0, 0)),
            identity_bn=rand_bn(rng, 4),
            activation="relu",
        ),
        BranchBlock(main_conv=rand_conv(rng, 4, 4, 3), main_bn=rand_bn(rng, 4)),
    )
    g = GraphDesc(input_channels=4, blocks=blocks)
    path = tmp_path / "graph.json"
    save_graph(g, path)
    return g, path


class TestLutCommands:
    def test_build_and_info(self, fast_config, tmp_path, capsys):
        out = tmp_path / "table.bevlut"
        assert main(["lut", "build", "--config", fast_config, "--out", str(out)]) == 0
        built = json.loads(capsys.readouterr().out)
        assert built["cameras"] == 6
        assert main(["lut", "info", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["grid"] == [128, 128]
        assert info["fingerprint"] == built["fingerprint"]

    def test_splat_command(self, fast_config, tmp_path, capsys):
        out = tmp_path / "table.bevlut"
        main(["lut", "build", "--config", fast_config, "--out", str(out)])
        capsys.readouterr()
        lut = lut_load(out)
        rng = np.random.default_rng(0)
        manifest = {}
        from bevkit import load_config

        cfg = load_config(fast_config)
        fh, fw = cfg.feature_size
        for k in range(6):
            name = ["back", "back-left", "back-right", "front", "front-left", "front-right"][k]
            feat = rng.uniform(0, 1, (2, fh, fw)).astype(np.float32)
            dep = np.full((cfg.depth_bins.num_bins, fh, fw),
                          1.0 / cfg.depth_bins.num_bins, np.float32)
            save_tensor(feat, tmp_path / f"{name}_f.bevt")
            save_tensor(dep, tmp_path / f"{name}_d.bevt")
            manifest[name] = {"features": f"{name}_f.bevt", "depth": f"{name}_d.bevt"}
        mpath = tmp_path / "cameras.json"
        mpath.write_text(json.dumps(manifest))
        bev_path = tmp_path / "bev.bevt"
        code = main([
            "lut", "splat", "--lut", str(out), "--config", fast_config,
            "--cameras", str(mpath), "--out", str(bev_path),
        ])
        assert code == 0
        from bevkit import load_tensor

        bev = load_tensor(bev_path)
        assert bev.shape == (2, 128, 128)
        assert bev.sum() > 0


class TestReparamCommands:
    def test_run_and_verify_pass(self, tmp_path, capsys):
        _, path = make_graph(tmp_path)
        fused = tmp_path / "fused.json"
        code = main([
            "reparam", "run", "--graph", str(path), "--budget-E", "0.02",
            "--budget-e", "0.01", "--out", str(fused),
        ])
        assert code == 0
        assert all(b.is_plain() for b in load_graph(fused).blocks)
        capsys.readouterr()
        code = main([
            "reparam", "verify", "--original", str(path), "--fused", str(fused),
            "--trials", "5", "--seed", "3", "--tol", "1e-4",
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["pass"] is True

    def test_verify_fails_with_exit_3(self, tmp_path, capsys):
        g, path = make_graph(tmp_path, seed=1)
        other = tmp_path / "other.json"
        save_graph(GraphDesc(g.input_channels, make_graph(tmp_path / "x", seed=2)[0].blocks), other)
        code = main([
            "reparam", "verify", "--original", str(path), "--fused", str(other),
            "--trials", "2", "--seed", "0", "--tol", "1e-6",
        ])
        assert code == 3

    def test_budget_exceeded_is_config_exit(self, tmp_path, capsys):
        _, path = make_graph(tmp_path)
        code = main([
            "reparam", "run", "--graph", str(path), "--budget-E", "0.01",
            "--budget-e", "0.01", "--cap", "4", "--out", str(tmp_path / "f.json"),
        ])
        assert code == 2

    def test_fuse_conv_bn_worked_example(self, tmp_path, capsys):
        save_tensor(np.array([[[[2.0]]]], np.float32), tmp_path / "w.bevt")
        save_tensor(np.array([1.0], np.float32), tmp_path / "b.bevt")
        for name, val in (("mean", 1.0), ("var", 4.0), ("gamma", 1.0), ("beta", 0.0)):
            save_tensor(np.array([val], np.float32), tmp_path / f"{name}.bevt")
        spec = {
            "conv": {"weights": "w.bevt", "bias": "b.bevt", "stride": [1, 1], "padding": [0, 0]},
            "bn": {"mean": "mean.bevt", "var": "var.bevt", "gamma": "gamma.bevt",
                   "beta": "beta.bevt", "eps": 0.0},
        }
        spath = tmp_path / "spec.json"
        spath.write_text(json.dumps(spec))
        code = main(["reparam", "fuse-conv-bn", "--spec", str(spath),
                     "--out-dir", str(tmp_path / "out")])
        assert code == 0
        from bevkit import load_tensor

        out = json.loads(capsys.readouterr().out)
        assert load_tensor(out["weights"]).ravel()[0] == pytest.approx(1.0, abs=1e-6)
        assert load_tensor(out["bias"])[0] == pytest.approx(0.0, abs=1e-6)

    def test_merge_branches_command(self, tmp_path, capsys):
        g, path = make_graph(tmp_path, seed=5)
        doc = json.loads(path.read_text())
        block_doc = doc["blocks"][0]
        bpath = tmp_path / "block.json"
        bpath.write_text(json.dumps(block_doc))
        code = main(["reparam", "merge-branches", "--block", str(bpath),
                     "--out-dir", str(tmp_path / "merged")])
        assert code == 0
        from bevkit import load_tensor, merge_branches

        out = json.loads(capsys.readouterr().out)
        want = merge_branches(g.blocks[0])
        np.testing.assert_array_equal(load_tensor(out["weights"]), want.weights)
        np.testing.assert_array_equal(load_tensor(out["bias"]), want.bias)


class TestNmsCommand:
    def test_filtering(self, tmp_path, capsys):
        dets = [
            Detection(0, 0, 0, 1, 1, 1, 0, 0, 0, 0.9, 0),
            Detection(0.5, 0, 0, 1, 1, 1, 0, 0, 0, 0.8, 0),
            Detection(30, 0, 0, 1, 1, 1, 0, 0, 0, 0.7, 0),
        ]
        dpath = tmp_path / "in.jsonl"
        save_detections_jsonl(dets, dpath)
        rpath = tmp_path / "radii.json"
        rpath.write_text(json.dumps({"0": 1.0}))
        opath = tmp_path / "out.jsonl"
        code = main(["nms", "--dets", str(dpath), "--radii", str(rpath), "--out", str(opath)])
        assert code == 0
        from bevkit import load_detections_jsonl

        kept = load_detections_jsonl(opath)
        assert [d.score for d in kept] == [0.9, 0.7]

    def test_missing_radius_exit_2(self, tmp_path):
        dets = [Detection(0, 0, 0, 1, 1, 1, 0, 0, 0, 0.9, 7)]
        dpath = tmp_path / "in.jsonl"
        save_detections_jsonl(dets, dpath)
        rpath = tmp_path / "radii.json"
        rpath.write_text(json.dumps({"0": 1.0}))
        assert main(["nms", "--dets", str(dpath), "--radii", str(rpath),
                     "--out", str(tmp_path / "o.jsonl")]) == 2


class TestFlopsCommand:
    def test_json_and_csv(self, tmp_path, capsys):
        _, path = make_graph(tmp_path)
        assert main(["flops", "--graph", str(path), "--input-shape", "4x16x16"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["total_flops"] > 0
        assert main(["flops", "--graph", str(path), "--input-shape", "4x16x16",
                     "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("module,flops,percent")

    def test_bad_shape_exit_2(self, tmp_path):
        _, path = make_graph(tmp_path)
        assert main(["flops", "--graph", str(path), "--input-shape", "bogus"]) == 2


class TestDemoAndBench:
    def test_demo_e2e(self, fast_config, capsys):
        code = main(["demo", "e2e", "--config", fast_config, "--seed", "1", "--objects", "2"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["objects"] == 2
        assert out["bev_total_mass"] > 0

    def test_bench_small(self, fast_config, capsys):
        code = main(["bench", "--config", fast_config, "--frames", "3",
                     "--warmup", "1", "--objects", "1"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["frames"] == 3 and out["fps"] > 0

    def test_mask_views_command(self, fast_config, capsys):
        code = main(["mask-views", "--config", fast_config, "--mask", "front",
                     "--seed", "0", "--objects", "2"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["masked"] == ["front"]
        assert out["exclusive_sector_mass"]["front"] == 0.0

    def test_bad_config_exit_2(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{\"version\": 1}")
        assert main(["demo", "e2e", "--config", str(p)]) == 2
