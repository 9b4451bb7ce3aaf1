"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 numeric/verification failure.
All randomness flows from --seed; BEVKIT_THREADS overrides the worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, pipeline as pl
from .errors import (
    BevkitError,
    ConfigError,
    NumericError,
    VerificationError,
)
from .head import circular_nms, load_detections_jsonl, save_detections_jsonl
from .liftsplat import lut_load, lut_save, splat
from .reparam import (
    BranchBlock,
    MergeBudget,
    fuse_conv_bn,
    load_graph,
    merge_branches,
    merge_budget_n,
    reparam_graph,
    save_graph,
    verify_equivalence,
)
from .reparam import _load_bn, _load_conv  # JSON block helpers shared with graphs
from .tensor import load_tensor, save_tensor

EXIT_CONFIG = 2
EXIT_VERIFY = 3


def _load_block_json(path: Path) -> BranchBlock:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read block: {exc}") from exc
    base = path.parent
    try:
        return BranchBlock(
            main_conv=_load_conv(doc["main"]["conv"], base),
            main_bn=_load_bn(doc["main"]["bn"], base) if "bn" in doc["main"] else None,
            one_by_one_conv=(
                _load_conv(doc["one_by_one"]["conv"], base) if "one_by_one" in doc else None
            ),
            one_by_one_bn=(
                _load_bn(doc["one_by_one"]["bn"], base)
                if "one_by_one" in doc and "bn" in doc["one_by_one"]
                else None
            ),
            identity_bn=_load_bn(doc["identity_bn"], base) if "identity_bn" in doc else None,
            activation=doc.get("activation", "none"),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: block document is missing key {exc}") from exc


def cmd_lut_build(args) -> int:
    cfg = pl.load_config(args.config)
    rig = pl.load_rig(args.rig) if args.rig else None
    pipe = pl.Pipeline(cfg, rig=rig)
    lut_save(pipe.lut, args.out)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "cameras": pipe.lut.num_cams,
                "valid_cells": pipe.lut.num_valid,
                "segments": pipe.lut.num_segments,
                "fingerprint": f"{pipe.lut.fingerprint:#018x}",
            }
        )
    )
    return 0


def cmd_lut_info(args) -> int:
    lut = lut_load(args.file)
    print(
        json.dumps(
            {
                "cameras": lut.num_cams,
                "depth_bins": lut.num_bins,
                "feat_h": lut.feat_h,
                "feat_w": lut.feat_w,
                "grid": [lut.nx, lut.ny],
                "valid_cells": lut.num_valid,
                "segments": lut.num_segments,
                "fingerprint": f"{lut.fingerprint:#018x}",
            },
            indent=2,
        )
    )
    return 0


def cmd_lut_splat(args) -> int:
    cfg = pl.load_config(args.config)
    lut = lut_load(args.lut)
    try:
        manifest = json.loads(Path(args.cameras).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.cameras}: cannot read camera manifest: {exc}") from exc
    base = Path(args.cameras).parent
    feats, depths = {}, {}
    for name, entry in manifest.items():
        feats[name] = load_tensor(base / entry["features"])
        depths[name] = load_tensor(base / entry["depth"])
    bev = splat(feats, depths, lut, cfg.grid)
    save_tensor(bev, args.out)
    print(json.dumps({"out": str(args.out), "shape": list(bev.shape)}))
    return 0


def cmd_reparam_run(args) -> int:
    g = load_graph(args.graph)
    budget = MergeBudget(post_error=args.budget_E, pre_error=args.budget_e, cap=args.cap)
    fused = reparam_graph(g, budget)
    save_graph(fused, args.out)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "blocks": len(fused.blocks),
                "merge_budget_n": merge_budget_n(budget),
            }
        )
    )
    return 0


def cmd_reparam_verify(args) -> int:
    g1 = load_graph(args.original)
    g2 = load_graph(args.fused)
    report = verify_equivalence(
        g1, g2, trials=args.trials, seed=args.seed, tol=args.tol,
        input_hw=(args.height, args.width),
    )
    print(json.dumps(report.to_json(), indent=2))
    return 0 if report.passed else EXIT_VERIFY


def cmd_reparam_fuse_conv_bn(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.spec}: cannot read spec: {exc}") from exc
    base = Path(args.spec).parent
    try:
        conv = _load_conv(doc["conv"], base)
        bn = _load_bn(doc["bn"], base)
    except KeyError as exc:
        raise ConfigError(f"{args.spec}: missing key {exc}") from exc
    fused = fuse_conv_bn(conv, bn)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_tensor(fused.weights, outdir / "fused_w.bevt")
    save_tensor(fused.bias, outdir / "fused_b.bevt")
    print(
        json.dumps(
            {
                "weights": str(outdir / "fused_w.bevt"),
                "bias": str(outdir / "fused_b.bevt"),
                "stride": list(fused.stride),
                "padding": list(fused.padding),
            }
        )
    )
    return 0


def cmd_reparam_merge_branches(args) -> int:
    block = _load_block_json(Path(args.block))
    merged = merge_branches(block)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_tensor(merged.weights, outdir / "merged_w.bevt")
    save_tensor(merged.bias, outdir / "merged_b.bevt")
    print(
        json.dumps(
            {
                "weights": str(outdir / "merged_w.bevt"),
                "bias": str(outdir / "merged_b.bevt"),
                "stride": list(merged.stride),
                "padding": list(merged.padding),
            }
        )
    )
    return 0


def cmd_nms(args) -> int:
    dets = load_detections_jsonl(args.dets)
    try:
        raw = json.loads(Path(args.radii).read_text())
        radii = {int(k): float(v) for k, v in raw.items()}
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.radii}: bad radii file: {exc}") from exc
    kept = circular_nms(dets, radii)
    save_detections_jsonl(kept, args.out)
    print(json.dumps({"in": len(dets), "kept": len(kept), "out": str(args.out)}))
    return 0


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(x) for x in text.lower().split("x"))
        return c, h, w
    except ValueError as exc:
        raise ConfigError(f"--input-shape must look like CxHxW, got {text!r}") from exc


def cmd_flops(args) -> int:
    g = load_graph(args.graph)
    report = analysis.count_flops(g, _parse_shape(args.input_shape))
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    else:
        print(json.dumps(report.to_json(), indent=2))
    return 0


def cmd_bench(args) -> int:
    cfg = pl.load_config(args.config)
    pipe = pl.Pipeline(cfg)
    _, frame = pl.generate_scene(cfg.seed, args.objects, cfg, pipe.rig)
    feats, depths = pipe.camera_stage(frame)
    state = {"t": 0.0}

    def stage():
        pipe.bev_forward(feats, depths, frame.ego_pose, state["t"])
        state["t"] += 0.5

    result = analysis.benchmark_pipeline(stage, frames=args.frames, warmup=args.warmup)
    out = result.to_json()
    out["flops_per_frame"] = pl.count_pipeline_flops(pipe).total
    print(json.dumps(out, indent=2))
    return 0


def cmd_demo_e2e(args) -> int:
    cfg = pl.load_config(args.config)
    pipe = pl.Pipeline(cfg)
    scene, frame = pl.generate_scene(args.seed, args.objects, cfg, pipe.rig)
    result = pipe.process_frame(frame)
    mass = result.bev.sum(axis=0)
    errors = []
    for obj in scene.objects:
        vox = cfg.grid.voxel_of(obj.x, obj.y, 0.0)
        if vox is None:
            continue
        ti, tj = divmod(vox, cfg.grid.ny)
        i0, i1 = max(0, ti - 4), min(cfg.grid.nx, ti + 5)
        j0, j1 = max(0, tj - 4), min(cfg.grid.ny, tj + 5)
        window = mass[i0:i1, j0:j1]
        pi, pj = np.unravel_index(int(np.argmax(window)), window.shape)
        errors.append(float(max(abs(pi + i0 - ti), abs(pj + j0 - tj))))
    print(
        json.dumps(
            {
                "objects": len(scene.objects),
                "detections": len(result.detections),
                "bev_total_mass": float(mass.sum()),
                "peak_voxel_errors": errors,
                "max_peak_error": max(errors) if errors else None,
                "detections_jsonl": [d.to_json() for d in result.detections],
            },
            indent=2,
        )
    )
    return 0


def cmd_mask_views(args) -> int:
    cfg = pl.load_config(args.config)
    pipe = pl.Pipeline(cfg)
    mask = {m.strip() for m in args.mask.split(",") if m.strip()}
    scene, frame = pl.generate_scene(args.seed, args.objects, cfg, pipe.rig)
    result = pl.run_pipeline(pipe, [frame], mask=mask)[0]
    per_cam = pipe.lut.voxels_per_camera()
    names = pipe.lut.cam_names
    mass = result.bev.sum(axis=0).ravel()
    exclusive = {}
    for idx, name in enumerate(names):
        others = [per_cam[k] for k in range(len(names)) if k != idx]
        other = np.unique(np.concatenate(others)) if others else np.empty(0, dtype=np.uint32)
        mine = np.setdiff1d(per_cam[idx], other, assume_unique=True)
        exclusive[name] = float(mass[mine.astype(np.int64)].sum())
    print(
        json.dumps(
            {
                "masked": sorted(mask),
                "objects": len(scene.objects),
                "detections": len(result.detections),
                "total_mass": float(mass.sum()),
                "exclusive_sector_mass": exclusive,
            },
            indent=2,
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    lut = sub.add_parser("lut", help="lookup table tools").add_subparsers(
        dest="subcommand", required=True
    )
    b = lut.add_parser("build", help="precompute a frustum->voxel table")
    b.add_argument("--rig", help="rig JSON (defaults to the config's rig)")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_lut_build)
    i = lut.add_parser("info", help="describe a table file")
    i.add_argument("file")
    i.set_defaults(func=cmd_lut_info)
    s = lut.add_parser("splat", help="splat per-camera tensors through a table")
    s.add_argument("--lut", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--cameras", required=True, help="JSON {name: {features, depth}}")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lut_splat)

    rp = sub.add_parser("reparam", help="re-parameterization passes").add_subparsers(
        dest="subcommand", required=True
    )
    r = rp.add_parser("run", help="collapse a graph to plain convolutions")
    r.add_argument("--graph", required=True)
    r.add_argument("--budget-E", type=float, required=True, dest="budget_E")
    r.add_argument("--budget-e", type=float, required=True, dest="budget_e")
    r.add_argument("--cap", type=int, default=2)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reparam_run)
    v = rp.add_parser("verify", help="numerically compare two graphs")
    v.add_argument("--original", required=True)
    v.add_argument("--fused", required=True)
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-4)
    v.add_argument("--height", type=int, default=16)
    v.add_argument("--width", type=int, default=16)
    v.set_defaults(func=cmd_reparam_verify)
    f = rp.add_parser("fuse-conv-bn", help="fold one BN into one conv")
    f.add_argument("--spec", required=True, help="JSON {conv: {...}, bn: {...}}")
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_reparam_fuse_conv_bn)
    m = rp.add_parser("merge-branches", help="collapse one multi-branch block")
    m.add_argument("--block", required=True, help="JSON block document")
    m.add_argument("--out-dir", required=True)
    m.set_defaults(func=cmd_reparam_merge_branches)

    n = sub.add_parser("nms", help="circular NMS over a JSONL detection file")
    n.add_argument("--dets", required=True)
    n.add_argument("--radii", required=True, help="JSON {class_id: radius}")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_nms)

    fl = sub.add_parser("flops", help="FLOPs report for a graph file")
    fl.add_argument("--graph", required=True)
    fl.add_argument("--input-shape", required=True, help="CxHxW")
    fl.add_argument("--format", choices=("json", "csv"), default="json")
    fl.set_defaults(func=cmd_flops)

    be = sub.add_parser("bench", help="time the model-forward stage")
    be.add_argument("--config", required=True)
    be.add_argument("--frames", type=int, default=100)
    be.add_argument("--warmup", type=int, default=5)
    be.add_argument("--objects", type=int, default=4)
    be.set_defaults(func=cmd_bench)

    demo = sub.add_parser("demo", help="demos").add_subparsers(dest="subcommand", required=True)
    e2e = demo.add_parser("e2e", help="synthetic scene through the full pipeline")
    e2e.add_argument("--config", required=True)
    e2e.add_argument("--seed", type=int, default=0)
    e2e.add_argument("--objects", type=int, default=4)
    e2e.set_defaults(func=cmd_demo_e2e)

    mv = sub.add_parser("mask-views", help="zero selected cameras and report BEV mass")
    mv.add_argument("--config", required=True)
    mv.add_argument("--mask", required=True, help="comma-separated camera names")
    mv.add_argument("--seed", type=int, default=0)
    mv.add_argument("--objects", type=int, default=4)
    mv.set_defaults(func=cmd_mask_views)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except BevkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
