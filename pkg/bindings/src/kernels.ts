/**
 * Typed wrappers for the exported native kernels.
 *
 * Each call stages its inputs as native-format files in a scoped temp
 * directory, drives one CLI command, and decodes the outputs. Results are
 * numerically identical to in-process native calls: the files carry exact
 * bit patterns and the CLI performs no extra rounding.
 */

import { readFileSync, writeFileSync, mkdirSync } from "node:fs";
import { join } from "node:path";

import { CliRunner, NativeExit, RunnerOptions, withWorkdir } from "./runner.js";
import { decodeTensor, encodeTensor, Tensor } from "./tensor.js";

export interface ConvSpec {
  /** [outChannels, inChannels, kh, kw] */
  weights: Tensor;
  /** [outChannels] */
  bias: Tensor;
  stride: [number, number];
  padding: [number, number];
}

export interface BatchNormSpec {
  mean: Tensor;
  variance: Tensor;
  gamma: Tensor;
  beta: Tensor;
  eps: number;
}

export interface BranchBlock {
  main: { conv: ConvSpec; bn?: BatchNormSpec };
  oneByOne?: { conv: ConvSpec; bn?: BatchNormSpec };
  identityBn?: BatchNormSpec;
  activation?: "none" | "relu";
}

export interface GraphDesc {
  inputChannels: number;
  blocks: BranchBlock[];
}

export interface Detection {
  x: number;
  y: number;
  z: number;
  w: number;
  l: number;
  h: number;
  yaw: number;
  vx: number;
  vy: number;
  score: number;
  class_id: number;
}

export interface LutInfo {
  cameras: number;
  valid_cells: number;
  segments: number;
  fingerprint: string;
}

export interface EquivalenceReport {
  max_abs_error: number;
  trials: number;
  seed: number;
  tol: number;
  pass: boolean;
}

interface FusedConvOut {
  weights: string;
  bias: string;
  stride: [number, number];
  padding: [number, number];
}

function writeTensor(path: string, t: Tensor): void {
  writeFileSync(path, encodeTensor(t));
}

function readTensor(path: string): Tensor {
  return decodeTensor(readFileSync(path));
}

function writeConvEntry(dir: string, name: string, conv: ConvSpec) {
  writeTensor(join(dir, `${name}_w.bevt`), conv.weights);
  writeTensor(join(dir, `${name}_b.bevt`), conv.bias);
  return {
    weights: `${name}_w.bevt`,
    bias: `${name}_b.bevt`,
    stride: conv.stride,
    padding: conv.padding,
  };
}

function writeBnEntry(dir: string, name: string, bn: BatchNormSpec) {
  const fields: [string, Tensor][] = [
    ["mean", bn.mean],
    ["var", bn.variance],
    ["gamma", bn.gamma],
    ["beta", bn.beta],
  ];
  const entry: Record<string, unknown> = { eps: bn.eps };
  for (const [field, t] of fields) {
    writeTensor(join(dir, `${name}_${field}.bevt`), t);
    entry[field] = `${name}_${field}.bevt`;
  }
  return entry;
}

function blockEntry(dir: string, index: number, block: BranchBlock) {
  const tag = `block${String(index).padStart(3, "0")}`;
  const entry: Record<string, unknown> = {
    main: { conv: writeConvEntry(dir, `${tag}_main`, block.main.conv) },
    activation: block.activation ?? "none",
  };
  if (block.main.bn) {
    (entry.main as Record<string, unknown>).bn = writeBnEntry(dir, `${tag}_main_bn`, block.main.bn);
  }
  if (block.oneByOne) {
    const side: Record<string, unknown> = {
      conv: writeConvEntry(dir, `${tag}_1x1`, block.oneByOne.conv),
    };
    if (block.oneByOne.bn) side.bn = writeBnEntry(dir, `${tag}_1x1_bn`, block.oneByOne.bn);
    entry.one_by_one = side;
  }
  if (block.identityBn) {
    entry.identity_bn = writeBnEntry(dir, `${tag}_id_bn`, block.identityBn);
  }
  return entry;
}

/** Write a graph in the native JSON-plus-tensor-files layout. */
export function writeGraph(dir: string, graph: GraphDesc, name = "graph.json"): string {
  mkdirSync(dir, { recursive: true });
  const doc = {
    version: 1,
    input_channels: graph.inputChannels,
    blocks: graph.blocks.map((b, i) => blockEntry(dir, i, b)),
  };
  const path = join(dir, name);
  writeFileSync(path, JSON.stringify(doc, null, 2));
  return path;
}

/** All exported kernels behind one CLI boundary. */
export class Bevkit {
  private readonly cli: CliRunner;

  constructor(opts: RunnerOptions = {}) {
    this.cli = new CliRunner(opts);
  }

  /** Precompute the frustum-to-voxel lookup table for a pipeline config. */
  precomputeLut(configPath: string, outPath: string, rigPath?: string): LutInfo {
    const args = ["lut", "build", "--config", configPath, "--out", outPath];
    if (rigPath) args.push("--rig", rigPath);
    return this.cli.runJson<LutInfo & { out: string }>(args);
  }

  lutInfo(path: string): LutInfo & { grid: [number, number] } {
    return this.cli.runJson(["lut", "info", path]);
  }

  /** Splat per-camera features and depth distributions into the BEV grid. */
  splat(
    lutPath: string,
    configPath: string,
    cameras: Record<string, { features: Tensor; depth: Tensor }>,
  ): Tensor {
    return withWorkdir((dir) => {
      const manifest: Record<string, { features: string; depth: string }> = {};
      for (const [name, cam] of Object.entries(cameras)) {
        writeTensor(join(dir, `${name}_f.bevt`), cam.features);
        writeTensor(join(dir, `${name}_d.bevt`), cam.depth);
        manifest[name] = { features: `${name}_f.bevt`, depth: `${name}_d.bevt` };
      }
      const manifestPath = join(dir, "cameras.json");
      writeFileSync(manifestPath, JSON.stringify(manifest));
      const outPath = join(dir, "bev.bevt");
      this.cli.run([
        "lut", "splat",
        "--lut", lutPath,
        "--config", configPath,
        "--cameras", manifestPath,
        "--out", outPath,
      ]);
      return readTensor(outPath);
    });
  }

  /** Fold batchnorm statistics into a convolution's weights and bias. */
  fuseConvBn(conv: ConvSpec, bn: BatchNormSpec): ConvSpec {
    return withWorkdir((dir) => {
      const spec = {
        conv: writeConvEntry(dir, "conv", conv),
        bn: writeBnEntry(dir, "bn", bn),
      };
      const specPath = join(dir, "spec.json");
      writeFileSync(specPath, JSON.stringify(spec));
      const out = this.cli.runJson<FusedConvOut>([
        "reparam", "fuse-conv-bn", "--spec", specPath, "--out-dir", join(dir, "out"),
      ]);
      return {
        weights: readTensor(out.weights),
        bias: readTensor(out.bias),
        stride: out.stride,
        padding: out.padding,
      };
    });
  }

  /** Collapse a multi-branch block into a single plain convolution. */
  mergeBranches(block: BranchBlock): ConvSpec {
    return withWorkdir((dir) => {
      const entry = blockEntry(dir, 0, block);
      const blockPath = join(dir, "block.json");
      writeFileSync(blockPath, JSON.stringify(entry));
      const out = this.cli.runJson<FusedConvOut>([
        "reparam", "merge-branches", "--block", blockPath, "--out-dir", join(dir, "out"),
      ]);
      return {
        weights: readTensor(out.weights),
        bias: readTensor(out.bias),
        stride: out.stride,
        padding: out.padding,
      };
    });
  }

  /** Re-parameterize a graph file into cascaded plain convolutions. */
  reparamGraph(
    graphPath: string,
    outPath: string,
    budget: { postError: number; preError: number; cap?: number },
  ): { blocks: number; merge_budget_n: number } {
    const args = [
      "reparam", "run",
      "--graph", graphPath,
      "--budget-E", String(budget.postError),
      "--budget-e", String(budget.preError),
      "--out", outPath,
    ];
    if (budget.cap !== undefined) args.push("--cap", String(budget.cap));
    return this.cli.runJson(args);
  }

  /** Numerically compare two graph files on seeded random inputs. */
  verifyEquivalence(
    originalPath: string,
    fusedPath: string,
    opts: { trials?: number; seed?: number; tol?: number } = {},
  ): EquivalenceReport {
    return this.cli.runJson(
      [
        "reparam", "verify",
        "--original", originalPath,
        "--fused", fusedPath,
        "--trials", String(opts.trials ?? 20),
        "--seed", String(opts.seed ?? 0),
        "--tol", String(opts.tol ?? 1e-4),
      ],
      [NativeExit.Ok, NativeExit.Verification],
    );
  }

  /** Greedy same-class suppression by BEV center distance. */
  circularNms(dets: Detection[], radii: Record<number, number>): Detection[] {
    return withWorkdir((dir) => {
      const detsPath = join(dir, "dets.jsonl");
      writeFileSync(detsPath, dets.map((d) => JSON.stringify(d)).join("\n") + "\n");
      const radiiPath = join(dir, "radii.json");
      writeFileSync(radiiPath, JSON.stringify(radii));
      const outPath = join(dir, "kept.jsonl");
      this.cli.run(["nms", "--dets", detsPath, "--radii", radiiPath, "--out", outPath]);
      const lines = readFileSync(outPath, "utf8").split("\n").filter((l) => l.trim());
      return lines.map((l) => JSON.parse(l) as Detection);
    });
  }
}
