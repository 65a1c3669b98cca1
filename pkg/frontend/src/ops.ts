/**
 * Typed wrappers over the kernel registry, mirroring the CLI op names.
 * All wrappers are numerically identical to native execution (bitwise for
 * float64 inputs) because the native kernels do the computing.
 */

import { runOp } from "./runner.js";
import { BoundArray } from "./tensor.js";

export async function inverseDepthScaling(points: BoundArray): Promise<BoundArray> {
  return (await runOp("inverse_depth_scaling", [points], 1))[0];
}

export async function inverseDepthScalingInv(points: BoundArray): Promise<BoundArray> {
  return (await runOp("inverse_depth_scaling_inv", [points], 1))[0];
}

export async function fps(points: BoundArray, m: number, startIndex = 0): Promise<BoundArray> {
  return (await runOp("fps", [points], 1, { m, start_index: startIndex }))[0];
}

export interface KnnResult {
  indices: BoundArray;
  offsets: BoundArray;
}

export async function knn(queries: BoundArray, targets: BoundArray, k: number): Promise<KnnResult> {
  const [indices, offsets] = await runOp("knn", [queries, targets], 2, { k });
  return { indices, offsets };
}

export async function bilinearSample(
  fmap: BoundArray, coords: BoundArray, border: "clamp" | "zeros" = "clamp",
): Promise<BoundArray> {
  return (await runOp("bilinear_sample", [fmap, coords], 1, { border }))[0];
}

export interface ScoreNetWeights {
  w1: BoundArray;
  b1: BoundArray;
  w2: BoundArray;
  b2: BoundArray;
}

export async function learnableInterpolation(
  feats: BoundArray, pixels: BoundArray, height: number, width: number, k: number,
  scorenet: ScoreNetWeights,
): Promise<BoundArray> {
  return (await runOp(
    "learnable_interpolation",
    [feats, pixels, scorenet.w1, scorenet.b1, scorenet.w2, scorenet.b2],
    1, { height, width, k }))[0];
}

export async function buildCorr2d(f1: BoundArray, f2: BoundArray): Promise<BoundArray[]> {
  return runOp("build_corr2d", [f1, f2], 4);
}

export async function lookupCorr2d(
  f1: BoundArray, f2: BoundArray, flow: BoundArray, d = 9,
): Promise<BoundArray> {
  return (await runOp("lookup_corr2d", [f1, f2, flow], 1, { d }))[0];
}

export interface Corr3dPyramid {
  volumes: BoundArray[];
  positions: BoundArray[];
}

export async function buildCorr3d(
  g1: BoundArray, g2: BoundArray, positions2: BoundArray, poolK = 8,
): Promise<Corr3dPyramid> {
  const out = await runOp("build_corr3d", [g1, g2, positions2], 8, { pool_k: poolK });
  return { volumes: out.slice(0, 4), positions: out.slice(4) };
}

export interface MlpWeights {
  w1: BoundArray;
  b1: BoundArray;
  w2: BoundArray;
  b2: BoundArray;
}

export async function lookupCorr3d(
  g1: BoundArray, g2: BoundArray, positions2: BoundArray,
  positions1: BoundArray, flow: BoundArray,
  levelMlps: [MlpWeights, MlpWeights, MlpWeights, MlpWeights],
  k: number, poolK = 8,
): Promise<BoundArray> {
  const params = levelMlps.flatMap((m) => [m.w1, m.b1, m.w2, m.b2]);
  return (await runOp(
    "lookup_corr3d", [g1, g2, positions2, positions1, flow, ...params],
    1, { k, pool_k: poolK }))[0];
}

export async function knnUpsampleFlow(
  sparsePositions: BoundArray, sparseFlow: BoundArray, densePositions: BoundArray, k = 3,
): Promise<BoundArray> {
  return (await runOp("knn_upsample_flow", [sparsePositions, sparseFlow, densePositions], 1, { k }))[0];
}

export interface MetricReport {
  epe2d: number;
  acc1px: number;
  epe3d: number;
  acc05: number;
  accS: number;
  accR: number;
  outliers: number;
  count2d: number;
  count3d: number;
}

export async function computeMetrics(
  pred2d: BoundArray, gt2d: BoundArray, mask2d: BoundArray,
  pred3d: BoundArray, gt3d: BoundArray, mask3d: BoundArray,
): Promise<MetricReport> {
  const [vec] = await runOp("compute_metrics", [pred2d, gt2d, mask2d, pred3d, gt3d, mask3d], 1);
  const v = vec.data;
  return {
    epe2d: v[0], acc1px: v[1], epe3d: v[2], acc05: v[3],
    accS: v[4], accR: v[5], outliers: v[6],
    count2d: v[7], count3d: v[8],
  };
}
