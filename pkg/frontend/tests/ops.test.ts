import { execFile } from "node:child_process";
import { mkdtemp, readFile, rm, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";
import { describe, expect, it } from "vitest";

import * as ops from "../src/ops.js";
import { CamliError, runOp } from "../src/runner.js";
import { BoundArray, decodeTensor, encodeTensor, float32Array, float64Array } from "../src/tensor.js";

const execFileAsync = promisify(execFile);

function rng(seed: number): () => number {
  let s = seed >>> 0 || 1;
  return () => {
    s ^= s << 13; s >>>= 0;
    s ^= s >> 17;
    s ^= s << 5; s >>>= 0;
    return s / 0xffffffff;
  };
}

function randArray(shape: number[], seed: number, lo = -1, hi = 1): BoundArray {
  const n = shape.reduce((a, b) => a * b, 1);
  const r = rng(seed);
  return float64Array(shape, Array.from({ length: n }, () => lo + (hi - lo) * r()));
}

function randPoints(n: number, seed: number): BoundArray {
  const r = rng(seed);
  const vals: number[] = [];
  for (let i = 0; i < n; i++) {
    vals.push(r() * 4 - 2, r() * 4 - 2, 0.5 + r() * 9);
  }
  return float64Array([n, 3], vals);
}

/** Independent transport: runs the CLI op with this test's own file IO. */
async function nativeOp(
  name: string, inputs: BoundArray[], numOutputs: number, args?: Record<string, unknown>,
): Promise<BoundArray[]> {
  const dir = await mkdtemp(join(tmpdir(), "camli-native-"));
  try {
    const inPaths: string[] = [];
    for (let i = 0; i < inputs.length; i++) {
      const p = join(dir, `i${i}.ten`);
      await writeFile(p, encodeTensor(inputs[i]));
      inPaths.push(p);
    }
    const outPaths = Array.from({ length: numOutputs }, (_, i) => join(dir, `o${i}.ten`));
    const argv = ["-m", "camli.cli", "op", "--name", name];
    if (inPaths.length) argv.push("--in", ...inPaths);
    argv.push("--out", ...outPaths);
    if (args) argv.push("--args", JSON.stringify(args));
    await execFileAsync("python3", argv);
    return Promise.all(outPaths.map(async (p) => decodeTensor(new Uint8Array(await readFile(p)))));
  } finally {
    await rm(dir, { recursive: true, force: true });
  }
}

function expectBitwiseEqual(a: BoundArray, b: BoundArray) {
  expect(a.dtype).toBe(b.dtype);
  expect(a.shape).toEqual(b.shape);
  expect(Array.from(a.data)).toEqual(Array.from(b.data));
}

describe("binding/native parity (bitwise)", () => {
  it("inverse_depth_scaling", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const pts = randPoints(12, seed);
      const got = await ops.inverseDepthScaling(pts);
      const [ref] = await nativeOp("inverse_depth_scaling", [pts], 1);
      expectBitwiseEqual(got, ref);
      // algebraic spot check: x/z and y/z are exactly rounded in both runtimes
      for (let i = 0; i < 12; i++) {
        expect(got.data[3 * i]).toBe(pts.data[3 * i] / pts.data[3 * i + 2]);
        expect(got.data[3 * i + 1]).toBe(pts.data[3 * i + 1] / pts.data[3 * i + 2]);
      }
      const back = await ops.inverseDepthScalingInv(got);
      for (let i = 0; i < back.data.length; i++) {
        expect(Math.abs(back.data[i] - pts.data[i])).toBeLessThan(1e-12);
      }
    }
  });

  it("ids of the unit-depth origin point is itself", async () => {
    const out = await ops.inverseDepthScaling(float64Array([1, 3], [0, 0, 1]));
    expect(Array.from(out.data)).toEqual([0, 0, 1]);
  });

  it("fps", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const pts = randPoints(24, 100 + seed);
      const got = await ops.fps(pts, 6);
      const [ref] = await nativeOp("fps", [pts], 1, { m: 6, start_index: 0 });
      expectBitwiseEqual(got, ref);
      expect(got.data[0]).toBe(0);
    }
  });

  it("knn matches native bitwise and a TS brute force on indices", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const q = randPoints(16, 200 + seed);
      const t = randPoints(32, 300 + seed);
      const got = await ops.knn(q, t, 4);
      const [refIdx, refOff] = await nativeOp("knn", [q, t], 2, { k: 4 });
      expectBitwiseEqual(got.indices, refIdx);
      expectBitwiseEqual(got.offsets, refOff);
      for (let qi = 0; qi < 16; qi++) {
        const d: [number, number][] = [];
        for (let ti = 0; ti < 32; ti++) {
          let s = 0;
          for (let c = 0; c < 3; c++) {
            const diff = t.data[3 * ti + c] - q.data[3 * qi + c];
            s += diff * diff;
          }
          d.push([s, ti]);
        }
        d.sort((a, b) => a[0] - b[0] || a[1] - b[1]);
        for (let k = 0; k < 4; k++) expect(got.indices.data[4 * qi + k]).toBe(d[k][1]);
      }
    }
  });

  it("bilinear_sample in float64 and float32", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const fmap = randArray([3, 6, 7], 400 + seed);
      const r = rng(500 + seed);
      const coords = float64Array([8, 2], Array.from({ length: 16 }, () => r() * 5));
      const got = await ops.bilinearSample(fmap, coords);
      const [ref] = await nativeOp("bilinear_sample", [fmap, coords], 1, { border: "clamp" });
      expectBitwiseEqual(got, ref);
    }
    const fmap32 = float32Array([2, 4, 4], Array.from({ length: 32 }, (_, i) => Math.sin(i)));
    const coords32 = float32Array([3, 2], [0.5, 0.5, 1.25, 2.5, 3.0, 3.0]);
    const got32 = await ops.bilinearSample(fmap32, coords32);
    const [ref32] = await nativeOp("bilinear_sample", [fmap32, coords32], 1, { border: "clamp" });
    expectBitwiseEqual(got32, ref32);
  });

  it("learnable_interpolation", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const r = rng(600 + seed);
      const feats = randArray([10, 4], 700 + seed);
      const pixels = float64Array([10, 2], Array.from({ length: 20 }, () => r() * 5));
      const sn = {
        w1: randArray([2, 6], 800 + seed, -0.5, 0.5),
        b1: randArray([6], 810 + seed, -0.1, 0.1),
        w2: randArray([6, 1], 820 + seed, -0.5, 0.5),
        b2: randArray([1], 830 + seed, -0.1, 0.1),
      };
      const got = await ops.learnableInterpolation(feats, pixels, 6, 5, 3, sn);
      const [ref] = await nativeOp(
        "learnable_interpolation", [feats, pixels, sn.w1, sn.b1, sn.w2, sn.b2],
        1, { height: 6, width: 5, k: 3 });
      expectBitwiseEqual(got, ref);
      expect(got.shape).toEqual([4, 6, 5]);
    }
  });

  it("build_corr2d and lookup_corr2d", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const f1 = randArray([3, 8, 8], 900 + seed);
      const f2 = randArray([3, 8, 8], 910 + seed);
      const levels = await ops.buildCorr2d(f1, f2);
      const ref = await nativeOp("build_corr2d", [f1, f2], 4);
      expect(levels.length).toBe(4);
      levels.forEach((lvl, i) => expectBitwiseEqual(lvl, ref[i]));

      const flow = randArray([2, 8, 8], 920 + seed, -2, 2);
      const feat = await ops.lookupCorr2d(f1, f2, flow, 3);
      const [refFeat] = await nativeOp("lookup_corr2d", [f1, f2, flow], 1, { d: 3 });
      expectBitwiseEqual(feat, refFeat);
      expect(feat.shape).toEqual([8, 8, 36]);
    }
  });

  it("build_corr3d and lookup_corr3d", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const g1 = randArray([16, 5], 1000 + seed);
      const g2 = randArray([16, 5], 1010 + seed);
      const pos2 = randPoints(16, 1020 + seed);
      const pyr = await ops.buildCorr3d(g1, g2, pos2);
      const ref = await nativeOp("build_corr3d", [g1, g2, pos2], 8);
      pyr.volumes.forEach((v, i) => expectBitwiseEqual(v, ref[i]));
      pyr.positions.forEach((p, i) => expectBitwiseEqual(p, ref[4 + i]));

      const pos1 = randPoints(16, 1030 + seed);
      const flow = randArray([16, 3], 1040 + seed, -0.05, 0.05);
      const mk = (s: number) => ({
        w1: randArray([4, 6], s, -0.5, 0.5), b1: randArray([6], s + 1, -0.1, 0.1),
        w2: randArray([6, 3], s + 2, -0.5, 0.5), b2: randArray([3], s + 3, -0.1, 0.1),
      });
      const mlps: [ops.MlpWeights, ops.MlpWeights, ops.MlpWeights, ops.MlpWeights] =
        [mk(1100 + seed), mk(1110 + seed), mk(1120 + seed), mk(1130 + seed)];
      const got = await ops.lookupCorr3d(g1, g2, pos2, pos1, flow, mlps, 2);
      const params = mlps.flatMap((m) => [m.w1, m.b1, m.w2, m.b2]);
      const [refL] = await nativeOp(
        "lookup_corr3d", [g1, g2, pos2, pos1, flow, ...params], 1, { k: 2, pool_k: 8 });
      expectBitwiseEqual(got, refL);
      expect(got.shape).toEqual([16, 12]);
    }
  });

  it("knn_upsample_flow", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const sparsePos = randPoints(8, 1200 + seed);
      const sparseFlow = randArray([8, 3], 1210 + seed);
      const densePos = randPoints(20, 1220 + seed);
      const got = await ops.knnUpsampleFlow(sparsePos, sparseFlow, densePos, 3);
      const [ref] = await nativeOp("knn_upsample_flow", [sparsePos, sparseFlow, densePos], 1, { k: 3 });
      expectBitwiseEqual(got, ref);
    }
  });

  it("compute_metrics agrees with a TS reference", async () => {
    for (let seed = 1; seed <= 5; seed++) {
      const r = rng(1300 + seed);
      const n = 30;
      const gt3 = randArray([n, 3], 1310 + seed, -0.3, 0.3);
      const pred3 = float64Array([n, 3], Array.from(gt3.data, (v) => v + (r() - 0.5) * 0.2));
      const gt2 = randArray([2, 4, 5], 1320 + seed, -2, 2);
      const pred2 = float64Array([2, 4, 5], Array.from(gt2.data, (v) => v + (r() - 0.5)));
      const mask2 = float64Array([4, 5], Array.from({ length: 20 }, () => 1));
      const mask3 = float64Array([n], Array.from({ length: n }, () => 1));
      const rep = await ops.computeMetrics(pred2, gt2, mask2, pred3, gt3, mask3);

      let errSum = 0;
      let acc = 0;
      for (let i = 0; i < n; i++) {
        let e = 0, g = 0;
        for (let c = 0; c < 3; c++) {
          const d = pred3.data[3 * i + c] - gt3.data[3 * i + c];
          e += d * d;
          g += gt3.data[3 * i + c] ** 2;
        }
        const err = Math.sqrt(e);
        const rel = Math.sqrt(g) > 0 ? err / Math.sqrt(g) : (err === 0 ? 0 : Infinity);
        errSum += err;
        if (err < 0.05 || rel < 0.05) acc += 1;
      }
      expect(Math.abs(rep.epe3d - errSum / n)).toBeLessThan(1e-12);
      expect(Math.abs(rep.accS - acc / n)).toBeLessThan(1e-12);
      expect(rep.count3d).toBe(n);
    }
  });

  it("translates native errors into typed exceptions with the core message", async () => {
    const pts = float64Array([2, 3], [0, 0, 1, 0, 0, -1]);
    await expect(ops.inverseDepthScaling(pts)).rejects.toBeInstanceOf(CamliError);
    await expect(ops.inverseDepthScaling(pts)).rejects.toThrow(/z > 0|inverse depth/);
    await expect(runOp("no_such_op", [], 1)).rejects.toThrow(/unknown op/);
  });
});
