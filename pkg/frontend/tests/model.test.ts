import { execFile } from "node:child_process";
import { mkdtemp, readFile, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";
import { beforeAll, describe, expect, it } from "vitest";

import { CamliError, loadModel, readTensorFile } from "../src/index.js";

const execFileAsync = promisify(execFile);

const SPEC = {
  seed: 3, num_bodies: 4, points_per_body: 16,
  intrinsics: [32.0, 32.0, 15.5, 15.5], image_size: [32, 32],
};
const MODEL = {
  image_size: [32, 32], num_points: 64, c2d: 16, c3d: 16,
  hidden: 16, context: 16, iters_train: 2, iters_eval: 2,
  lookup_window: 3, corr_channels: 4, knn_encoder: 8,
  knn_update: 4, knn_lookup: 2,
};

let work: string;
let dataDir: string;
let ckptDir: string;

async function cli(...args: string[]): Promise<string> {
  const { stdout } = await execFileAsync("python3", ["-m", "camli.cli", ...args],
                                         { maxBuffer: 64 * 1024 * 1024 });
  return stdout;
}

beforeAll(async () => {
  work = await mkdtemp(join(tmpdir(), "camli-model-"));
  dataDir = join(work, "data");
  ckptDir = join(work, "ckpt");
  const specPath = join(work, "spec.json");
  await writeFile(specPath, JSON.stringify(SPEC));
  await cli("gen", "--spec", specPath, "--out", dataDir, "--scenes", "3");
  const cfgPath = join(work, "cfg.json");
  await writeFile(cfgPath, JSON.stringify({ model: MODEL, train: { steps: 2, seed: 1 } }));
  await cli("train", "--data", dataDir, "--config", cfgPath, "--out", ckptDir,
            "--val-scenes", "1");
});

describe("model bindings", () => {
  it("loads the checkpoint manifest", async () => {
    const model = await loadModel(ckptDir);
    expect(model.manifest.step).toBe(2);
    expect(model.manifest.config.num_points).toBe(64);
  });

  it("inference is bitwise-equal to eval --dump-flows", async () => {
    const dump = join(work, "dump");
    await cli("eval", "--data", dataDir, "--ckpt", ckptDir, "--iters", "2",
              "--dump-flows", dump);
    const model = await loadModel(ckptDir);
    for (let scene = 0; scene < 3; scene++) {
      const pred = await model.infer(dataDir, scene, 2);
      const ref2 = await readTensorFile(join(dump, `flow2d_000${scene}.ten`));
      const ref3 = await readTensorFile(join(dump, `flow3d_000${scene}.ten`));
      expect(Array.from(pred.flow2d.data)).toEqual(Array.from(ref2.data));
      expect(Array.from(pred.flow3d.data)).toEqual(Array.from(ref3.data));
    }
  });

  it("zero-iteration debug call returns zero flows", async () => {
    const model = await loadModel(ckptDir);
    const pred = await model.infer(dataDir, 0, 0);
    expect(pred.flow2d.shape).toEqual([2, 32, 32]);
    expect(pred.flow3d.shape).toEqual([64, 3]);
    expect(pred.flow2d.data.every((v) => v === 0)).toBe(true);
    expect(pred.flow3d.data.every((v) => v === 0)).toBe(true);
  });

  it("re-load idempotence: two loads give identical outputs", async () => {
    const a = await loadModel(ckptDir);
    const b = await loadModel(ckptDir);
    const pa = await a.infer(dataDir, 1, 1);
    const pb = await b.infer(dataDir, 1, 1);
    expect(Array.from(pa.flow2d.data)).toEqual(Array.from(pb.flow2d.data));
    expect(Array.from(pa.flow3d.data)).toEqual(Array.from(pb.flow3d.data));
  });

  it("rejects a version-mismatched checkpoint with a typed error", async () => {
    const badDir = join(work, "badckpt");
    await execFileAsync("cp", ["-r", ckptDir, badDir]);
    const manifest = JSON.parse(await readFile(join(badDir, "manifest.json"), "utf-8"));
    manifest.format = 99;
    await writeFile(join(badDir, "manifest.json"), JSON.stringify(manifest));
    await expect(loadModel(badDir)).rejects.toBeInstanceOf(CamliError);
  });
});
