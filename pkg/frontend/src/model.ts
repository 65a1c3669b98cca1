/**
 * Trained-model inference over the checkpoint + CLI interface.
 */

import { readFile } from "node:fs/promises";
import { join } from "node:path";

import { CamliError, readTensorFile, runCli, withScratchDir } from "./runner.js";
import { BoundArray } from "./tensor.js";

export interface ModelManifest {
  format: number;
  config: Record<string, unknown>;
  seed: number;
  step: number;
}

export interface FlowPrediction {
  flow2d: BoundArray;
  flow3d: BoundArray;
}

export class Model {
  private constructor(
    public readonly checkpointDir: string,
    public readonly manifest: ModelManifest,
  ) {}

  static async load(checkpointDir: string): Promise<Model> {
    let raw: string;
    try {
      raw = await readFile(join(checkpointDir, "manifest.json"), "utf-8");
    } catch {
      throw new CamliError(`${checkpointDir}: not a checkpoint (missing manifest.json)`, 2);
    }
    const manifest = JSON.parse(raw) as ModelManifest;
    if (manifest.format !== 1) {
      throw new CamliError(`${checkpointDir}: unsupported checkpoint format ${manifest.format}`, 2);
    }
    return new Model(checkpointDir, manifest);
  }

  /** Run inference for one scene of a dataset directory. iters=0 is the
   * zero-flow debug path. */
  async infer(dataDir: string, scene = 0, iters?: number): Promise<FlowPrediction> {
    return withScratchDir(async (dir) => {
      const argv = ["infer", "--ckpt", this.checkpointDir, "--data", dataDir,
                    "--scene", String(scene), "--out", dir];
      if (iters !== undefined) argv.push("--iters", String(iters));
      await runCli(argv);
      const [flow2d, flow3d] = await Promise.all([
        readTensorFile(join(dir, "flow2d.ten")),
        readTensorFile(join(dir, "flow3d.ten")),
      ]);
      return { flow2d, flow3d };
    });
  }
}

export const loadModel = Model.load;
