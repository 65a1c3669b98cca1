/**
 * Subprocess transport to the native toolkit. Every call shells out to the
 * CLI; inputs and outputs cross the boundary as .ten files in a scratch
 * directory. Native diagnostics are re-raised as CamliError.
 */

import { execFile } from "node:child_process";
import { mkdtemp, readFile, rm, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";

import { BoundArray, decodeTensor, encodeTensor } from "./tensor.js";

const execFileAsync = promisify(execFile);

export class CamliError extends Error {
  constructor(message: string, public readonly exitCode: number) {
    super(message);
    this.name = "CamliError";
  }
}

function cliCommand(): string[] {
  const bin = process.env.CAMLI_BIN;
  if (bin && bin.length > 0) return bin.split(" ");
  return ["python3", "-m", "camli.cli"];
}

export async function runCli(args: string[]): Promise<string> {
  const [cmd, ...prefix] = cliCommand();
  try {
    const { stdout } = await execFileAsync(cmd, [...prefix, ...args], {
      maxBuffer: 64 * 1024 * 1024,
    });
    return stdout;
  } catch (e) {
    const err = e as { code?: number; stderr?: string; message?: string };
    const detail = (err.stderr ?? "").trim().replace(/^error:\s*/, "");
    throw new CamliError(detail || err.message || "camli CLI failed", err.code ?? -1);
  }
}

export async function withScratchDir<T>(fn: (dir: string) => Promise<T>): Promise<T> {
  const dir = await mkdtemp(join(tmpdir(), "camli-"));
  try {
    return await fn(dir);
  } finally {
    await rm(dir, { recursive: true, force: true });
  }
}

export async function writeTensorFile(path: string, arr: BoundArray): Promise<void> {
  await writeFile(path, encodeTensor(arr));
}

export async function readTensorFile(path: string): Promise<BoundArray> {
  return decodeTensor(new Uint8Array(await readFile(path)));
}

/** Run one registered kernel: writes inputs, invokes `camli op`, reads outputs. */
export async function runOp(
  name: string,
  inputs: BoundArray[],
  numOutputs: number,
  args?: Record<string, unknown>,
): Promise<BoundArray[]> {
  return withScratchDir(async (dir) => {
    const inPaths: string[] = [];
    for (let i = 0; i < inputs.length; i++) {
      const p = join(dir, `in_${i}.ten`);
      await writeTensorFile(p, inputs[i]);
      inPaths.push(p);
    }
    const outPaths = Array.from({ length: numOutputs }, (_, i) => join(dir, `out_${i}.ten`));
    const argv = ["op", "--name", name];
    if (inPaths.length > 0) argv.push("--in", ...inPaths);
    argv.push("--out", ...outPaths);
    if (args && Object.keys(args).length > 0) argv.push("--args", JSON.stringify(args));
    await runCli(argv);
    return Promise.all(outPaths.map(readTensorFile));
  });
}
