/**
 * Codec for the ".ten" tensor file format: one UTF-8 JSON line
 * {"dtype", "shape"} terminated by '\n', followed by the raw values as
 * little-endian IEEE-754 (32- or 64-bit as tagged), row-major.
 */

export type DType = "float32" | "float64";

export interface BoundArray {
  dtype: DType;
  shape: number[];
  data: Float32Array | Float64Array;
}

export class TensorFormatError extends Error {}

const ITEM_SIZE: Record<DType, number> = { float32: 4, float64: 8 };

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function float64Array(shape: number[], values: ArrayLike<number>): BoundArray {
  return { dtype: "float64", shape, data: Float64Array.from(values) };
}

export function float32Array(shape: number[], values: ArrayLike<number>): BoundArray {
  return { dtype: "float32", shape, data: Float32Array.from(values) };
}

export function encodeTensor(arr: BoundArray): Uint8Array {
  const n = numel(arr.shape);
  if (arr.data.length !== n) {
    throw new TensorFormatError(
      `data length ${arr.data.length} does not match shape [${arr.shape}]`);
  }
  const header = new TextEncoder().encode(
    JSON.stringify({ dtype: arr.dtype, shape: arr.shape }) + "\n");
  const itemSize = ITEM_SIZE[arr.dtype];
  const out = new Uint8Array(header.length + n * itemSize);
  out.set(header, 0);
  const view = new DataView(out.buffer, header.length);
  if (arr.dtype === "float32") {
    for (let i = 0; i < n; i++) view.setFloat32(i * 4, arr.data[i], true);
  } else {
    for (let i = 0; i < n; i++) view.setFloat64(i * 8, arr.data[i], true);
  }
  return out;
}

export function decodeTensor(bytes: Uint8Array): BoundArray {
  const nl = bytes.indexOf(0x0a);
  if (nl < 0) throw new TensorFormatError("missing header line");
  let header: { dtype: DType; shape: number[] };
  try {
    header = JSON.parse(new TextDecoder().decode(bytes.subarray(0, nl)));
  } catch (e) {
    throw new TensorFormatError(`malformed header: ${e}`);
  }
  const { dtype, shape } = header;
  if (dtype !== "float32" && dtype !== "float64") {
    throw new TensorFormatError(`unknown dtype tag ${JSON.stringify(dtype)}`);
  }
  const n = numel(shape);
  const payload = bytes.subarray(nl + 1);
  const itemSize = ITEM_SIZE[dtype];
  if (payload.length !== n * itemSize) {
    throw new TensorFormatError(
      `payload is ${payload.length} bytes, expected ${n * itemSize} for shape [${shape}]`);
  }
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  if (dtype === "float32") {
    const data = new Float32Array(n);
    for (let i = 0; i < n; i++) data[i] = view.getFloat32(i * 4, true);
    return { dtype, shape, data };
  }
  const data = new Float64Array(n);
  for (let i = 0; i < n; i++) data[i] = view.getFloat64(i * 8, true);
  return { dtype, shape, data };
}
