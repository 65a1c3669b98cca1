import { describe, expect, it } from "vitest";

import { decodeTensor, encodeTensor, float32Array, float64Array, TensorFormatError } from "../src/tensor.js";

function randomValues(n: number, seed: number): number[] {
  // xorshift-ish deterministic values, plenty for codec tests
  let s = seed >>> 0 || 1;
  const out: number[] = [];
  for (let i = 0; i < n; i++) {
    s ^= s << 13; s >>>= 0;
    s ^= s >> 17;
    s ^= s << 5; s >>>= 0;
    out.push((s / 0xffffffff) * 4 - 2);
  }
  return out;
}

describe("ten codec", () => {
  it("round-trips float64 bitwise", () => {
    for (let seed = 1; seed <= 5; seed++) {
      const arr = float64Array([3, 4], randomValues(12, seed));
      const back = decodeTensor(encodeTensor(arr));
      expect(back.dtype).toBe("float64");
      expect(back.shape).toEqual([3, 4]);
      expect(Array.from(back.data)).toEqual(Array.from(arr.data));
    }
  });

  it("round-trips float32 bitwise", () => {
    for (let seed = 1; seed <= 5; seed++) {
      const arr = float32Array([2, 5], randomValues(10, seed));
      const back = decodeTensor(encodeTensor(arr));
      expect(back.dtype).toBe("float32");
      expect(Array.from(back.data)).toEqual(Array.from(arr.data));
    }
  });

  it("preserves special values", () => {
    const arr = float64Array([4], [0, -0, Number.MIN_VALUE, 1e300]);
    const back = decodeTensor(encodeTensor(arr)).data as Float64Array;
    expect(Object.is(back[1], -0)).toBe(true);
    expect(back[2]).toBe(Number.MIN_VALUE);
    expect(back[3]).toBe(1e300);
  });

  it("rejects truncated payloads", () => {
    const bytes = encodeTensor(float64Array([2, 2], [1, 2, 3, 4]));
    expect(() => decodeTensor(bytes.subarray(0, bytes.length - 3))).toThrow(TensorFormatError);
  });

  it("rejects a missing header", () => {
    expect(() => decodeTensor(new Uint8Array([1, 2, 3]))).toThrow(TensorFormatError);
  });

  it("rejects shape/data mismatches on encode", () => {
    expect(() => encodeTensor(float64Array([3], [1, 2]))).toThrow(TensorFormatError);
  });
});
