/**
 * Codec for the native tensor file format.
 *
 * Layout: magic "BEVT0001" (8 bytes) | u8 rank + 7 pad bytes |
 * rank x u64 little-endian extents | raw little-endian float32 data.
 *
 * Decoding returns a zero-copy Float32Array view whenever the payload is
 * 4-byte aligned on a little-endian host; otherwise the data is copied.
 * Views never outlive their backing buffer implicitly: the buffer is owned
 * by the returned tensor.
 */

import { endianness } from "node:os";

const MAGIC = "BEVT0001";
const MAX_RANK = 4;

export interface Tensor {
  shape: number[];
  /** Contiguous row-major float32 values, length = product(shape). */
  data: Float32Array;
}

export function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

/** Build a tensor, validating shape/data consistency. Data is not copied. */
export function tensor(shape: number[], data: Float32Array): Tensor {
  if (shape.length < 1 || shape.length > MAX_RANK) {
    throw new RangeError(`tensor rank must be 1..${MAX_RANK}, got ${shape.length}`);
  }
  if (shape.some((e) => !Number.isInteger(e) || e < 1)) {
    throw new RangeError(`tensor extents must be positive integers, got ${shape}`);
  }
  if (elementCount(shape) !== data.length) {
    throw new RangeError(
      `data length ${data.length} does not match shape ${shape} (${elementCount(shape)})`,
    );
  }
  return { shape: [...shape], data };
}

/** Encode into a fresh buffer; the input array is never modified or aliased. */
export function encodeTensor(t: Tensor): Uint8Array {
  const rank = t.shape.length;
  const headerBytes = 16 + 8 * rank;
  const out = new Uint8Array(headerBytes + 4 * t.data.length);
  const view = new DataView(out.buffer);
  for (let i = 0; i < 8; i++) out[i] = MAGIC.charCodeAt(i);
  out[8] = rank;
  for (let i = 0; i < rank; i++) {
    view.setBigUint64(16 + 8 * i, BigInt(t.shape[i]), true);
  }
  for (let i = 0; i < t.data.length; i++) {
    view.setFloat32(headerBytes + 4 * i, t.data[i], true);
  }
  return out;
}

/**
 * Decode a tensor file image. Zero-copy when the float payload is 4-byte
 * aligned within the source buffer and the host is little-endian.
 */
export function decodeTensor(bytes: Uint8Array): Tensor {
  if (bytes.length < 16) {
    throw new Error(`tensor image too short (${bytes.length} bytes)`);
  }
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== MAGIC.charCodeAt(i)) {
      throw new Error("bad tensor magic; not a BEVT0001 file");
    }
  }
  const rank = bytes[8];
  if (rank < 1 || rank > MAX_RANK) {
    throw new Error(`bad tensor rank ${rank}`);
  }
  const headerBytes = 16 + 8 * rank;
  if (bytes.length < headerBytes) {
    throw new Error("truncated tensor header");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const shape: number[] = [];
  for (let i = 0; i < rank; i++) {
    const extent = view.getBigUint64(16 + 8 * i, true);
    if (extent < 1n || extent > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new Error(`bad tensor extent ${extent}`);
    }
    shape.push(Number(extent));
  }
  const count = elementCount(shape);
  if (bytes.length !== headerBytes + 4 * count) {
    throw new Error(
      `tensor payload is ${bytes.length - headerBytes} bytes, expected ${4 * count}`,
    );
  }
  const payloadOffset = bytes.byteOffset + headerBytes;
  let data: Float32Array;
  if (payloadOffset % 4 === 0 && endianness() === "LE") {
    data = new Float32Array(bytes.buffer, payloadOffset, count);
  } else {
    data = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      data[i] = view.getFloat32(headerBytes + 4 * i, true);
    }
  }
  return { shape, data };
}

/** Coerce arbitrary numbers into a fresh float32 tensor (always a copy). */
export function tensorFrom(shape: number[], values: ArrayLike<number>): Tensor {
  return tensor(shape, Float32Array.from(values));
}
