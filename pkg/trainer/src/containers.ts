/**
 * Binary container formats shared with the solver package.
 *
 * Grammar: 4-byte magic, little-endian u32 version, u64 manifest length,
 * canonical JSON manifest (sorted keys, no whitespace), then a payload of
 * row-major little-endian tensors addressed by byte offsets relative to the
 * payload start.  The writers here emit exactly the same canonical bytes as
 * the solver side, so containers round-trip byte-identically.
 */

import * as fs from "node:fs";

export const MAGIC_TENSORPACK = "TPK0";
export const MAGIC_ONETPACK = "ONPK";
export const VERSION = 1;

export class ContainerError extends Error {}

export type Dtype = "f64le" | "i64le" | "i8";

const ITEM_SIZE: Record<Dtype, number> = { f64le: 8, i64le: 8, i8: 1 };

/** JSON with recursively sorted keys and compact separators. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value === "number" || typeof value === "boolean") {
    return JSON.stringify(value);
  }
  if (typeof value === "string") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  const obj = value as Record<string, unknown>;
  const keys = Object.keys(obj).sort();
  return "{" + keys.map((k) => JSON.stringify(k) + ":" + canonicalJson(obj[k])).join(",") + "}";
}

export function packContainer(magic: string, manifest: unknown, payload: Buffer): Buffer {
  const mbytes = Buffer.from(canonicalJson(manifest), "utf-8");
  const head = Buffer.alloc(16);
  head.write(magic, 0, 4, "ascii");
  head.writeUInt32LE(VERSION, 4);
  head.writeBigUInt64LE(BigInt(mbytes.length), 8);
  return Buffer.concat([head, mbytes, payload]);
}

export function unpackContainer(data: Buffer, magic: string): { manifest: any; payload: Buffer } {
  if (data.length < 16) throw new ContainerError("container truncated before header");
  if (data.toString("ascii", 0, 4) !== magic) {
    throw new ContainerError(`bad magic ${data.toString("ascii", 0, 4)}, expected ${magic}`);
  }
  const version = data.readUInt32LE(4);
  if (version !== VERSION) throw new ContainerError(`unsupported container version ${version}`);
  const mlen = Number(data.readBigUInt64LE(8));
  if (16 + mlen > data.length) throw new ContainerError("container truncated inside manifest");
  let manifest: any;
  try {
    manifest = JSON.parse(data.toString("utf-8", 16, 16 + mlen));
  } catch (err) {
    throw new ContainerError(`manifest is not valid JSON: ${err}`);
  }
  return { manifest, payload: data.subarray(16 + mlen) };
}

export interface Tensor {
  dtype: Dtype;
  shape: number[];
  /** float64 values regardless of storage dtype */
  data: Float64Array;
}

export function tensorLength(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function readTensor(payload: Buffer, dtype: Dtype, shape: number[], offset: number): Tensor {
  const count = tensorLength(shape);
  const nbytes = count * ITEM_SIZE[dtype];
  if (offset < 0 || offset + nbytes > payload.length) {
    throw new ContainerError("tensor extends past the end of the payload");
  }
  const data = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    if (dtype === "f64le") data[i] = payload.readDoubleLE(offset + 8 * i);
    else if (dtype === "i64le") data[i] = Number(payload.readBigInt64LE(offset + 8 * i));
    else data[i] = payload.readInt8(offset + i);
  }
  return { dtype, shape: shape.slice(), data };
}

export function tensorBytes(t: Tensor): Buffer {
  const count = tensorLength(t.shape);
  const buf = Buffer.alloc(count * ITEM_SIZE[t.dtype]);
  for (let i = 0; i < count; i++) {
    if (t.dtype === "f64le") buf.writeDoubleLE(t.data[i], 8 * i);
    else if (t.dtype === "i64le") buf.writeBigInt64LE(BigInt(Math.round(t.data[i])), 8 * i);
    else buf.writeInt8(t.data[i], i);
  }
  return buf;
}

export function writeTensorPack(
  path: string | null,
  tensors: Record<string, Tensor>,
  meta?: unknown,
): Buffer {
  const names = Object.keys(tensors).sort();
  const entries: Record<string, { dtype: Dtype; shape: number[]; offset: number }> = {};
  const chunks: Buffer[] = [];
  let offset = 0;
  for (const name of names) {
    const t = tensors[name];
    const bytes = tensorBytes(t);
    entries[name] = { dtype: t.dtype, shape: t.shape.slice(), offset };
    offset += bytes.length;
    chunks.push(bytes);
  }
  const manifest: any = { tensors: entries };
  if (meta !== undefined && meta !== null) manifest.meta = meta;
  const blob = packContainer(MAGIC_TENSORPACK, manifest, Buffer.concat(chunks));
  if (path !== null) fs.writeFileSync(path, blob);
  return blob;
}

export function readTensorPack(source: string | Buffer): { tensors: Record<string, Tensor>; meta: any } {
  const data = Buffer.isBuffer(source) ? source : fs.readFileSync(source);
  const { manifest, payload } = unpackContainer(data, MAGIC_TENSORPACK);
  if (!manifest.tensors) throw new ContainerError("tensor container without a tensors table");
  const tensors: Record<string, Tensor> = {};
  const spans: Array<[number, number]> = [];
  for (const [name, entry] of Object.entries<any>(manifest.tensors)) {
    tensors[name] = readTensor(payload, entry.dtype, entry.shape, entry.offset);
    spans.push([entry.offset, entry.offset + tensorLength(entry.shape) * ITEM_SIZE[entry.dtype as Dtype]]);
  }
  spans.sort((a, b) => a[0] - b[0]);
  for (let i = 1; i < spans.length; i++) {
    if (spans[i][0] < spans[i - 1][1]) throw new ContainerError("overlapping tensor offsets");
  }
  return { tensors, meta: manifest.meta ?? null };
}
