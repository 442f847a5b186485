/**
 * NPY v1.0 serialization, byte-compatible with numpy's writer.
 *
 * Only the two dtypes the scoring engine accepts are supported: '<f4' and
 * '<i4', little-endian, C-contiguous. Headers are padded to 64-byte
 * alignment exactly like numpy pads them, so files written here are
 * byte-identical to `numpy.save` output for the same data.
 */

import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

const MAGIC = Buffer.from("\x93NUMPY", "latin1");

export type NpyDescr = "<f4" | "<i4";

export interface NpyArray {
  descr: NpyDescr;
  shape: number[];
  data: Float32Array | Int32Array;
}

function headerBytes(descr: NpyDescr, shape: number[]): Buffer {
  const shapeStr = shape.length === 1 ? `(${shape[0]},)` : `(${shape.join(", ")})`;
  const dict = `{'descr': '${descr}', 'fortran_order': False, 'shape': ${shapeStr}, }`;
  const unpadded = MAGIC.length + 2 + 2 + dict.length + 1;
  const padding = (64 - (unpadded % 64)) % 64;
  const header = dict + " ".repeat(padding) + "\n";
  const out = Buffer.alloc(MAGIC.length + 2 + 2 + header.length);
  MAGIC.copy(out, 0);
  out[6] = 1; // version 1.0
  out[7] = 0;
  out.writeUInt16LE(header.length, 8);
  out.write(header, 10, "latin1");
  return out;
}

export function encodeNpy(array: NpyArray): Buffer {
  const count = array.shape.reduce((a, b) => a * b, 1);
  if (count !== array.data.length) {
    throw new Error(`shape ${JSON.stringify(array.shape)} does not match ${array.data.length} elements`);
  }
  if (os.endianness() !== "LE") {
    throw new Error("NPY writer requires a little-endian host");
  }
  const header = headerBytes(array.descr, array.shape);
  const body = Buffer.from(array.data.buffer, array.data.byteOffset, array.data.byteLength);
  return Buffer.concat([header, body]);
}

/** Write atomically: temp file in the target directory, then rename. */
export function writeNpy(filePath: string, array: NpyArray): void {
  const dir = path.dirname(filePath);
  fs.mkdirSync(dir, { recursive: true });
  const tmp = path.join(dir, `.${path.basename(filePath)}.${process.pid}.tmp`);
  fs.writeFileSync(tmp, encodeNpy(array));
  fs.renameSync(tmp, filePath);
}

export function decodeNpy(buffer: Buffer): NpyArray {
  if (!buffer.subarray(0, 6).equals(MAGIC)) {
    throw new Error("not an NPY file (bad magic)");
  }
  if (buffer[6] !== 1 || buffer[7] !== 0) {
    throw new Error(`unsupported NPY version ${buffer[6]}.${buffer[7]}`);
  }
  const headerLen = buffer.readUInt16LE(8);
  const header = buffer.subarray(10, 10 + headerLen).toString("latin1");
  const descrMatch = header.match(/'descr':\s*'([^']+)'/);
  const fortranMatch = header.match(/'fortran_order':\s*(True|False)/);
  const shapeMatch = header.match(/'shape':\s*\(([^)]*)\)/);
  if (!descrMatch || !fortranMatch || !shapeMatch) {
    throw new Error("malformed NPY header");
  }
  if (fortranMatch[1] === "True") {
    throw new Error("fortran_order tensors not supported");
  }
  const descr = descrMatch[1] as NpyDescr;
  if (descr !== "<f4" && descr !== "<i4") {
    throw new Error(`unsupported dtype ${descr}`);
  }
  const shape = shapeMatch[1]
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => parseInt(s, 10));
  const count = shape.reduce((a, b) => a * b, 1);
  const body = buffer.subarray(10 + headerLen);
  if (body.byteLength < count * 4) {
    throw new Error(`truncated data (${body.byteLength} bytes for ${count} elements)`);
  }
  const aligned = Buffer.from(body.subarray(0, count * 4)); // copy to realign
  const data =
    descr === "<f4"
      ? new Float32Array(aligned.buffer, aligned.byteOffset, count)
      : new Int32Array(aligned.buffer, aligned.byteOffset, count);
  return { descr, shape, data };
}

export function readNpy(filePath: string): NpyArray {
  return decodeNpy(fs.readFileSync(filePath));
}

export function assertFinite(array: NpyArray, context: string): void {
  if (array.descr !== "<f4") return;
  const data = array.data as Float32Array;
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`${context}: non-finite value at flat index ${i}`);
    }
  }
}
