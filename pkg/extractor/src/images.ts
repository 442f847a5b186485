/**
 * Image and label-mask decoding. RGB(A) PNGs become [H, W, 3] float arrays
 * in [0, 1]; grayscale label PNGs become int32 class-id grids (pixel value =
 * class id, 255 = ignore).
 */

import * as fs from "node:fs";
import { PNG } from "pngjs";

export interface DecodedImage {
  height: number;
  width: number;
  /** row-major [H, W, 3] in [0, 1] */
  data: Float32Array;
}

export function readImagePng(filePath: string): DecodedImage {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const { width, height } = png;
  const out = new Float32Array(height * width * 3);
  for (let i = 0; i < height * width; i++) {
    out[i * 3] = png.data[i * 4] / 255;
    out[i * 3 + 1] = png.data[i * 4 + 1] / 255;
    out[i * 3 + 2] = png.data[i * 4 + 2] / 255;
  }
  return { height, width, data: out };
}

export function readLabelPng(filePath: string): { height: number; width: number; data: Int32Array } {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const { width, height } = png;
  const out = new Int32Array(height * width);
  for (let i = 0; i < height * width; i++) {
    out[i] = png.data[i * 4]; // red channel carries the class id
  }
  return { height, width, data: out };
}

export function writeRgbPng(filePath: string, height: number, width: number, rgb: Uint8Array): void {
  const png = new PNG({ width, height });
  for (let i = 0; i < height * width; i++) {
    png.data[i * 4] = rgb[i * 3];
    png.data[i * 4 + 1] = rgb[i * 3 + 1];
    png.data[i * 4 + 2] = rgb[i * 3 + 2];
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(filePath, PNG.sync.write(png));
}

/** Nearest-neighbor resize with half-pixel centers, for label grids. */
export function resizeNearestInt(
  data: Int32Array,
  srcH: number,
  srcW: number,
  dstH: number,
  dstW: number,
): Int32Array {
  const out = new Int32Array(dstH * dstW);
  for (let r = 0; r < dstH; r++) {
    const sr = Math.min(Math.floor(((r + 0.5) * srcH) / dstH), srcH - 1);
    for (let c = 0; c < dstW; c++) {
      const sc = Math.min(Math.floor(((c + 0.5) * srcW) / dstW), srcW - 1);
      out[r * dstW + c] = data[sr * srcW + sc];
    }
  }
  return out;
}
