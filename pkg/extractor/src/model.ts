/**
 * A small hierarchical segmentation network with an attention block, built
 * from tfjs core ops so every intermediate tensor is hookable by name.
 *
 * Architecture: four stride-2 conv stages; a single-head self-attention
 * block over the stage-3 grid (query/key/value 1x1 projections); a 1x1
 * classification head on the attention output, bilinearly upsampled back to
 * input resolution for per-pixel logits.
 *
 * Checkpoints are plain directories (model.json + one NPY file per weight),
 * created with a seeded generator so a given (modelId, seed) always yields
 * the same parameters and therefore byte-identical extractions.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";

import { NpyArray, readNpy, writeNpy } from "./npy.js";

export const STAGE_CHANNELS = [8, 12, 16, 24];
export const ATTN_CHANNELS = 16; // projection width on the stage-3 grid

export interface CheckpointMeta {
  modelId: string;
  numClasses: number;
  seed: number;
  format: "dnp-extractor-checkpoint-v1";
}

/** Deterministic float PRNG (splitmix-style scramble, mulberry32 core). */
export function seededRandom(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function heNormal(rand: () => number, shape: number[], fanIn: number): Float32Array {
  const count = shape.reduce((a, b) => a * b, 1);
  const out = new Float32Array(count);
  const scale = Math.sqrt(2.0 / fanIn);
  for (let i = 0; i < count; i += 2) {
    // Box-Muller; rand() is in [0, 1), shift to (0, 1]
    const u = 1.0 - rand();
    const v = rand();
    const r = Math.sqrt(-2.0 * Math.log(u)) * scale;
    out[i] = Math.fround(r * Math.cos(2.0 * Math.PI * v));
    if (i + 1 < count) out[i + 1] = Math.fround(r * Math.sin(2.0 * Math.PI * v));
  }
  return out;
}

interface WeightSpec {
  name: string;
  shape: number[];
  fanIn: number;
}

function weightSpecs(numClasses: number): WeightSpec[] {
  const specs: WeightSpec[] = [];
  let inChannels = 3;
  STAGE_CHANNELS.forEach((outChannels, i) => {
    specs.push({ name: `stage${i + 1}.kernel`, shape: [3, 3, inChannels, outChannels], fanIn: 9 * inChannels });
    specs.push({ name: `stage${i + 1}.bias`, shape: [outChannels], fanIn: 1 });
    inChannels = outChannels;
  });
  const s3 = STAGE_CHANNELS[2];
  for (const proj of ["query", "keys", "values"]) {
    specs.push({ name: `attn1.${proj}.kernel`, shape: [1, 1, s3, ATTN_CHANNELS], fanIn: s3 });
  }
  specs.push({ name: "head.kernel", shape: [1, 1, ATTN_CHANNELS, numClasses], fanIn: ATTN_CHANNELS });
  specs.push({ name: "head.bias", shape: [numClasses], fanIn: 1 });
  return specs;
}

export class SegmentationModel {
  private constructor(
    readonly meta: CheckpointMeta,
    private readonly weights: Map<string, tf.Tensor>,
  ) {}

  static build(modelId: string, seed: number, numClasses = 5): SegmentationModel {
    const rand = seededRandom(seed);
    const weights = new Map<string, tf.Tensor>();
    for (const spec of weightSpecs(numClasses)) {
      const values = spec.name.endsWith(".bias")
        ? new Float32Array(spec.shape[0]) // zero biases
        : heNormal(rand, spec.shape, spec.fanIn);
      weights.set(spec.name, tf.tensor(values, spec.shape, "float32"));
    }
    return new SegmentationModel(
      { modelId, numClasses, seed, format: "dnp-extractor-checkpoint-v1" },
      weights,
    );
  }

  /** Persist as model.json + one NPY file per weight tensor. */
  async save(dir: string): Promise<void> {
    fs.mkdirSync(path.join(dir, "weights"), { recursive: true });
    const names: string[] = [];
    for (const [name, tensor] of this.weights) {
      const data = (await tensor.data()) as Float32Array;
      const array: NpyArray = { descr: "<f4", shape: tensor.shape.slice(), data };
      writeNpy(path.join(dir, "weights", `${name}.npy`), array);
      names.push(name);
    }
    const manifest = { ...this.meta, weights: names.sort() };
    fs.writeFileSync(path.join(dir, "model.json"), JSON.stringify(manifest, null, 2) + "\n");
  }

  static load(dir: string): SegmentationModel {
    const manifestPath = path.join(dir, "model.json");
    if (!fs.existsSync(manifestPath)) {
      throw new Error(`no checkpoint at ${dir} (missing model.json)`);
    }
    const manifest = JSON.parse(fs.readFileSync(manifestPath, "utf8"));
    if (manifest.format !== "dnp-extractor-checkpoint-v1") {
      throw new Error(`unsupported checkpoint format ${manifest.format}`);
    }
    const weights = new Map<string, tf.Tensor>();
    for (const name of manifest.weights as string[]) {
      const array = readNpy(path.join(dir, "weights", `${name}.npy`));
      weights.set(name, tf.tensor(array.data as Float32Array, array.shape, "float32"));
    }
    return new SegmentationModel(
      {
        modelId: manifest.modelId,
        numClasses: manifest.numClasses,
        seed: manifest.seed,
        format: manifest.format,
      },
      weights,
    );
  }

  dispose(): void {
    for (const tensor of this.weights.values()) tensor.dispose();
    this.weights.clear();
  }

  private weight(name: string): tf.Tensor {
    const w = this.weights.get(name);
    if (!w) throw new Error(`checkpoint has no weight ${name}`);
    return w;
  }

  /**
   * Run the network on one [H, W, 3] float image in [0, 1]; returns every
   * hookable tensor keyed by selector, batch dimension stripped.
   */
  forward(image: tf.Tensor3D): Record<string, tf.Tensor3D> {
    return tf.tidy(() => {
      const out: Record<string, tf.Tensor3D> = {};
      let x = image.expandDims(0) as tf.Tensor4D;
      STAGE_CHANNELS.forEach((_, i) => {
        const kernel = this.weight(`stage${i + 1}.kernel`) as tf.Tensor4D;
        const bias = this.weight(`stage${i + 1}.bias`);
        x = tf.relu(tf.add(tf.conv2d(x, kernel, 2, "same"), bias));
        out[`stage${i + 1}`] = x.squeeze([0]);
      });

      const s3 = out.stage3.expandDims(0) as tf.Tensor4D;
      const projections: Record<string, tf.Tensor4D> = {};
      for (const proj of ["query", "keys", "values"]) {
        const kernel = this.weight(`attn1.${proj}.kernel`) as tf.Tensor4D;
        projections[proj] = tf.conv2d(s3, kernel, 1, "same");
        out[`attn1.${proj}`] = projections[proj].squeeze([0]);
      }
      const [, h, w] = s3.shape;
      const flat = (t: tf.Tensor4D) => t.reshape([h * w, ATTN_CHANNELS]) as tf.Tensor2D;
      const scores = tf.softmax(
        tf.matMul(flat(projections.query), flat(projections.keys), false, true).div(
          Math.sqrt(ATTN_CHANNELS),
        ),
      );
      const attended = tf.matMul(scores, flat(projections.values));
      const attnOut = attended.reshape([1, h, w, ATTN_CHANNELS]) as tf.Tensor4D;
      out["attn1.output"] = attnOut.squeeze([0]);

      const headKernel = this.weight("head.kernel") as tf.Tensor4D;
      const headBias = this.weight("head.bias");
      const logitsSmall = tf.add(tf.conv2d(attnOut, headKernel, 1, "same"), headBias) as tf.Tensor4D;
      const [imgH, imgW] = [image.shape[0], image.shape[1]];
      out.logits = tf.image
        .resizeBilinear(logitsSmall, [imgH, imgW], false, true)
        .squeeze([0]) as tf.Tensor3D;
      return out;
    }) as Record<string, tf.Tensor3D>;
  }

  /** Hookable tensor catalog with concrete shapes for a probe input size. */
  listSelectors(probeH = 64, probeW = 64): { selector: string; shape: number[] }[] {
    const probe = tf.zeros([probeH, probeW, 3]) as tf.Tensor3D;
    const outputs = this.forward(probe);
    probe.dispose();
    const catalog = Object.entries(outputs)
      .map(([selector, tensor]) => ({ selector, shape: tensor.shape.slice() }))
      .sort((a, b) => a.selector.localeCompare(b.selector));
    for (const tensor of Object.values(outputs)) tensor.dispose();
    return catalog;
  }
}

export const DEFAULT_SELECTOR = "attn1.keys";
