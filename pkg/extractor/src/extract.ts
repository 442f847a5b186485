/**
 * Dataset extraction: run the segmentation checkpoint over a directory of
 * images and write the NPY dataset layout the scoring engine consumes:
 *
 *   output_root/manifest.json            num_classes, ignore_value, provenance
 *   output_root/features/<id>.npy        selected layer, H_f x W_f x C float32
 *   output_root/logits/<id>.npy          H x W x K float32
 *   output_root/labels/<id>.npy          H x W int32 (when a label PNG exists)
 *
 * Inference is single-process and batch-free; every file write is atomic via
 * temp-rename, so a crashed run never leaves half-written tensors behind.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";

import { readImagePng, readLabelPng, resizeNearestInt } from "./images.js";
import { DEFAULT_SELECTOR, SegmentationModel } from "./model.js";
import { writeNpy } from "./npy.js";

export const IGNORE_VALUE = 255;

export interface ExtractionSpec {
  /** checkpoint directory; its model.json carries the model id */
  modelPath: string;
  layerSelector: string;
  inputResize?: [number, number];
  outputRoot: string;
}

export interface ExtractReport {
  imageIds: string[];
  featureShape: number[];
  logitShape: number[];
}

export function listSelectors(modelPath: string): { selector: string; shape: number[] }[] {
  const model = SegmentationModel.load(modelPath);
  try {
    return model.listSelectors();
  } finally {
    model.dispose();
  }
}

function resolveSelector(model: SegmentationModel, selector: string, probe: tf.Tensor3D): void {
  const outputs = model.forward(probe);
  const available = Object.keys(outputs).sort();
  for (const tensor of Object.values(outputs)) tensor.dispose();
  if (!available.includes(selector)) {
    throw new Error(
      `selector '${selector}' does not resolve; available selectors: ${available.join(", ")}`,
    );
  }
}

function listImages(imageDir: string): string[] {
  if (!fs.existsSync(imageDir)) {
    throw new Error(`image directory ${imageDir} does not exist`);
  }
  const ids = fs
    .readdirSync(imageDir)
    .filter((name) => name.endsWith(".png"))
    .map((name) => name.slice(0, -4))
    .sort();
  if (ids.length === 0) {
    throw new Error(`no .png images under ${imageDir}`);
  }
  return ids;
}

export async function extract(imageDir: string, spec: ExtractionSpec): Promise<ExtractReport> {
  await tf.setBackend("cpu");
  const selector = spec.layerSelector || DEFAULT_SELECTOR;
  const model = SegmentationModel.load(spec.modelPath);
  const imageIds = listImages(imageDir);
  let featureShape: number[] = [];
  let logitShape: number[] = [];
  try {
    const probe = tf.zeros([16, 16, 3]) as tf.Tensor3D;
    try {
      resolveSelector(model, selector, probe);
    } finally {
      probe.dispose();
    }

    for (const imageId of imageIds) {
      const decoded = readImagePng(path.join(imageDir, `${imageId}.png`));
      let image = tf.tensor3d(decoded.data, [decoded.height, decoded.width, 3]);
      if (spec.inputResize) {
        const resized = tf.image.resizeBilinear(
          image.expandDims(0) as tf.Tensor4D,
          spec.inputResize,
          false,
          true,
        );
        image.dispose();
        image = resized.squeeze([0]) as tf.Tensor3D;
        resized.dispose();
      }
      const outputs = model.forward(image);
      const features = outputs[selector];
      const logits = outputs.logits;
      featureShape = features.shape.slice();
      logitShape = logits.shape.slice();
      writeNpy(path.join(spec.outputRoot, "features", `${imageId}.npy`), {
        descr: "<f4",
        shape: featureShape,
        data: (await features.data()) as Float32Array,
      });
      writeNpy(path.join(spec.outputRoot, "logits", `${imageId}.npy`), {
        descr: "<f4",
        shape: logitShape,
        data: (await logits.data()) as Float32Array,
      });
      for (const tensor of Object.values(outputs)) tensor.dispose();

      const labelPath = path.join(imageDir, "labels", `${imageId}.png`);
      if (fs.existsSync(labelPath)) {
        const labels = readLabelPng(labelPath);
        let grid = labels.data;
        let [h, w] = [labels.height, labels.width];
        if (spec.inputResize) {
          grid = resizeNearestInt(grid, h, w, spec.inputResize[0], spec.inputResize[1]);
          [h, w] = spec.inputResize;
        }
        writeNpy(path.join(spec.outputRoot, "labels", `${imageId}.npy`), {
          descr: "<i4",
          shape: [h, w],
          data: grid,
        });
      }
      image.dispose();
    }

    const manifest = {
      num_classes: model.meta.numClasses,
      ignore_value: IGNORE_VALUE,
      model_id: model.meta.modelId,
      layer_selector: selector,
    };
    fs.mkdirSync(spec.outputRoot, { recursive: true });
    const manifestPath = path.join(spec.outputRoot, "manifest.json");
    const tmp = manifestPath + ".tmp";
    fs.writeFileSync(tmp, JSON.stringify(manifest, null, 2) + "\n");
    fs.renameSync(tmp, manifestPath);
  } finally {
    model.dispose();
  }
  return { imageIds, featureShape, logitShape };
}
