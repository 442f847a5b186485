/**
 * Minimal command line:
 *
 *   node dist/cli.js init-checkpoint <dir> [--seed N] [--classes K] [--id NAME]
 *   node dist/cli.js list-selectors <checkpoint-dir>
 *   node dist/cli.js extract <image-dir> <checkpoint-dir> <output-root>
 *                    [--selector S] [--resize HxW]
 */

import * as tf from "@tensorflow/tfjs";

import { extract, listSelectors } from "./extract.js";
import { DEFAULT_SELECTOR, SegmentationModel } from "./model.js";

function flag(args: string[], name: string): string | undefined {
  const i = args.indexOf(name);
  return i >= 0 && i + 1 < args.length ? args[i + 1] : undefined;
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  await tf.setBackend("cpu");
  if (command === "init-checkpoint") {
    const dir = rest[0];
    if (!dir) throw new Error("usage: init-checkpoint <dir> [--seed N] [--classes K] [--id NAME]");
    const seed = parseInt(flag(rest, "--seed") ?? "0", 10);
    const classes = parseInt(flag(rest, "--classes") ?? "5", 10);
    const model = SegmentationModel.build(flag(rest, "--id") ?? "seg-small", seed, classes);
    await model.save(dir);
    model.dispose();
    console.log(`wrote checkpoint to ${dir}`);
    return 0;
  }
  if (command === "list-selectors") {
    if (!rest[0]) throw new Error("usage: list-selectors <checkpoint-dir>");
    for (const entry of listSelectors(rest[0])) {
      console.log(`${entry.selector}\t[${entry.shape.join(", ")}]`);
    }
    return 0;
  }
  if (command === "extract") {
    const [imageDir, modelPath, outputRoot] = rest;
    if (!imageDir || !modelPath || !outputRoot) {
      throw new Error("usage: extract <image-dir> <checkpoint-dir> <output-root> [--selector S] [--resize HxW]");
    }
    const resizeText = flag(rest, "--resize");
    const report = await extract(imageDir, {
      modelPath,
      layerSelector: flag(rest, "--selector") ?? DEFAULT_SELECTOR,
      inputResize: resizeText
        ? (resizeText.split("x").map((v) => parseInt(v, 10)) as [number, number])
        : undefined,
      outputRoot,
    });
    console.log(
      `extracted ${report.imageIds.length} images: features [${report.featureShape.join(", ")}], ` +
        `logits [${report.logitShape.join(", ")}]`,
    );
    return 0;
  }
  throw new Error(`unknown command ${command ?? "(none)"}; use init-checkpoint | list-selectors | extract`);
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    console.error(`error: ${err.message}`);
    process.exit(1);
  });
