"""Command-line pipeline orchestration.

Subcommands::

    dnp synth      generate the synthetic dataset (train/ + test/)
    dnp build-ref  subsample training features into a reference set
    dnp fit-norm   estimate normalization extrema on the training set
    dnp score      write per-image anomaly score maps (dnp | parametric | cdnp)
    dnp eval       pooled AP / FPR95 / AUROC for a scores vs masks directory pair
    dnp sweep      grid over k / N / method / metric; CSV plus figures

Every command is a thin composition of the library modules; outputs equal
direct module calls. All randomness flows from explicit --seed flags. A JSON
config file may supply any flag (command line wins). DNP_THREADS caps the
worker count. Exit codes: 0 ok, 1 configuration/usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluator, knn_engine, sampler, scorer, synthetic, tensor_store
from .errors import ConfigurationError, DataError, DnpError

log = logging.getLogger("dnp")

DEFAULT_K = 3
DEFAULT_BUDGET = 100_000
DEFAULT_METRIC = "l2"
DEFAULT_PARAMETRIC = "lse"
DEFAULT_METHOD = "pcgcs"


class _Parser(argparse.ArgumentParser):
    """argparse funnels every usage problem through error(); raise instead of
    exiting so the CLI controls the exit code."""

    def error(self, message):
        raise ConfigurationError(message)


def _workers(value) -> int:
    requested = int(value) if value is not None else (os.cpu_count() or 1)
    cap = os.environ.get("DNP_THREADS")
    if cap is not None:
        requested = min(requested, max(1, int(cap)))
    return max(1, requested)


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """Layer values: parser defaults < JSON config < explicit flags."""
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {args.config} must hold a JSON object")
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigurationError(f"config key {key!r} is not a flag of this command")
        # config fills only flags the user left at their parser default
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)
    return args


def _scan(root) -> tensor_store.DatasetScan:
    scan = tensor_store.scan_dataset(root)
    for warning in scan.warnings:
        log.warning("%s", warning)
    return scan


def _knn_config(args) -> knn_engine.KnnConfig:
    return knn_engine.KnnConfig(
        k=args.k,
        metric=knn_engine.Metric.parse(args.metric),
        query_chunk=args.query_chunk,
    )


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    spec = synthetic.SynthSpec(
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        upscale=args.upscale,
        channels=args.channels,
        num_train=args.train_images,
        num_test=args.test_images,
        seed=args.seed,
    )
    synthetic.generate_dataset(args.out, spec)
    print(f"wrote synthetic dataset under {args.out}")
    return 0


def cmd_build_ref(args) -> int:
    scan = _scan(args.dataset)
    spec = sampler.SamplingSpec(
        method=sampler.SamplingMethod.parse(args.method),
        budget=args.budget,
        seed=args.seed,
        projection_dim=args.projection_dim,
    )
    pool = sampler.build_pool(
        scan.samples,
        max_per_image=args.max_per_image,
        seed=args.seed,
        ignore_value=scan.manifest.ignore_value,
    )
    source = str(Path(args.dataset).resolve())
    if spec.method is sampler.SamplingMethod.RANDOM:
        refs = sampler.sample_random(pool, spec, source=source)
    elif spec.method is sampler.SamplingMethod.GCS:
        refs = sampler.sample_gcs(pool, spec, source=source)
    else:
        refs = sampler.sample_pcgcs(pool, spec, num_classes=scan.manifest.num_classes, source=source)
    tensor_store.save_reference_set(refs, args.out)
    print(f"wrote reference set ({refs.count} x {refs.channels}) to {args.out}.*")
    return 0


def cmd_fit_norm(args) -> int:
    scan = _scan(args.dataset)
    refs = tensor_store.load_reference_set(args.ref)
    cfg = _knn_config(args)
    kind = scorer.ParametricKind.parse(args.parametric)
    workers = _workers(args.workers)

    def knn_stream():
        for sample in scan.samples:
            fmap = tensor_store.load_feature_map(sample.feature_path)
            yield knn_engine.knn_scores(fmap, refs, cfg, workers=workers).data

    def param_stream():
        for sample in scan.samples:
            logits = tensor_store.load_logit_map(sample.logit_path, scan.manifest.num_classes)
            yield scorer.parametric_score(logits, kind).data

    stats = scorer.fit_normalization(knn_stream(), param_stream())
    scorer.save_stats(stats, args.out, kind, scorer.manifest_hash(refs.manifest))
    print(
        f"wrote stats to {args.out}: knn_max={stats.knn_max:.6g} "
        f"param_min={stats.param_min:.6g} param_max={stats.param_max:.6g}"
    )
    return 0


def _score_one(sample, mode, refs, cfg, stats, kind, workers, num_classes=None):
    logits = tensor_store.load_logit_map(sample.logit_path, num_classes)
    if mode == "parametric":
        return scorer.parametric_score(logits, kind)
    fmap = tensor_store.load_feature_map(sample.feature_path)
    knn_map = knn_engine.knn_scores(fmap, refs, cfg, workers=workers)
    upsampled = scorer.upsample_bilinear(knn_map, logits.height, logits.width)
    if mode == "dnp":
        return upsampled
    param_map = scorer.parametric_score(logits, kind)
    return scorer.combine_scores(upsampled, param_map, stats)


def cmd_score(args) -> int:
    mode = args.mode
    if mode not in ("dnp", "parametric", "cdnp"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    scan = _scan(args.dataset)
    samples = scan.samples
    if args.image_ids:
        wanted = set(args.image_ids)
        samples = tuple(s for s in samples if s.image_id in wanted)
        missing = wanted - {s.image_id for s in samples}
        if missing:
            raise DataError(f"image ids not in dataset: {sorted(missing)}")

    refs = stats = None
    kind = scorer.ParametricKind.parse(args.parametric)
    if mode in ("dnp", "cdnp"):
        if not args.ref:
            raise ConfigurationError(f"mode={mode} requires --ref")
        refs = tensor_store.load_reference_set(args.ref)
    if mode == "cdnp":
        if not args.stats:
            raise ConfigurationError("mode=cdnp requires --stats")
        stats, kind, ref_hash = scorer.load_stats(args.stats)
        if refs is not None and ref_hash != scorer.manifest_hash(refs.manifest):
            log.warning(
                "stats %s were fitted against a different reference set; "
                "scores may be inconsistently normalized",
                args.stats,
            )
    cfg = _knn_config(args)
    workers = _workers(args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parallel_images = workers > 1 and len(samples) > 1
    # either parallelize across images or across query chunks, never both
    engine_workers = 1 if parallel_images else workers

    def run(sample):
        smap = _score_one(
            sample, mode, refs, cfg, stats, kind,
            workers=engine_workers, num_classes=scan.manifest.num_classes,
        )
        tensor_store.save_tensor(smap, out_dir / f"{sample.image_id}.npy")
        if args.png:
            scorer.render_scoremap_png(smap, out_dir / f"{sample.image_id}.png")
        return sample.image_id

    failures = []
    if parallel_images:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run, s): s for s in samples}
            for fut, sample in futures.items():
                try:
                    fut.result()
                except DnpError as exc:
                    failures.append(f"{sample.image_id}: {exc}")
    else:
        for sample in samples:
            try:
                run(sample)
            except DnpError as exc:
                failures.append(f"{sample.image_id}: {exc}")
    if failures:
        raise DataError("scoring failed for: " + "; ".join(failures))
    print(f"wrote {len(samples)} score maps to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    scores_dir, masks_dir = Path(args.scores), Path(args.masks)
    score_ids = {p.stem for p in scores_dir.glob("*.npy")}
    mask_ids = {p.stem for p in masks_dir.glob("*.npy")}
    common = sorted(score_ids & mask_ids)
    for missing in sorted(score_ids ^ mask_ids):
        side = "mask" if missing in score_ids else "score"
        log.warning("image %s has no %s file; skipped", missing, side)
    if not common:
        raise DataError(f"no image ids shared between {scores_dir} and {masks_dir}")
    pairs = []
    for image_id in common:
        smap = tensor_store.load_score_map(scores_dir / f"{image_id}.npy")
        mask = tensor_store.load_ood_mask(masks_dir / f"{image_id}.npy", ignore_value=args.ignore_value)
        pairs.append((smap, mask))
    report = evaluator.evaluate_dataset(pairs, image_ids=common, per_image=args.per_image)
    print(evaluator.format_report(report))
    if args.out:
        report.save(args.out)
        print(f"wrote report to {args.out}")
    return 0


def _parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise ConfigurationError(f"bad integer list {text!r}") from exc


def _parse_str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


SWEEP_COLUMNS = ["method", "n", "k", "metric", "seed", "ap", "fpr95", "auroc", "wall_ms"]


def cmd_sweep(args) -> int:
    k_values = _parse_int_list(args.k_values)
    n_values = _parse_int_list(args.n_values)
    methods = [sampler.SamplingMethod.parse(m) for m in _parse_str_list(args.methods)]
    metrics = [knn_engine.Metric.parse(m) for m in _parse_str_list(args.metrics)]
    seeds = _parse_int_list(args.seeds)
    if not (k_values and n_values and methods and metrics and seeds):
        raise ConfigurationError("sweep grid must be non-empty in every dimension")

    train_scan = _scan(args.train_dataset)
    test_scan = _scan(args.dataset)
    workers = _workers(args.workers)
    pool = sampler.build_pool(
        train_scan.samples,
        max_per_image=args.max_per_image,
        seed=seeds[0],
        ignore_value=train_scan.manifest.ignore_value,
    )
    test_inputs = []
    for sample in test_scan.samples:
        if sample.ood_mask_path is None:
            log.warning("image %s has no OoD mask; skipped in sweep", sample.image_id)
            continue
        test_inputs.append(sample)
    if not test_inputs:
        raise DataError("no test samples with OoD masks")

    ref_cache: dict = {}

    def reference_for(method, n, seed):
        key = (method, n, seed)
        if key not in ref_cache:
            spec = sampler.SamplingSpec(method=method, budget=n, seed=seed, projection_dim=args.projection_dim)
            if method is sampler.SamplingMethod.RANDOM:
                ref_cache[key] = sampler.sample_random(pool, spec)
            elif method is sampler.SamplingMethod.GCS:
                ref_cache[key] = sampler.sample_gcs(pool, spec)
            else:
                ref_cache[key] = sampler.sample_pcgcs(
                    pool, spec, num_classes=train_scan.manifest.num_classes
                )
        return ref_cache[key]

    def run_cell(method, n, k, metric, seed):
        refs = reference_for(method, n, seed)
        cfg = knn_engine.KnnConfig(k=k, metric=metric, query_chunk=args.query_chunk)
        pairs, ids = [], []
        for sample in test_inputs:
            fmap = tensor_store.load_feature_map(sample.feature_path)
            logits = tensor_store.load_logit_map(sample.logit_path)
            smap = knn_engine.knn_scores(fmap, refs, cfg, workers=workers)
            upsampled = scorer.upsample_bilinear(smap, logits.height, logits.width)
            mask = tensor_store.load_ood_mask(
                sample.ood_mask_path, ignore_value=test_scan.manifest.ignore_value
            )
            pairs.append((upsampled, mask))
            ids.append(sample.image_id)
        return evaluator.evaluate_dataset(pairs, image_ids=ids)

    rows = []
    for method in methods:
        for n in n_values:
            for seed in seeds:
                for metric in metrics:
                    for k in k_values:
                        start = time.perf_counter()
                        row = {
                            "method": method.value,
                            "n": n,
                            "k": k,
                            "metric": metric.value,
                            "seed": seed,
                        }
                        try:
                            report = run_cell(method, n, k, metric, seed)
                            row.update(ap=repr(report.ap), fpr95=repr(report.fpr95), auroc=repr(report.auroc))
                        except DnpError as exc:
                            log.error("sweep cell %s failed: %s", row, exc)
                            row.update(ap="", fpr95="", auroc="")
                        row["wall_ms"] = f"{(time.perf_counter() - start) * 1e3:.3f}"
                        rows.append(row)

    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows to {out_csv}")
    figures = render_sweep_figures(rows, out_csv)
    for fig_path in figures:
        print(f"wrote figure {fig_path}")
    return 0


def render_sweep_figures(rows, csv_path) -> list[Path]:
    """Line plots of AP and FPR95 over the widest swept axis, one series per
    combination of the remaining settings; written next to the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok_rows = [r for r in rows if r["ap"] != ""]
    if not ok_rows:
        return []
    axes = {"k": sorted({int(r["k"]) for r in ok_rows}), "n": sorted({int(r["n"]) for r in ok_rows})}
    x_name = max(axes, key=lambda a: len(axes[a]))
    series_keys = [c for c in ("method", "n", "k", "metric", "seed") if c != x_name]

    csv_path = Path(csv_path)
    written = []
    for metric_col in ("ap", "fpr95"):
        fig, ax = plt.subplots(figsize=(6, 4))
        groups: dict = {}
        for r in ok_rows:
            label = ", ".join(f"{k}={r[k]}" for k in series_keys)
            groups.setdefault(label, []).append((int(r[x_name]), float(r[metric_col])))
        for label, points in sorted(groups.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
        ax.set_xlabel(x_name)
        ax.set_ylabel(metric_col.upper())
        ax.set_xscale("log" if x_name == "n" else "linear")
        ax.grid(True, alpha=0.3)
        if len(groups) <= 12:
            ax.legend(fontsize=7)
        fig.tight_layout()
        out = csv_path.with_name(csv_path.stem + f"_{metric_col}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written


# --------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="dnp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file supplying any flag of this command")
        p.add_argument("--workers", type=int, default=None, help="worker threads (DNP_THREADS caps)")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--train-images", type=int, default=6)
    p.add_argument("--test-images", type=int, default=4)
    p.add_argument("--grid-h", type=int, default=24)
    p.add_argument("--grid-w", type=int, default=32)
    p.add_argument("--upscale", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-ref", help="subsample training features into a reference set")
    add_common(p)
    p.add_argument("--dataset", required=True, help="training dataset root")
    p.add_argument("--out", required=True, help="reference base path (writes <out>.features.npy ...)")
    p.add_argument("--method", default=DEFAULT_METHOD, help="random | gcs | pcgcs")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--projection-dim", type=int, default=None)
    p.add_argument("--max-per-image", type=int, default=None)
    p.set_defaults(func=cmd_build_ref)

    p = sub.add_parser("fit-norm", help="estimate normalization extrema on the training set")
    add_common(p)
    p.add_argument("--dataset", required=True, help="training dataset root")
    p.add_argument("--ref", required=True, help="reference base path")
    p.add_argument("--out", required=True, help="stats JSON path")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--metric", default=DEFAULT_METRIC)
    p.add_argument("--parametric", default=DEFAULT_PARAMETRIC)
    p.add_argument("--query-chunk", type=int, default=256)
    p.set_defaults(func=cmd_fit_norm)

    p = sub.add_parser("score", help="write per-image anomaly score maps")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for score files")
    p.add_argument("--mode", default="cdnp", help="dnp | parametric | cdnp")
    p.add_argument("--ref", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--metric", default=DEFAULT_METRIC)
    p.add_argument("--parametric", default=DEFAULT_PARAMETRIC)
    p.add_argument("--query-chunk", type=int, default=256)
    p.add_argument("--png", action="store_true", help="also write colormap PNGs")
    p.add_argument("image_ids", nargs="*", help="subset of image ids (default: all)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate score maps against OoD masks")
    add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--ignore-value", type=int, default=tensor_store.DEFAULT_IGNORE_VALUE)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over k / N / method / metric")
    add_common(p)
    p.add_argument("--train-dataset", required=True)
    p.add_argument("--dataset", required=True, help="test dataset root (needs OoD masks)")
    p.add_argument("--out", required=True, help="CSV path; figures land next to it")
    p.add_argument("--k-values", default=str(DEFAULT_K))
    p.add_argument("--n-values", default=str(DEFAULT_BUDGET))
    p.add_argument("--methods", default=DEFAULT_METHOD)
    p.add_argument("--metrics", default=DEFAULT_METRIC)
    p.add_argument("--seeds", default="0")
    p.add_argument("--projection-dim", type=int, default=None)
    p.add_argument("--max-per-image", type=int, default=None)
    p.add_argument("--query-chunk", type=int, default=256)
    p.set_defaults(func=cmd_sweep)

    for command in sub.choices.values():
        command.set_defaults(
            _parser_defaults={a.dest: a.default for a in command._actions}
        )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, args._parser_defaults)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DnpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
