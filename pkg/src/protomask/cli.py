"""Command line entry point: segment, train, evaluate, visualize, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import maskgen
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, SegmentationConfig, load_config
from .data import ImageSample, ManifestError, generate_synthetic_dataset, load_manifest, load_samples, read_image
from .metrics import PERFORMANCE_COLUMNS, EXPLANATION_COLUMNS, MetricConfig, MetricReport, aggregate_reports, evaluate
from .model import ModelConfig, build_model, forward
from .saliency import heatmap_overlay, map_to_image, prototype_saliency
from .training import ViewDataset, run_schedule

log = logging.getLogger("protomask")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def segment_samples(samples: Sequence[ImageSample], seg: SegmentationConfig) -> list[maskgen.MaskSet]:
    if seg.method == "toy":
        out = [maskgen.toy_grid_segmenter(s, seg.rows, seg.cols, seg.jitter_seed, seg.jitter) for s in samples]
    elif seg.method == "contour":
        if seg.contours is None:
            raise ConfigError("segmentation.contours must name a directory of <image_id>.png contour maps")
        out = []
        for s in samples:
            path = _require(Path(seg.contours) / f"{s.image_id}.png", "contour map")
            with Image.open(path) as img:
                contour = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            masks = maskgen.contours_to_masks(contour, seg.threshold, seg.dilation)
            out.append(maskgen.MaskSet([maskgen.SegmentationMask.from_array(maskgen.resize_mask(m.mask, s.shape))
                                        for m in masks], "contour", masks.meta))
    else:
        if seg.external is None:
            raise ConfigError("segmentation.external must name a mask archive")
        out = maskgen.load_mask_archive(_require(Path(seg.external), "mask archive"), samples)
    if seg.full_frame:
        out = [maskgen.with_full_frame(m) for m in out]
    return out


def _write_table(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _resolve_view_count(cfg: RunConfig, masksets) -> int:
    if cfg.view_count == "auto":
        return maskgen.select_view_count(masksets, cfg.segmentation.size_threshold)
    return int(cfg.view_count)


def cmd_segment(args, cfg: RunConfig) -> None:
    manifest = load_manifest(_require(Path(args.data), "manifest"))
    samples = load_samples(manifest)
    masksets = segment_samples(samples, cfg.segmentation)
    out = Path(args.out) / "masks" / manifest.split
    maskgen.write_mask_archive(out, {s.image_id: m for s, m in zip(samples, masksets)},
                               source=cfg.segmentation.method, params=asdict(cfg.segmentation))
    sizes = maskgen.rank_mean_sizes(masksets)
    _write_table(out / "mask_sizes.csv", ["rank", "mean_area_fraction"],
                 [[r + 1, repr(float(v))] for r, v in enumerate(sizes)])
    stats = {"images": len(samples), "view_count_auto": maskgen.select_view_count(masksets,
                                                                                   cfg.segmentation.size_threshold)}
    if all(s.object_mask is not None for s in samples):
        overlap = maskgen.rank_mean_object_overlap(masksets, [s.object_mask for s in samples])
        _write_table(out / "mask_object_overlap.csv", ["rank", "mean_object_overlap"],
                     [[r + 1, repr(float(v))] for r, v in enumerate(overlap)])
    if any(s.visible_parts() for s in samples):
        stats["mask_consistency"] = maskgen.mask_consistency(samples, masksets)
    (out / "mask_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} mask sets to {out}")


def _load_split(data: str, masks: str):
    manifest = load_manifest(_require(Path(data), "manifest"))
    samples = load_samples(manifest)
    masksets = maskgen.load_mask_archive(_require(Path(masks), "mask archive"), samples)
    return manifest, samples, masksets


def cmd_train(args, cfg: RunConfig) -> None:
    manifest, samples, masksets = _load_split(args.data, args.masks)
    view_count = _resolve_view_count(cfg, masksets)
    model_cfg = ModelConfig(manifest.class_count, cfg.model.prototypes_per_class, cfg.model.eps, cfg.model.backbone)
    model = build_model(model_cfg, cfg.seed)
    data = ViewDataset.from_samples(samples, masksets, view_count, cfg.view_resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"view_count": view_count, "view_resolution": list(cfg.view_resolution),
             "segmentation": asdict(cfg.segmentation), "metrics": asdict(cfg.metrics)}
    result = run_schedule(model, data, cfg.schedule, cfg.loss_weights, out, resume=args.resume, extra=extra)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"trained on {len(samples)} images with {view_count} views; final loss "
          f"{result.log_rows[-1]['total']:.4f}; artifacts in {out}")


def _metric_config(header: dict, cfg: RunConfig, explicit_metrics: bool) -> MetricConfig:
    extra = header.get("extra", {})
    metrics = asdict(cfg.metrics) if explicit_metrics else extra.get("metrics", asdict(cfg.metrics))
    return MetricConfig(extra["view_count"], tuple(extra["view_resolution"]), **metrics)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    model, header = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    _, samples, masksets = _load_split(args.data, args.masks)
    report = evaluate(model, samples, masksets, _metric_config(header, cfg, args.config is not None))
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    path.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_json(), end="")


def cmd_visualize(args, cfg: RunConfig) -> None:
    model, header = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    extra = header["extra"]
    image_path = _require(Path(args.image), "image")
    sample = ImageSample(read_image(image_path), 0, image_path.stem)
    if args.masks:
        root = Path(args.masks)
        per_image = root / sample.image_id if (root / sample.image_id).is_dir() else root
        masks = maskgen.load_external_masks(_require(per_image, "mask directory"), sample.shape)
    else:
        masks = segment_samples([sample], SegmentationConfig(**extra["segmentation"]))[0]
    views = maskgen.make_views(sample, masks, extra["view_count"], tuple(extra["view_resolution"]))
    with torch.no_grad():
        result = forward(views, model)
    order = np.argsort(-result.pooled.detach().numpy(), kind="stable")[: args.top]
    out = Path(args.out) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for rank, p in enumerate(order.tolist(), start=1):
        rel = prototype_saliency(model, views, p)
        full = map_to_image(rel, sample.shape)
        name = f"{sample.image_id}_top{rank}_p{p:04d}.png"
        Image.fromarray(heatmap_overlay(sample.image, full), mode="RGBA").save(out / name)
        summary.append({"rank": rank, "prototype": p, "similarity": float(result.pooled[p]),
                        "view_index": rel.view_index, "view_bbox": list(rel.provenance), "file": name})
    (out / f"{sample.image_id}.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {len(summary)} heatmaps to {out}")


def cmd_report(args, cfg: RunConfig) -> None:
    reports = []
    for run in args.runs:
        path = Path(run)
        path = path / "report.json" if path.is_dir() else path
        reports.append(MetricReport.from_json(_require(path, "run report").read_text()))
    agg = aggregate_reports(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(
        {"runs": len(reports), "metrics": {k: {"mean": m, "std": s} for k, (m, s) in agg.items()}},
        indent=2) + "\n")
    cols = PERFORMANCE_COLUMNS + EXPLANATION_COLUMNS
    cells = ["" if agg[c][0] is None else f"{agg[c][0]:.2f} ± {agg[c][1]:.2f}" for c in cols]
    _write_table(out / "report.csv", cols, [cells])
    print(f"merged {len(reports)} runs into {out}")


def cmd_synth(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    generate_synthetic_dataset(cfg.seed, args.classes, args.per_class, args.resolution, "train", out / "train")
    generate_synthetic_dataset(cfg.seed, args.classes, args.test_per_class, args.resolution, "test", out / "test")
    print(f"wrote synthetic train/test sets to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protomask", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate the synthetic parts dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=25)
    p.add_argument("--test-per-class", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)

    p = add("segment", cmd_segment, "produce or ingest mask sets")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--method", choices=["toy", "contour", "external"])
    p.add_argument("--contours", help="directory of <image_id>.png contour maps")
    p.add_argument("--external", help="mask archive to ingest")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "run the training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_projected.bin")

    p = add("evaluate", cmd_evaluate, "compute the metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--report", required=True)

    p = add("visualize", cmd_visualize, "write prototype heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--masks")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "merge run reports into mean ± std")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed}
    for flag in ("method", "contours", "external"):
        if getattr(args, flag, None) is not None:
            overrides[f"segmentation.{flag}"] = getattr(args, flag)
    try:
        cfg = load_config(args.config, overrides)
        args.func(args, cfg)
    except (ConfigError, ManifestError, maskgen.MaskError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
