"""Command-line surface: track, rank, render, experiment.

stdout carries only data (CSV rows); everything diagnostic goes to stderr.
Exit codes: 0 success, 2 unparseable input, 3 dimension or class-id
violations, 4 structurally valid input with an empty result, 5 experiment
failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ClassAbsent,
    DimensionMismatch,
    EmptyRanking,
    EmptyTrace,
    EpochGap,
    ForgetDynError,
    HeatMap,
    InvalidClassId,
    InvalidConfig,
    LabeledImage,
    OutOfBounds,
    RngStream,
)
from .analytics import rank_images
from .augment import SELECTORS, AugmentConfig, ExperimentReport, run_experiment
from .formats import (
    FormatError,
    load_heatmap,
    load_manifest,
    load_mask,
    save_counts_csv,
    save_heatmap,
)
from .render import render_heatmap
from .tracker import run_trace
from .trainer import (
    DEFAULT_DATASET_SEED,
    SyntheticConfig,
    TrainConfig,
    generate_dataset,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DATA = 3
EXIT_EMPTY = 4
EXIT_EXPERIMENT = 5

_ACCURACY_FMT = "%.6f"


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_track(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    ignore = args.ignore_label if args.ignore_label is not None else manifest.ignore_label
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = ["image_id,total_events,epochs_observed"]
    for entry in manifest.entries:
        labels = load_mask(entry.labels_path)
        # Tracking never touches intensities, so a zero grid stands in.
        image = LabeledImage(
            image_id=entry.image_id,
            features=np.zeros(labels.shape),
            labels=labels,
        )
        preds = (load_mask(p) for p in entry.prediction_paths)
        heat = run_trace(preds, image, manifest.num_classes, ignore_label=ignore)
        save_heatmap(out / f"{entry.image_id}_heatmap.png", heat)
        save_counts_csv(out / f"{entry.image_id}_counts.csv", heat)
        summary.append(
            f"{entry.image_id},{heat.total_events()},{heat.epochs_observed}"
        )
        _note(f"traced {entry.image_id}: {len(entry.prediction_paths)} epochs")

    (out / "summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    return EXIT_OK


def _find_label_file(labels_dir: Path, image_id: str) -> Path:
    for suffix in (".png", ".raw", ".bin"):
        candidate = labels_dir / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    raise FormatError(
        f"{labels_dir}: no labels for {image_id!r} (tried .png/.raw/.bin)"
    )


def cmd_rank(args: argparse.Namespace) -> int:
    heat_dir = Path(args.heatmaps)
    labels_dir = Path(args.labels)
    if not heat_dir.is_dir():
        raise FormatError(f"{heat_dir}: not a directory")
    if not labels_dir.is_dir():
        raise FormatError(f"{labels_dir}: not a directory")

    ids = sorted(
        {p.name[: -len("_heatmap.png")] for p in heat_dir.glob("*_heatmap.png")}
        | {p.name[: -len("_counts.csv")] for p in heat_dir.glob("*_counts.csv")}
    )
    if not ids:
        raise FormatError(f"{heat_dir}: no *_heatmap.png or *_counts.csv files")

    triples = []
    for image_id in ids:
        png = heat_dir / f"{image_id}_heatmap.png"
        heat = load_heatmap(png if png.is_file() else heat_dir / f"{image_id}_counts.csv")
        labels = load_mask(_find_label_file(labels_dir, image_id))
        image = LabeledImage(image_id, np.zeros(labels.shape), labels)
        triples.append((image_id, heat, image))

    ranking = rank_images(triples, args.class_id)
    if not ranking.entries:
        _note(f"class {args.class_id} absent from all {len(ids)} images")
        return EXIT_EMPTY

    lines = ["rank,image_id,density,class_pixel_count"]
    for pos, e in enumerate(ranking.entries[: args.top], start=1):
        lines.append(f"{pos},{e.image_id},{e.density!r},{e.pixel_count}")
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    heat = load_heatmap(args.heatmap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar = render_heatmap(heat, out)
    _note(f"wrote {out} and {sidecar}")
    return EXIT_OK


def _build_experiment(doc: dict) -> tuple[int, SyntheticConfig, TrainConfig,
                                          AugmentConfig, list[str], int]:
    """Translate the JSON experiment config into validated dataclasses."""
    if not isinstance(doc, dict):
        raise FormatError("experiment config must be a JSON object")
    known = {"dataset_seed", "synthetic", "train", "augment", "selectors", "render_top"}
    unknown = set(doc) - known
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    try:
        synthetic = SyntheticConfig(**doc.get("synthetic", {}))
        synthetic.validate()
        train_cfg = TrainConfig(**doc.get("train", {}))
        train_cfg.validate()
        aug_doc = dict(doc.get("augment", {}))
        if "selector" in aug_doc:
            raise FormatError("use the top-level 'selectors' list, not augment.selector")
        aug_doc.setdefault("target_class", synthetic.underrepresented[0])
        aug_cfg = AugmentConfig(**aug_doc)
        aug_cfg.validate()
    except TypeError as exc:
        raise FormatError(f"bad experiment config: {exc}") from exc
    except InvalidConfig as exc:
        raise FormatError(f"bad experiment config: {exc}") from exc

    selectors = doc.get("selectors", ["flip", "rotate", "support_vector"])
    if (not isinstance(selectors, list) or not selectors
            or any(s not in SELECTORS for s in selectors)
            or len(set(selectors)) != len(selectors)):
        raise FormatError(f"'selectors' must be distinct values from {SELECTORS}")
    render_top = doc.get("render_top", 3)
    if not isinstance(render_top, int) or render_top < 0:
        raise FormatError("'render_top' must be an integer >= 0")
    dataset_seed = doc.get("dataset_seed", DEFAULT_DATASET_SEED)
    if not isinstance(dataset_seed, int):
        raise FormatError("'dataset_seed' must be an integer")
    return dataset_seed, synthetic, train_cfg, aug_cfg, list(selectors), render_top


def _json_safe(value):
    if isinstance(value, float):
        return None if not np.isfinite(value) else value
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _report_dict(report: ExperimentReport) -> dict:
    # runtime_seconds varies run to run and is deliberately left out so the
    # serialized report is a pure function of the config.
    return _json_safe(
        {
            "seeds": [asdict(r) for r in report.seed_results],
            "mean_class_accuracy_before": list(report.mean_class_accuracy_before),
            "mean_class_accuracy_after": list(report.mean_class_accuracy_after),
            "mean_density_before": report.mean_density_before,
            "mean_density_after": report.mean_density_after,
        }
    )


def cmd_experiment(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.config}: invalid JSON ({exc})") from exc
    dataset_seed, synthetic, train_cfg, aug_cfg, selectors, render_top = (
        _build_experiment(doc)
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset = generate_dataset(synthetic, RngStream(dataset_seed))
        first_seed = aug_cfg.seeds[0]
        collected: dict[tuple[str, str], dict[str, HeatMap]] = {}
        reports: dict[str, ExperimentReport] = {}
        for selector in selectors:
            def sink(seed: int, phase: str, heatmaps: dict[str, HeatMap],
                     _sel: str = selector) -> None:
                if seed == first_seed:
                    collected[(_sel, phase)] = heatmaps

            started = time.monotonic()
            reports[selector] = run_experiment(
                dataset, train_cfg, replace(aug_cfg, selector=selector), sink
            )
            _note(f"{selector}: {time.monotonic() - started:.1f}s "
                  f"over {len(aug_cfg.seeds)} seeds")
    except ForgetDynError as exc:
        _note(f"experiment failed: {exc}")
        return EXIT_EXPERIMENT

    baseline = reports[selectors[0]]
    lines = ["condition," + ",".join(dataset.class_names)]
    lines.append("baseline," + ",".join(
        _ACCURACY_FMT % v for v in baseline.mean_class_accuracy_before
    ))
    for selector in selectors:
        lines.append(f"{selector}," + ",".join(
            _ACCURACY_FMT % v for v in reports[selector].mean_class_accuracy_after
        ))
    table = "\n".join(lines) + "\n"
    (out / "report.csv").write_text(table, encoding="utf-8")

    summary = {
        "config": _json_safe(
            {
                "dataset_seed": dataset_seed,
                "synthetic": asdict(synthetic),
                "train": asdict(train_cfg),
                "augment": {
                    k: v for k, v in asdict(aug_cfg).items() if k != "selector"
                },
                "selectors": selectors,
            }
        ),
        "class_names": list(dataset.class_names),
        "target_class": aug_cfg.target_class,
        "conditions": {sel: _report_dict(reports[sel]) for sel in selectors},
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    if render_top > 0:
        _render_experiment_maps(out, dataset, aug_cfg, selectors, collected, render_top)

    print(table, end="")
    return EXIT_OK


def _render_experiment_maps(out, dataset, aug_cfg, selectors, collected, render_top):
    """Render before/after maps of the densest validation images (first seed)."""
    before = collected[(selectors[0], "before")]
    ranking = rank_images(
        [(img.image_id, before[img.image_id], img) for img in dataset.validation],
        aug_cfg.target_class,
    )
    top_ids = [e.image_id for e in ranking.entries[:render_top]]
    before_dir = out / "renders" / "before"
    before_dir.mkdir(parents=True, exist_ok=True)
    for image_id in top_ids:
        render_heatmap(before[image_id], before_dir / f"{image_id}.png")
    for selector in selectors:
        after_dir = out / "renders" / f"after_{selector}"
        after_dir.mkdir(parents=True, exist_ok=True)
        after = collected[(selector, "after")]
        for image_id in top_ids:
            render_heatmap(after[image_id], after_dir / f"{image_id}.png")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgetdyn",
        description="Forgetting-dynamics tracking, ranking, rendering, and experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="turn per-epoch prediction masks into heat maps")
    p.add_argument("--manifest", required=True, help="JSON trace manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ignore-label", type=int, default=None,
                   help="annotation value to exclude (overrides the manifest)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("rank", help="rank images by class forgetting density")
    p.add_argument("--heatmaps", required=True, help="directory of tracked heat maps")
    p.add_argument("--labels", required=True, help="directory of annotation masks")
    p.add_argument("--class", dest="class_id", type=int, required=True,
                   help="class id to rank by")
    p.add_argument("--top", type=int, default=6, help="entries to keep (default 6)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("render", help="render a heat map as a colored PNG")
    p.add_argument("--heatmap", required=True, help="heat map PNG or counts CSV")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--palette", choices=["diverging"], default="diverging",
                   help="color palette (default: diverging)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("experiment", help="run the augmentation comparison loop")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        _note(f"error: {exc}")
        return EXIT_PARSE
    except (DimensionMismatch, InvalidClassId, EpochGap, EmptyTrace, OutOfBounds) as exc:
        _note(f"error: {exc}")
        return EXIT_DATA
    except (EmptyRanking, ClassAbsent) as exc:
        _note(f"error: {exc}")
        return EXIT_EMPTY
    except ForgetDynError as exc:
        _note(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
