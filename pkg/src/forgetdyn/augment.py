"""Closed-loop targeted augmentation and the flip/rotate baselines.

Per seed: train, rank validation images by target-class forgetting density,
take the top-k as transfer sources, restyle the target-class region of
randomly chosen training images after each source, retrain from scratch on
the extended pool, and compare densities and per-class accuracy. Every
condition (including the baselines) adds exactly the same number of images,
so comparisons are never confounded by pool size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import (
    ClassAbsent,
    Dataset,
    DegenerateRegion,
    DensityRanking,
    EmptyRanking,
    InvalidConfig,
    LabeledImage,
    NonSquareRotation,
    RngStream,
)
from .analytics import class_density, rank_images
from .tracker import HeatMap, TraceAccumulator
from .trainer import TrainConfig, per_class_accuracy, train

SELECTORS = ("none", "flip", "rotate", "support_vector")

# Called once per (seed, phase) with phase "before" or "after".
HeatmapSink = Callable[[int, str, dict[str, HeatMap]], None]


@dataclass(frozen=True)
class AugmentConfig:
    """Parameters of one augmentation comparison run."""

    target_class: int
    num_sources: int = 6
    transfers_per_source: int = 64
    selector: str = "support_vector"
    moment_match: bool = True
    patch_size: int | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self) -> None:
        if self.target_class < 0:
            raise InvalidConfig(f"target class must be >= 0, got {self.target_class}")
        if self.num_sources < 1:
            raise InvalidConfig(f"num_sources must be >= 1, got {self.num_sources}")
        if self.transfers_per_source < 1:
            raise InvalidConfig(
                f"transfers_per_source must be >= 1, got {self.transfers_per_source}"
            )
        if self.selector not in SELECTORS:
            raise InvalidConfig(f"selector {self.selector!r} not in {SELECTORS}")
        if self.patch_size is not None and self.patch_size < 1:
            raise InvalidConfig(f"patch size must be >= 1, got {self.patch_size}")
        if not self.moment_match and self.patch_size is None:
            raise InvalidConfig("enable moment matching, patch resampling, or both")
        if not self.seeds:
            raise InvalidConfig("need at least one seed")

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(self.seeds))


def select_sources(ranking: DensityRanking, k: int) -> list[str]:
    """Ids of the top-k densest images (all of them when fewer exist)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ranking.entries:
        raise EmptyRanking(f"no image contains class {ranking.class_id}")
    return [e.image_id for e in ranking.entries[:k]]


def feature_transfer(
    source: LabeledImage,
    target: LabeledImage,
    class_id: int,
    rng: RngStream,
    moment_match: bool = True,
    patch_size: int | None = None,
    new_id: str | None = None,
) -> LabeledImage:
    """Restyle the target's class region after the source's class region.

    Moment matching affinely remaps the region to the source region's mean
    and standard deviation. Patch resampling instead tiles the region with
    pixel blocks copied from around random source-region anchors; combining
    both remaps the resampled values afterwards. Pixels of other classes and
    the annotation are untouched, bit for bit.
    """
    if not moment_match and patch_size is None:
        raise ValueError("enable moment matching, patch resampling, or both")
    src_mask = source.labels == class_id
    tgt_mask = target.labels == class_id
    if not src_mask.any():
        raise ClassAbsent(f"class {class_id} absent from source {source.image_id}")
    if not tgt_mask.any():
        raise ClassAbsent(f"class {class_id} absent from target {target.image_id}")

    src_vals = source.features[src_mask]
    src_mean = float(src_vals.mean())
    src_std = float(src_vals.std())
    new_feats = np.array(target.features)

    if patch_size is not None:
        if src_std == 0.0:
            raise DegenerateRegion(
                f"source {source.image_id} class {class_id} region has zero "
                "variance; patches would all be identical"
            )
        _fill_from_patches(new_feats, tgt_mask, source, src_mask, patch_size, rng)

    if moment_match:
        vals = new_feats[tgt_mask]
        mean = vals.mean()
        std = vals.std()
        if std > 0:
            new_feats[tgt_mask] = (vals - mean) / std * src_std + src_mean
        else:
            new_feats[tgt_mask] = src_mean

    if new_id is None:
        new_id = f"{target.image_id}~tx~{source.image_id}"
    return LabeledImage(image_id=new_id, features=new_feats, labels=target.labels)


def _fill_from_patches(
    out: np.ndarray,
    tgt_mask: np.ndarray,
    source: LabeledImage,
    src_mask: np.ndarray,
    patch: int,
    rng: RngStream,
) -> None:
    """Overwrite masked pixels tile by tile with source blocks anchored at
    random source-region pixels (clamped to stay inside the source)."""
    sm, sn = source.shape
    patch = min(patch, sm, sn)
    anchors_r, anchors_c = np.nonzero(src_mask)
    m, n = out.shape
    for r0 in range(0, m, patch):
        for c0 in range(0, n, patch):
            tile = tgt_mask[r0:r0 + patch, c0:c0 + patch]
            if not tile.any():
                continue
            a = rng.integers(len(anchors_r))
            sr = min(int(anchors_r[a]), sm - patch)
            sc = min(int(anchors_c[a]), sn - patch)
            block = source.features[sr:sr + patch, sc:sc + patch]
            view = out[r0:r0 + patch, c0:c0 + patch]
            view[tile] = block[:tile.shape[0], :tile.shape[1]][tile]


def flip_image(image: LabeledImage, new_id: str | None = None) -> LabeledImage:
    """Mirror left-right; features and labels share the coordinate map."""
    return LabeledImage(
        image_id=new_id or f"{image.image_id}~flip",
        features=image.features[:, ::-1],
        labels=image.labels[:, ::-1],
    )


def rotate_image(image: LabeledImage, angle: int, new_id: str | None = None) -> LabeledImage:
    """Rotate counterclockwise by 90, 180, or 270 degrees."""
    if angle not in (90, 180, 270):
        raise ValueError(f"angle must be one of 90/180/270, got {angle}")
    if angle != 180 and image.height != image.width:
        raise NonSquareRotation(
            f"{image.image_id}: {image.height}x{image.width} image cannot "
            f"rotate by {angle} degrees"
        )
    k = angle // 90
    return LabeledImage(
        image_id=new_id or f"{image.image_id}~rot{angle}",
        features=np.rot90(image.features, k),
        labels=np.rot90(image.labels, k),
    )


def baseline_flip(dataset: Dataset, rng: RngStream, copies: int) -> Dataset:
    """Extend the training split with mirrored copies of random members."""
    if copies < 0:
        raise ValueError(f"copies must be >= 0, got {copies}")
    pool = dataset.train
    additions = []
    for i in range(copies):
        src = pool[rng.integers(len(pool))]
        additions.append(flip_image(src, new_id=f"{src.image_id}~flip~{i:04d}"))
    return replace(dataset, train=pool + tuple(additions))


def baseline_rotate(dataset: Dataset, rng: RngStream, copies: int) -> Dataset:
    """Extend the training split with rotated copies (90/180/270 only)."""
    if copies < 0:
        raise ValueError(f"copies must be >= 0, got {copies}")
    pool = dataset.train
    additions = []
    for i in range(copies):
        src = pool[rng.integers(len(pool))]
        angle = (90, 180, 270)[rng.integers(3)]
        additions.append(rotate_image(src, angle, new_id=f"{src.image_id}~rot{angle}~{i:04d}"))
    return replace(dataset, train=pool + tuple(additions))


@dataclass(frozen=True)
class SeedResult:
    """Before/after metrics of one seed's train-augment-retrain cycle."""

    seed: int
    class_accuracy_before: tuple[float, ...]
    class_accuracy_after: tuple[float, ...]
    density_before: float
    density_after: float
    total_events_before: int
    total_events_after: int
    forgettable_before: int
    forgettable_after: int
    images_added: int


@dataclass(frozen=True)
class ExperimentReport:
    """Aggregate over all seeds; the mean fields are derived, never stored."""

    train_config: TrainConfig
    augment_config: AugmentConfig
    class_names: tuple[str, ...]
    seed_results: tuple[SeedResult, ...]
    runtime_seconds: float
    mean_class_accuracy_before: tuple[float, ...] = field(init=False)
    mean_class_accuracy_after: tuple[float, ...] = field(init=False)
    mean_density_before: float = field(init=False)
    mean_density_after: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed_results", tuple(self.seed_results))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.seed_results:
            raise InvalidConfig("report needs at least one seed result")
        acc_b = np.mean([r.class_accuracy_before for r in self.seed_results], axis=0)
        acc_a = np.mean([r.class_accuracy_after for r in self.seed_results], axis=0)
        object.__setattr__(self, "mean_class_accuracy_before", tuple(float(v) for v in acc_b))
        object.__setattr__(self, "mean_class_accuracy_after", tuple(float(v) for v in acc_a))
        object.__setattr__(
            self, "mean_density_before",
            float(np.mean([r.density_before for r in self.seed_results])),
        )
        object.__setattr__(
            self, "mean_density_after",
            float(np.mean([r.density_after for r in self.seed_results])),
        )


def _mean_density(
    heatmaps: dict[str, HeatMap],
    images: Sequence[LabeledImage],
    class_id: int,
) -> float:
    densities = []
    for img in images:
        d = class_density(heatmaps[img.image_id], img, class_id)
        if d is not None:
            densities.append(d)
    if not densities:
        raise ClassAbsent(f"class {class_id} absent from every tracked image")
    return float(np.mean(densities))


def _extend_pool(
    dataset: Dataset,
    aug_cfg: AugmentConfig,
    sources: list[LabeledImage],
    copies: int,
    seed: int,
) -> Dataset:
    if aug_cfg.selector == "none":
        return dataset
    if aug_cfg.selector == "flip":
        return baseline_flip(dataset, RngStream(seed).derive("flip"), copies)
    if aug_cfg.selector == "rotate":
        return baseline_rotate(dataset, RngStream(seed).derive("rotate"), copies)

    rng = RngStream(seed).derive("transfer")
    candidates = [
        img for img in dataset.train if (img.labels == aug_cfg.target_class).any()
    ]
    if not candidates:
        raise ClassAbsent(
            f"class {aug_cfg.target_class} absent from every training image"
        )
    additions = []
    for source in sources:
        for j in range(aug_cfg.transfers_per_source):
            target = candidates[rng.integers(len(candidates))]
            additions.append(
                feature_transfer(
                    source,
                    target,
                    aug_cfg.target_class,
                    rng,
                    moment_match=aug_cfg.moment_match,
                    patch_size=aug_cfg.patch_size,
                    new_id=f"tx~{source.image_id}~{j:04d}",
                )
            )
    return replace(dataset, train=dataset.train + tuple(additions))


def _run_seed(
    dataset: Dataset,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    seed: int,
    heatmap_sink: HeatmapSink | None,
) -> SeedResult:
    cfg = replace(train_cfg, seed=seed)
    val = dataset.validation

    acc_before = TraceAccumulator(val, dataset.num_classes)
    model_before = train(dataset, cfg, snapshot_sink=acc_before.consume)
    heat_before = acc_before.heatmaps()

    ranking = rank_images(
        [(img.image_id, heat_before[img.image_id], img) for img in val],
        aug_cfg.target_class,
    )
    if not ranking.entries:
        raise ClassAbsent(
            f"class {aug_cfg.target_class} absent from every validation image"
        )
    source_ids = select_sources(ranking, aug_cfg.num_sources)
    by_id = {img.image_id: img for img in val}
    sources = [by_id[sid] for sid in source_ids]
    # Pool parity: every selector adds len(sources) * transfers_per_source
    # images, so shorter rankings shrink all conditions identically.
    copies = len(sources) * aug_cfg.transfers_per_source

    extended = _extend_pool(dataset, aug_cfg, sources, copies, seed)
    acc_after = TraceAccumulator(val, dataset.num_classes)
    model_after = train(extended, cfg, snapshot_sink=acc_after.consume)
    heat_after = acc_after.heatmaps()

    if heatmap_sink is not None:
        heatmap_sink(seed, "before", heat_before)
        heatmap_sink(seed, "after", heat_after)

    return SeedResult(
        seed=seed,
        class_accuracy_before=tuple(
            float(v) for v in per_class_accuracy(model_before, dataset.test, dataset.num_classes)
        ),
        class_accuracy_after=tuple(
            float(v) for v in per_class_accuracy(model_after, dataset.test, dataset.num_classes)
        ),
        density_before=_mean_density(heat_before, val, aug_cfg.target_class),
        density_after=_mean_density(heat_after, val, aug_cfg.target_class),
        total_events_before=sum(h.total_events() for h in heat_before.values()),
        total_events_after=sum(h.total_events() for h in heat_after.values()),
        forgettable_before=sum(int((h.counts >= 1).sum()) for h in heat_before.values()),
        forgettable_after=sum(int((h.counts >= 1).sum()) for h in heat_after.values()),
        images_added=len(extended.train) - len(dataset.train),
    )


def run_experiment(
    dataset: Dataset,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    heatmap_sink: HeatmapSink | None = None,
) -> ExperimentReport:
    """Run the full loop for every seed and aggregate.

    Seeds are fully isolated: each builds its own streams from its own value,
    so results do not depend on the order seeds are listed in. Retraining
    replays the exact same initialization and shuffling as the baseline run
    of the same seed, which makes selector "none" reproduce the baseline
    metrics exactly. runtime_seconds is informational and is not part of any
    serialized report.
    """
    train_cfg.validate()
    aug_cfg.validate()
    if not dataset.validation:
        raise InvalidConfig("experiment needs a validation split to rank")
    start = time.monotonic()
    results = tuple(
        _run_seed(dataset, train_cfg, aug_cfg, seed, heatmap_sink)
        for seed in aug_cfg.seeds
    )
    return ExperimentReport(
        train_config=train_cfg,
        augment_config=aug_cfg,
        class_names=dataset.class_names,
        seed_results=results,
        runtime_seconds=time.monotonic() - start,
    )
