"""Density, ranking, and decision-boundary margin statistics over heat maps.

Density uses the ground-truth annotation, not predictions: the question is
how often pixels of a class get forgotten, independent of what the model
currently calls them. Images where a class does not occur are excluded from
rankings rather than reported as zero, since "never forgotten" and "not
present" are different findings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import stats

from .core import (
    DegenerateGroups,
    DensityEntry,
    DensityRanking,
    DimensionMismatch,
    HeatMap,
    LabeledImage,
    UntrainedModel,
)
from .tracker import PixelGroup, partition_pixels
from .trainer import FEATURE_DIM, ToyModel, feature_grid


def _class_events(heatmap: HeatMap, image: LabeledImage, class_id: int) -> tuple[int, int]:
    if heatmap.shape != image.shape:
        raise DimensionMismatch(
            f"heat map {heatmap.shape} vs image {image.shape}"
        )
    mask = image.labels == class_id
    return int(heatmap.counts[mask].sum()), int(mask.sum())


def class_density(heatmap: HeatMap, image: LabeledImage, class_id: int) -> float | None:
    """Forgetting events per annotated pixel of one class.

    Returns None when the class has no pixels in the image, so absence can
    never masquerade as a perfectly-retained class.
    """
    events, pixels = _class_events(heatmap, image, class_id)
    if pixels == 0:
        return None
    return events / pixels


def rank_images(
    heatmaps: Iterable[tuple[str, HeatMap, LabeledImage]],
    class_id: int,
) -> DensityRanking:
    """Order images by descending class density, ties by ascending image id."""
    entries = []
    for image_id, heat, image in heatmaps:
        events, pixels = _class_events(heat, image, class_id)
        if pixels == 0:
            continue
        entries.append(DensityEntry(image_id, events / pixels, pixels))
    entries.sort(key=lambda e: (-e.density, e.image_id))
    return DensityRanking(class_id=class_id, entries=tuple(entries))


@dataclass(frozen=True)
class MarginField:
    """Per-pixel distance to the nearest decision boundary, with the two
    classes that define it."""

    margins: np.ndarray
    top_class: np.ndarray
    runner_up: np.ndarray

    def __post_init__(self) -> None:
        margins = np.array(self.margins, dtype=np.float64)
        top = np.array(self.top_class, dtype=np.int64)
        second = np.array(self.runner_up, dtype=np.int64)
        if margins.shape != top.shape or margins.shape != second.shape:
            raise DimensionMismatch("margin grids must share one shape")
        if margins.size and (not np.isfinite(margins).all() or margins.min() < 0):
            raise ValueError("margins must be finite and >= 0")
        for arr in (margins, top, second):
            arr.setflags(write=False)
        object.__setattr__(self, "margins", margins)
        object.__setattr__(self, "top_class", top)
        object.__setattr__(self, "runner_up", second)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.margins.shape


def margin_from_features(
    weights: np.ndarray,
    biases: np.ndarray,
    features: np.ndarray,
) -> MarginField:
    """Top-2 score gap normalized by the weight-row difference.

    With scores s1 >= s2 for the best and runner-up classes, the margin is
    (s1 - s2) / ||w1 - w2||: the Euclidean distance from the feature vector
    to the pairwise decision hyperplane. Score ties give margin 0; identical
    weight rows (zero normal vector) also give 0 rather than dividing by
    zero. Ties in the argmax resolve to the lowest class id.
    """
    weights = np.asarray(weights, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] < 2:
        raise ValueError(f"need a (C, D) weight matrix with C >= 2, got {weights.shape}")
    if features.shape[-1] != weights.shape[1]:
        raise DimensionMismatch(
            f"features have dim {features.shape[-1]}, weights expect {weights.shape[1]}"
        )
    scores = features @ weights.T + biases
    order = np.argsort(-scores, axis=-1, kind="stable")
    top1 = order[..., 0]
    top2 = order[..., 1]
    s1 = np.take_along_axis(scores, top1[..., None], axis=-1)[..., 0]
    s2 = np.take_along_axis(scores, top2[..., None], axis=-1)[..., 0]
    norm = np.linalg.norm(weights[top1] - weights[top2], axis=-1)
    gap = s1 - s2
    margins = np.divide(gap, norm, out=np.zeros_like(gap), where=norm > 0)
    return MarginField(margins=margins, top_class=top1, runner_up=top2)


def margin(model: ToyModel, image: LabeledImage) -> MarginField:
    """Margins for every pixel of an image under the linear pixel model."""
    if not (np.isfinite(model.weights).all() and np.isfinite(model.biases).all()):
        raise UntrainedModel("model parameters are not finite")
    if np.all(model.weights == model.weights[0]) and np.all(model.biases == model.biases[0]):
        raise UntrainedModel(
            "all classes score identically everywhere (e.g. fresh zero "
            "initialization); margins are undefined"
        )
    if model.feature_dim != FEATURE_DIM:
        raise DimensionMismatch(
            f"model expects {model.feature_dim} features, images provide {FEATURE_DIM}"
        )
    return margin_from_features(model.weights, model.biases, feature_grid(image))


@dataclass(frozen=True)
class MarginStats:
    """Summary of how margins relate to forgetting counts on one grid."""

    rank_correlation: float
    mean_margin_forgettable: float
    mean_margin_unforgettable: float
    forgettable_pixels: int
    unforgettable_pixels: int


def margin_forgetting_correlation(
    heatmap: HeatMap,
    margins: MarginField,
    threshold: int = 1,
) -> MarginStats:
    """Spearman correlation of count vs margin, plus the two group means.

    Never-learned pixels are excluded throughout: they have no meaningful
    margin-retention story. Raises DegenerateGroups when either pixel group
    has fewer than two members or when counts or margins are constant, since
    no ranking exists in those cases.
    """
    if heatmap.shape != margins.shape:
        raise DimensionMismatch(
            f"heat map {heatmap.shape} vs margin field {margins.shape}"
        )
    groups = partition_pixels(heatmap, threshold=threshold)
    keep = groups != PixelGroup.NEVER_LEARNED
    forgettable = groups == PixelGroup.FORGETTABLE
    unforgettable = groups == PixelGroup.UNFORGETTABLE
    n_forget = int(forgettable.sum())
    n_keep = int(unforgettable.sum())
    if n_forget < 2 or n_keep < 2:
        raise DegenerateGroups(
            f"need >= 2 pixels per group, got {n_forget} forgettable / "
            f"{n_keep} unforgettable"
        )
    counts = heatmap.counts[keep].astype(np.float64)
    vals = margins.margins[keep]
    if counts.min() == counts.max() or vals.min() == vals.max():
        raise DegenerateGroups("counts or margins are constant; no ranking exists")
    rho = float(stats.spearmanr(counts, vals).statistic)
    return MarginStats(
        rank_correlation=rho,
        mean_margin_forgettable=float(margins.margins[forgettable].mean()),
        mean_margin_unforgettable=float(margins.margins[unforgettable].mean()),
        forgettable_pixels=n_forget,
        unforgettable_pixels=n_keep,
    )
