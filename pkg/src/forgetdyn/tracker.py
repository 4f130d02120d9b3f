"""Streaming conversion of per-epoch prediction grids into forgetting heat maps.

Memory stays O(M*N) per traced image regardless of how many epochs arrive:
only the previous epoch's correctness bitmap and the running counters are
kept. A forgetting event is the 1 -> 0 transition of a pixel's correctness
between adjacent epochs, so E snapshots yield exactly E - 1 comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from .core import (
    AccuracyBitmap,
    DimensionMismatch,
    EmptyTrace,
    EpochGap,
    HeatMap,
    LabeledImage,
    validate_pair,
)


class PixelGroup(IntEnum):
    """Partition of traced pixels by forgetting behaviour."""

    UNFORGETTABLE = 0
    FORGETTABLE = 1
    NEVER_LEARNED = 2


def pixel_accuracy(
    pred: np.ndarray,
    image: LabeledImage,
    epoch: int,
    num_classes: int,
    ignore_label: int | None = None,
) -> AccuracyBitmap:
    """Bitmap of per-pixel prediction correctness against the annotation.

    Pixels whose annotation equals ignore_label are reported incorrect, so
    they never enter the correct state and never produce forgetting events
    downstream; they surface as never-learned rather than as unforgettable.
    """
    pred = np.asarray(pred)
    validate_pair(pred, image.labels, num_classes, ignore_label=ignore_label)
    bits = pred == image.labels
    if ignore_label is not None:
        bits &= image.labels != ignore_label
    return AccuracyBitmap(bits=bits.astype(np.uint8), epoch=epoch)


@dataclass(frozen=True)
class TraceState:
    """Everything needed to continue a trace: last bitmap plus running heat map."""

    image_id: str
    prev_acc: AccuracyBitmap
    heatmap: HeatMap

    def __post_init__(self) -> None:
        if self.prev_acc.shape != self.heatmap.shape:
            raise DimensionMismatch(
                f"bitmap {self.prev_acc.shape} vs heat map {self.heatmap.shape}"
            )
        if self.prev_acc.epoch != self.heatmap.epochs_observed - 1:
            raise EpochGap(
                f"bitmap epoch {self.prev_acc.epoch} inconsistent with "
                f"{self.heatmap.epochs_observed} consumed snapshots"
            )


def begin_trace(image_id: str, first: AccuracyBitmap) -> TraceState:
    """Open a trace; the first snapshot must carry epoch 0."""
    if first.epoch != 0:
        raise EpochGap(f"trace must start at epoch 0, got {first.epoch}")
    heat = HeatMap(
        counts=np.zeros(first.shape, dtype=np.int64),
        epochs_observed=1,
        ever_correct=first.bits,
    )
    return TraceState(image_id=image_id, prev_acc=first, heatmap=heat)


def forgetting_step(state: TraceState, curr: AccuracyBitmap) -> TraceState:
    """Fold one more epoch into a trace.

    A pixel is forgotten when it was correct at the previous epoch and is
    wrong now; only that transition increments its count. Epoch numbers must
    be consecutive: a gap would silently merge distinct transitions, so it is
    a hard error.
    """
    expected = state.prev_acc.epoch + 1
    if curr.epoch != expected:
        raise EpochGap(f"expected epoch {expected}, got {curr.epoch}")
    if curr.shape != state.prev_acc.shape:
        raise DimensionMismatch(
            f"snapshot shape {curr.shape} vs trace shape {state.prev_acc.shape}"
        )
    forgotten = (state.prev_acc.bits == 1) & (curr.bits == 0)
    heat = HeatMap(
        counts=state.heatmap.counts + forgotten,
        epochs_observed=state.heatmap.epochs_observed + 1,
        ever_correct=state.heatmap.ever_correct | curr.bits,
    )
    return TraceState(image_id=state.image_id, prev_acc=curr, heatmap=heat)


def run_trace(
    snapshots: Iterable[np.ndarray],
    image: LabeledImage,
    num_classes: int,
    ignore_label: int | None = None,
) -> HeatMap:
    """Trace a whole prediction-snapshot sequence (epochs 0..E-1) at once.

    Streaming: each snapshot is folded in as it arrives and discarded, so an
    arbitrarily long sequence costs one bitmap of memory.
    """
    counts: np.ndarray | None = None
    prev: np.ndarray | None = None
    ever: np.ndarray | None = None
    epochs = 0
    for epoch, pred in enumerate(snapshots):
        acc = pixel_accuracy(pred, image, epoch, num_classes, ignore_label)
        bits = acc.bits.astype(bool)
        if counts is None:
            counts = np.zeros(image.shape, dtype=np.int64)
            ever = bits.copy()
        else:
            counts[prev & ~bits] += 1
            ever |= bits
        prev = bits
        epochs += 1
    if counts is None:
        raise EmptyTrace("need at least one prediction snapshot")
    return HeatMap(counts=counts, epochs_observed=epochs, ever_correct=ever)


def partition_pixels(heatmap: HeatMap, threshold: int = 1) -> np.ndarray:
    """Assign every pixel to exactly one PixelGroup.

    Forgettable means at least `threshold` forgetting events; never-learned
    means not once predicted correctly (count 0, but deliberately kept apart
    from the unforgettable group); everything else is unforgettable.
    """
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    out = np.full(heatmap.shape, PixelGroup.UNFORGETTABLE, dtype=np.int8)
    out[heatmap.counts >= threshold] = PixelGroup.FORGETTABLE
    out[heatmap.ever_correct == 0] = PixelGroup.NEVER_LEARNED
    return out


class TraceAccumulator:
    """Mutable sink that turns (epoch, image_id, prediction) calls into heat maps.

    Tracks exactly the images it was given; snapshots for other ids are
    ignored, which lets one training run feed several accumulators. Per image,
    epochs must arrive consecutively starting at 0.
    """

    def __init__(
        self,
        images: Iterable[LabeledImage],
        num_classes: int,
        ignore_label: int | None = None,
    ) -> None:
        self._images = {img.image_id: img for img in images}
        self._num_classes = num_classes
        self._ignore_label = ignore_label
        self._counts = {
            iid: np.zeros(img.shape, dtype=np.int64) for iid, img in self._images.items()
        }
        self._ever = {
            iid: np.zeros(img.shape, dtype=bool) for iid, img in self._images.items()
        }
        self._prev: dict[str, np.ndarray | None] = {iid: None for iid in self._images}
        self._epochs = {iid: 0 for iid in self._images}

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(self._images)

    def consume(self, epoch: int, image_id: str, pred: np.ndarray) -> None:
        if image_id not in self._images:
            return
        if epoch != self._epochs[image_id]:
            raise EpochGap(
                f"{image_id}: expected epoch {self._epochs[image_id]}, got {epoch}"
            )
        acc = pixel_accuracy(
            pred, self._images[image_id], epoch, self._num_classes, self._ignore_label
        )
        bits = acc.bits.astype(bool)
        prev = self._prev[image_id]
        if prev is not None:
            self._counts[image_id][prev & ~bits] += 1
        self._ever[image_id] |= bits
        self._prev[image_id] = bits
        self._epochs[image_id] += 1

    def heatmap(self, image_id: str) -> HeatMap:
        if self._epochs[image_id] == 0:
            raise EmptyTrace(f"{image_id}: no snapshots consumed")
        return HeatMap(
            counts=self._counts[image_id],
            epochs_observed=self._epochs[image_id],
            ever_correct=self._ever[image_id],
        )

    def heatmaps(self) -> dict[str, HeatMap]:
        return {iid: self.heatmap(iid) for iid in self._images}
