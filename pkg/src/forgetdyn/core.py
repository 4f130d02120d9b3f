"""Shared domain types, the error taxonomy, and the deterministic random source.

Every other module (tracking, analytics, training, augmentation, CLI) builds
on the types defined here. Grids are plain numpy arrays; the dataclasses
freeze them read-only on construction so instances can be shared safely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ForgetDynError",
    "DimensionMismatch",
    "InvalidClassId",
    "EpochGap",
    "EmptyTrace",
    "InvalidConfig",
    "OutOfBounds",
    "UntrainedModel",
    "NumericalDivergence",
    "DegenerateGroups",
    "EmptyRanking",
    "ClassAbsent",
    "DegenerateRegion",
    "NonSquareRotation",
    "LabeledImage",
    "AccuracyBitmap",
    "HeatMap",
    "DensityEntry",
    "DensityRanking",
    "Dataset",
    "RngStream",
    "max_forgetting_count",
    "validate_pair",
]


class ForgetDynError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(ForgetDynError):
    """Two grids that must share a shape do not."""


class InvalidClassId(ForgetDynError):
    """A label or prediction lies outside [0, num_classes)."""


class EpochGap(ForgetDynError):
    """Accuracy snapshots arrived with non-consecutive epoch numbers."""


class EmptyTrace(ForgetDynError):
    """A trace was requested over zero snapshots."""


class InvalidConfig(ForgetDynError):
    """A configuration value is out of its legal range."""


class OutOfBounds(ForgetDynError):
    """A pixel index falls outside the image grid."""


class UntrainedModel(ForgetDynError):
    """The model has no usable parameters for the requested operation."""


class NumericalDivergence(ForgetDynError):
    """Training produced a non-finite loss or non-finite parameters."""


class DegenerateGroups(ForgetDynError):
    """A statistic is undefined because a pixel group is too small or constant."""


class EmptyRanking(ForgetDynError):
    """Source selection was asked to draw from a ranking with no entries."""


class ClassAbsent(ForgetDynError):
    """An operation requires a class that does not occur in the given image."""


class DegenerateRegion(ForgetDynError):
    """A transfer source region has zero variance where variance is required."""


class NonSquareRotation(ForgetDynError):
    """A 90 or 270 degree rotation was requested on a non-square image."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def max_forgetting_count(epochs_observed: int) -> int:
    """Largest per-pixel forgetting count reachable over E snapshots.

    E snapshots give E - 1 adjacent comparisons, and events need a correct
    epoch between them, so the alternating trace 1,0,1,0,... attains the
    ceiling of (E - 1) / 2.
    """
    return max(int(epochs_observed), 0) // 2


def validate_pair(
    pred: np.ndarray,
    truth: np.ndarray,
    num_classes: int,
    ignore_label: int | None = None,
) -> None:
    """Check that a prediction/annotation grid pair is mutually consistent.

    Raises DimensionMismatch when shapes differ and InvalidClassId when any
    entry falls outside [0, num_classes). Annotation pixels equal to
    ignore_label are exempt from the class-id check.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionMismatch(
            f"prediction grid {pred.shape} vs annotation grid {truth.shape}"
        )
    for name, grid in (("prediction", pred), ("annotation", truth)):
        vals = grid
        if name == "annotation" and ignore_label is not None:
            vals = grid[grid != ignore_label]
        if vals.size == 0:
            continue
        lo, hi = int(vals.min()), int(vals.max())
        if lo < 0 or hi >= num_classes:
            raise InvalidClassId(
                f"{name} grid contains class id outside [0, {num_classes}): "
                f"range [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class LabeledImage:
    """A 2D section: one scalar intensity per pixel plus a class annotation."""

    image_id: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64)
        labs = np.array(self.labels, dtype=np.int64)
        if feats.ndim != 2 or min(feats.shape) < 1:
            raise DimensionMismatch(
                f"features must be a non-empty 2D grid, got shape {feats.shape}"
            )
        if labs.shape != feats.shape:
            raise DimensionMismatch(
                f"labels shape {labs.shape} does not match features {feats.shape}"
            )
        if labs.min() < 0:
            raise InvalidClassId("labels contain a negative class id")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labs))

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class AccuracyBitmap:
    """Per-pixel prediction correctness at one training epoch."""

    bits: np.ndarray
    epoch: int

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=np.uint8)
        if bits.ndim != 2 or min(bits.shape) < 1:
            raise DimensionMismatch(
                f"bits must be a non-empty 2D grid, got shape {bits.shape}"
            )
        if bits.max() > 1:
            raise ValueError("accuracy bits must be 0 or 1")
        if int(self.epoch) < 0:
            raise ValueError(f"epoch must be >= 0, got {self.epoch}")
        object.__setattr__(self, "bits", _freeze(bits))
        object.__setattr__(self, "epoch", int(self.epoch))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


@dataclass(frozen=True)
class HeatMap:
    """Per-pixel forgetting-event counts accumulated over a trace window.

    ever_correct distinguishes pixels that were never predicted correctly
    (count 0 by definition, but not "unforgettable") from pixels that were
    learned once and never lost.
    """

    counts: np.ndarray
    epochs_observed: int
    ever_correct: np.ndarray

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        ever = np.array(self.ever_correct, dtype=np.uint8)
        epochs = int(self.epochs_observed)
        if counts.ndim != 2 or min(counts.shape) < 1:
            raise DimensionMismatch(
                f"counts must be a non-empty 2D grid, got shape {counts.shape}"
            )
        if ever.shape != counts.shape:
            raise DimensionMismatch(
                f"ever_correct shape {ever.shape} does not match counts {counts.shape}"
            )
        if ever.max(initial=0) > 1:
            raise ValueError("ever_correct entries must be 0 or 1")
        if epochs < 0:
            raise ValueError(f"epochs_observed must be >= 0, got {epochs}")
        if counts.min() < 0:
            raise ValueError("forgetting counts must be >= 0")
        if int(counts.max()) > max_forgetting_count(epochs):
            raise ValueError(
                f"count {int(counts.max())} exceeds the ceiling "
                f"{max_forgetting_count(epochs)} for {epochs} snapshots"
            )
        if counts[ever == 0].any():
            raise ValueError("a never-correct pixel carries a nonzero count")
        object.__setattr__(self, "counts", _freeze(counts))
        object.__setattr__(self, "ever_correct", _freeze(ever))
        object.__setattr__(self, "epochs_observed", epochs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def total_events(self) -> int:
        return int(self.counts.sum())


class DensityEntry(NamedTuple):
    image_id: str
    density: float
    pixel_count: int


@dataclass(frozen=True)
class DensityRanking:
    """Images ordered by descending forgetting-event density for one class.

    Only images where the class occurs are listed; ties are broken by
    ascending image id so rankings are reproducible.
    """

    class_id: int
    entries: tuple[DensityEntry, ...]

    def __post_init__(self) -> None:
        entries = tuple(DensityEntry(*e) for e in self.entries)
        if int(self.class_id) < 0:
            raise InvalidClassId(f"class id must be >= 0, got {self.class_id}")
        for e in entries:
            if e.pixel_count <= 0:
                raise ValueError(f"{e.image_id}: ranked images need pixel_count > 0")
            if not np.isfinite(e.density) or e.density < 0:
                raise ValueError(f"{e.image_id}: density must be finite and >= 0")
        keys = [(-e.density, e.image_id) for e in entries]
        if keys != sorted(keys):
            raise ValueError("entries must be sorted by descending density, id order")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "class_id", int(self.class_id))

    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


@dataclass(frozen=True)
class Dataset:
    """Train/validation/test splits sharing one class vocabulary."""

    num_classes: int
    class_names: tuple[str, ...]
    train: tuple[LabeledImage, ...]
    validation: tuple[LabeledImage, ...]
    test: tuple[LabeledImage, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "validation", tuple(self.validation))
        object.__setattr__(self, "test", tuple(self.test))
        if self.num_classes < 2:
            raise InvalidConfig(f"need at least 2 classes, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise InvalidConfig(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )
        seen: set[str] = set()
        for img in self.all_images():
            if img.image_id in seen:
                raise InvalidConfig(f"duplicate image id {img.image_id!r}")
            seen.add(img.image_id)
            if img.labels.max() >= self.num_classes:
                raise InvalidClassId(
                    f"{img.image_id}: label {int(img.labels.max())} outside "
                    f"[0, {self.num_classes})"
                )

    def all_images(self) -> Iterator[LabeledImage]:
        yield from self.train
        yield from self.validation
        yield from self.test


# SplitMix64 constants (Steele et al. mixing function; 64-bit wrapping).
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1CE4E5B9
_SM64_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z &= _U64
    z = ((z ^ (z >> 30)) * _SM64_MIX1) & _U64
    z = ((z ^ (z >> 27)) * _SM64_MIX2) & _U64
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


class RngStream:
    """Deterministic counter-based random stream (SplitMix64).

    Draw i is mix64(seed + (i + 1) * gamma) in wrapping 64-bit arithmetic,
    so the sequence is a pure function of (seed, counter), identical across
    platforms, and whole blocks can be produced vectorized. `derive` builds
    statistically independent child streams from string/int keys without
    consuming anything from the parent, which is how concurrent consumers
    are kept isolated.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _U64
        self._counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed:#x}, drawn={self._counter})"

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError(f"cannot draw {n} values")
        # Array (not scalar) uint64 ops: numpy wraps arrays silently.
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = np.uint64(self.seed) + idx * np.uint64(_SM64_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self.raw(1)[0])

    def uniform(self, size: int | tuple[int, ...] | None = None):
        """Floats in [0, 1) with 53-bit resolution."""
        shape = self._shape(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(shape)

    def integers(self, bound: int, size: int | tuple[int, ...] | None = None):
        """Uniform ints in [0, bound). Modulo bias is < bound / 2**64."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        shape = self._shape(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        v = (self.raw(n) % np.uint64(bound)).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(shape)

    def normal(self, mean: float = 0.0, std: float = 1.0,
               size: int | tuple[int, ...] | None = None):
        """Gaussian draws via Box-Muller over consecutive raw pairs."""
        shape = self._shape(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        r = self.raw(2 * pairs)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        u1 = ((r[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (r[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        out = out[:n] * std + mean
        return float(out[0]) if size is None else out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): argsort of n raw keys.

        Keys are 64-bit, so ties (the only way sort order could depend on
        the sort algorithm) have probability under n^2 / 2^65.
        """
        return np.argsort(self.raw(n))

    def derive(self, *keys: int | str) -> "RngStream":
        """Independent child stream keyed by strings/ints; parent untouched."""
        if not keys:
            raise ValueError("derive needs at least one key")
        state = self.seed
        for key in keys:
            if isinstance(key, str):
                data = key.encode("utf-8")
            elif isinstance(key, (int, np.integer)):
                data = (int(key) & _U64).to_bytes(8, "little")
            else:
                raise TypeError(f"derive keys must be int or str, got {type(key)}")
            state = _mix64(state ^ _fnv1a(data))
        return RngStream(state)

    @staticmethod
    def _shape(size: int | tuple[int, ...] | None) -> tuple[int, ...]:
        if size is None:
            return ()
        if isinstance(size, (int, np.integer)):
            return (int(size),)
        return tuple(int(s) for s in size)
