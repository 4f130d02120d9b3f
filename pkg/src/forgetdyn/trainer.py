"""Synthetic layered dataset plus a deterministic linear pixel classifier.

Stands in for a full segmentation pipeline at desk scale: images are stacks
of horizontal bands with per-slice boundary undulation (one band deliberately
thin and spectrally ambiguous), and the model is multinomial logistic
regression over four handcrafted per-pixel features. Everything is a pure
function of (config, seed) so traces can be reproduced bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    InvalidConfig,
    LabeledImage,
    NumericalDivergence,
    OutOfBounds,
    RngStream,
    UntrainedModel,
)

FEATURE_DIM = 4
DEFAULT_DATASET_SEED = 7

# Called after every epoch as sink(epoch, image_id, prediction_grid).
SnapshotSink = Callable[[int, str, np.ndarray], None]


@dataclass(frozen=True)
class SyntheticConfig:
    """Layout of the synthetic layered volume.

    band_layout lists (class_id, relative thickness) top to bottom. The
    default wedges class 5 as a thin band (10 percent of rows) between two
    much thicker bands whose intensities bracket its own, so it is learned
    only partially and keeps oscillating: the hard, underrepresented class.
    Every fifth slice index per orientation becomes validation.
    """

    height: int = 64
    width: int = 64
    num_classes: int = 6
    band_layout: tuple[tuple[int, float], ...] = (
        (0, 0.21),
        (1, 0.20),
        (5, 0.10),
        (2, 0.18),
        (3, 0.16),
        (4, 0.15),
    )
    class_intensity: tuple[tuple[float, float], ...] = (
        (0.20, 0.05),
        (0.35, 0.05),
        (0.50, 0.05),
        (0.65, 0.05),
        (0.80, 0.05),
        (0.45, 0.07),
    )
    boundary_jitter: int = 3
    underrepresented: tuple[int, ...] = (5,)
    inline_count: int = 20
    crossline_count: int = 20
    test_count: int = 8
    class_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        # Normalize JSON-sourced lists so configs compare and replace cleanly.
        object.__setattr__(
            self, "band_layout",
            tuple((int(c), float(f)) for c, f in self.band_layout),
        )
        object.__setattr__(
            self, "class_intensity",
            tuple((float(m), float(s)) for m, s in self.class_intensity),
        )
        object.__setattr__(self, "underrepresented", tuple(self.underrepresented))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise InvalidConfig(f"grid {self.height}x{self.width} is empty")
        if self.num_classes < 2:
            raise InvalidConfig(f"need at least 2 classes, got {self.num_classes}")
        if not self.band_layout:
            raise InvalidConfig("band layout is empty")
        layout_classes = {cid for cid, _ in self.band_layout}
        if layout_classes != set(range(self.num_classes)):
            raise InvalidConfig(
                f"band layout covers classes {sorted(layout_classes)}, "
                f"expected 0..{self.num_classes - 1}"
            )
        total = sum(frac for _, frac in self.band_layout)
        if any(frac <= 0 for _, frac in self.band_layout) or abs(total - 1.0) > 1e-9:
            raise InvalidConfig(f"band thicknesses must be positive and sum to 1, got {total}")
        if len(self.class_intensity) != self.num_classes:
            raise InvalidConfig(
                f"{len(self.class_intensity)} intensity pairs for {self.num_classes} classes"
            )
        if any(std < 0 for _, std in self.class_intensity):
            raise InvalidConfig("intensity std must be >= 0")
        if self.boundary_jitter < 0:
            raise InvalidConfig(f"boundary jitter must be >= 0, got {self.boundary_jitter}")
        if not self.underrepresented:
            raise InvalidConfig("at least one class must be marked underrepresented")
        if not set(self.underrepresented) <= set(range(self.num_classes)):
            raise InvalidConfig(f"underrepresented ids {self.underrepresented} out of range")
        if self.inline_count < 0 or self.crossline_count < 0 or self.test_count < 0:
            raise InvalidConfig("slice counts must be >= 0")
        if self.inline_count + self.crossline_count < 1:
            raise InvalidConfig("need at least one inline or crossline slice")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise InvalidConfig(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )

    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        return tuple(f"class_{i}" for i in range(self.num_classes))


def _render_slice(cfg: SyntheticConfig, rng: RngStream, image_id: str) -> LabeledImage:
    """One slice: jittered horizontal bands, then per-class Gaussian intensity."""
    m, n = cfg.height, cfg.width
    fracs = np.cumsum([frac for _, frac in cfg.band_layout])[:-1]
    base = np.rint(fracs * m).astype(np.int64)

    cols = np.arange(n)
    bounds = np.empty((len(base), n), dtype=np.int64)
    for k, row in enumerate(base):
        # Smooth sinusoidal undulation, bounded by the jitter amplitude.
        amp = rng.uniform() * cfg.boundary_jitter
        freq = 1 + rng.integers(3)
        phase = rng.uniform() * 2.0 * np.pi
        offset = np.rint(amp * np.sin(2.0 * np.pi * freq * cols / n + phase))
        bounds[k] = np.clip(row + offset.astype(np.int64), 0, m)
    # Keep boundaries ordered so bands never invert under heavy jitter.
    bounds = np.maximum.accumulate(bounds, axis=0)

    rows = np.arange(m)[:, None]
    band = np.zeros((m, n), dtype=np.int64)
    for k in range(len(base)):
        band += rows >= bounds[k][None, :]
    class_of_band = np.asarray([cid for cid, _ in cfg.band_layout], dtype=np.int64)
    labels = class_of_band[band]

    means = np.asarray([mu for mu, _ in cfg.class_intensity])
    stds = np.asarray([sd for _, sd in cfg.class_intensity])
    noise = rng.normal(size=(m, n))
    features = means[labels] + stds[labels] * noise
    return LabeledImage(image_id=image_id, features=features, labels=labels)


def generate_dataset(cfg: SyntheticConfig, rng: RngStream) -> Dataset:
    """Build the train/validation/test splits of layered slices.

    Slices whose index is a multiple of 5 (per orientation) form the
    validation split; test slices come from their own substream. Each slice
    is rendered from a derived child stream, so the output depends only on
    (cfg, rng.seed) and not on anything drawn from `rng` beforehand.
    """
    cfg.validate()
    train: list[LabeledImage] = []
    validation: list[LabeledImage] = []
    for orientation, count in (("inline", cfg.inline_count),
                               ("crossline", cfg.crossline_count)):
        for i in range(count):
            img = _render_slice(cfg, rng.derive(orientation, i), f"{orientation}_{i:03d}")
            (validation if i % 5 == 0 else train).append(img)
    test = [
        _render_slice(cfg, rng.derive("test", i), f"test_{i:03d}")
        for i in range(cfg.test_count)
    ]
    return Dataset(
        num_classes=cfg.num_classes,
        class_names=cfg.resolved_class_names(),
        train=tuple(train),
        validation=tuple(validation),
        test=tuple(test),
    )


def feature_grid(image: LabeledImage) -> np.ndarray:
    """Per-pixel feature vectors for a whole image, shape (M, N, 4).

    Components: raw intensity, 3x3 neighborhood mean, 3x3 neighborhood
    standard deviation (edges clamped, so border pixels reuse their nearest
    in-bounds neighbors), and row coordinate normalized by image height.
    """
    f = image.features
    m, n = f.shape
    padded = np.pad(f, 1, mode="edge")
    stack = np.stack(
        [padded[dr:dr + m, dc:dc + n] for dr in range(3) for dc in range(3)]
    )
    mean = stack.mean(axis=0)
    var = np.maximum((stack * stack).mean(axis=0) - mean * mean, 0.0)
    row = np.broadcast_to((np.arange(m) / m)[:, None], (m, n))
    return np.stack([f, mean, np.sqrt(var), row], axis=-1)


def extract_features(image: LabeledImage, index: tuple[int, int]) -> np.ndarray:
    """Feature vector of one pixel; see feature_grid for the components."""
    r, c = index
    m, n = image.shape
    if not (0 <= r < m and 0 <= c < n):
        raise OutOfBounds(f"pixel {index} outside {m}x{n} grid")
    rows = np.clip([r - 1, r, r + 1], 0, m - 1)
    cols = np.clip([c - 1, c, c + 1], 0, n - 1)
    neigh = image.features[np.ix_(rows, cols)]
    mean = neigh.mean()
    var = max((neigh * neigh).mean() - mean * mean, 0.0)
    return np.array([image.features[r, c], mean, np.sqrt(var), r / m])


@dataclass(frozen=True)
class ToyModel:
    """Linear (softmax) pixel classifier plus its training provenance."""

    weights: np.ndarray
    biases: np.ndarray
    epochs_run: int
    learning_rate: float
    seed: int

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidConfig(
                f"weights {w.shape} and biases {b.shape} are inconsistent"
            )
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings. learning_rate 0 is legal and trains nothing,
    which gives the all-zero-heat-map null run used to calibrate tests."""

    epochs: int = 60
    learning_rate: float = 0.1
    batch_size: int = 256
    seed: int = 0
    snapshot_every: int = 1
    track_train: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise InvalidConfig(
                f"learning rate must be finite and >= 0, got {self.learning_rate}"
            )
        if self.batch_size < 1:
            raise InvalidConfig(f"batch size must be >= 1, got {self.batch_size}")
        if self.snapshot_every < 1:
            raise InvalidConfig(f"snapshot cadence must be >= 1, got {self.snapshot_every}")


def _scores(feats2d: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    return feats2d @ weights.T + biases


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    snapshot_sink: SnapshotSink | None = None,
) -> ToyModel:
    """Minibatch gradient descent on softmax cross-entropy, from zero weights.

    After each epoch (at the configured cadence) the prediction grid of every
    validation and test image, plus training images when cfg.track_train, is
    pushed to snapshot_sink as (epoch, image_id, grid) with 0-based epochs.
    Deterministic given (dataset, cfg): shuffling comes from a stream derived
    from cfg.seed. Raises NumericalDivergence when the loss or the parameters
    stop being finite.
    """
    cfg.validate()
    if not dataset.train:
        raise InvalidConfig("training split is empty")

    # Bias folded into a constant-1 feature column: one GEMM scores the
    # batch and one more yields weight and bias gradients together.
    x = np.concatenate(
        [feature_grid(img).reshape(-1, FEATURE_DIM) for img in dataset.train]
    )
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.concatenate([img.labels.reshape(-1) for img in dataset.train])
    n = y.shape[0]
    c = dataset.num_classes

    tracked: list[tuple[str, np.ndarray, tuple[int, int]]] = []
    watch = list(dataset.validation) + list(dataset.test)
    if cfg.track_train:
        watch = list(dataset.train) + watch
    for img in watch:
        tracked.append((img.image_id, feature_grid(img).reshape(-1, FEATURE_DIM), img.shape))

    waug = np.zeros((c, FEATURE_DIM + 1))
    rng = RngStream(cfg.seed).derive("train")

    row_idx = np.arange(cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        # One contiguous gather per epoch; batches then slice for free.
        x_shuf = np.take(x, perm, axis=0)
        y_shuf = np.take(y, perm)
        loss_total = 0.0
        for start in range(0, n, cfg.batch_size):
            xb = x_shuf[start:start + cfg.batch_size]
            yb = y_shuf[start:start + cfg.batch_size]
            rows = row_idx[: len(yb)]
            scores = xb @ waug.T
            scores -= scores.max(axis=1, keepdims=True)
            expd = np.exp(scores)
            denom = expd.sum(axis=1)
            loss_total += float(np.log(denom).sum() - scores[rows, yb].sum())
            expd /= denom[:, None]
            expd[rows, yb] -= 1.0
            waug -= (cfg.learning_rate / len(yb)) * (expd.T @ xb)
        if not np.isfinite(loss_total) or not np.isfinite(waug).all():
            raise NumericalDivergence(f"non-finite loss or weights at epoch {epoch}")
        if snapshot_sink is not None and epoch % cfg.snapshot_every == 0:
            for image_id, feats2d, shape in tracked:
                pred = np.argmax(
                    _scores(feats2d, waug[:, :FEATURE_DIM], waug[:, FEATURE_DIM]), axis=1
                )
                snapshot_sink(epoch, image_id, pred.reshape(shape))

    return ToyModel(
        weights=waug[:, :FEATURE_DIM],
        biases=waug[:, FEATURE_DIM],
        epochs_run=cfg.epochs,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
    )


def predict(model: ToyModel, image: LabeledImage) -> np.ndarray:
    """Per-pixel argmax of the linear class scores; ties go to the lowest id."""
    if not (np.isfinite(model.weights).all() and np.isfinite(model.biases).all()):
        raise UntrainedModel("model parameters are not finite")
    if model.feature_dim != FEATURE_DIM:
        raise InvalidConfig(
            f"model expects {model.feature_dim} features, images provide {FEATURE_DIM}"
        )
    feats = feature_grid(image).reshape(-1, FEATURE_DIM)
    pred = np.argmax(_scores(feats, model.weights, model.biases), axis=1)
    return pred.reshape(image.shape).astype(np.int64)


def per_class_accuracy(
    model: ToyModel,
    images: Sequence[LabeledImage],
    num_classes: int,
) -> np.ndarray:
    """Pixel accuracy per class id over all given images (nan where absent)."""
    correct = np.zeros(num_classes)
    total = np.zeros(num_classes)
    for img in images:
        pred = predict(model, img)
        labels = img.labels.reshape(-1)
        hits = (pred == img.labels).reshape(-1)
        total += np.bincount(labels, minlength=num_classes)
        correct += np.bincount(labels[hits], minlength=num_classes)
    return np.where(total > 0, correct / np.maximum(total, 1), np.nan)
