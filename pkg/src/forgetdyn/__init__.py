"""Forgetting-dynamics toolkit: per-pixel forgetting heat maps, density
rankings, margin statistics, and closed-loop targeted augmentation."""

from .core import (
    AccuracyBitmap,
    ClassAbsent,
    Dataset,
    DegenerateGroups,
    DegenerateRegion,
    DensityEntry,
    DensityRanking,
    DimensionMismatch,
    EmptyRanking,
    EmptyTrace,
    EpochGap,
    ForgetDynError,
    HeatMap,
    InvalidClassId,
    InvalidConfig,
    LabeledImage,
    NonSquareRotation,
    NumericalDivergence,
    OutOfBounds,
    RngStream,
    UntrainedModel,
    max_forgetting_count,
    validate_pair,
)
from .tracker import (
    PixelGroup,
    TraceAccumulator,
    TraceState,
    begin_trace,
    forgetting_step,
    partition_pixels,
    pixel_accuracy,
    run_trace,
)
from .analytics import (
    MarginField,
    MarginStats,
    class_density,
    margin,
    margin_forgetting_correlation,
    margin_from_features,
    rank_images,
)
from .trainer import (
    DEFAULT_DATASET_SEED,
    FEATURE_DIM,
    SyntheticConfig,
    ToyModel,
    TrainConfig,
    extract_features,
    feature_grid,
    generate_dataset,
    per_class_accuracy,
    predict,
    train,
)
from .augment import (
    AugmentConfig,
    ExperimentReport,
    SeedResult,
    baseline_flip,
    baseline_rotate,
    feature_transfer,
    flip_image,
    rotate_image,
    run_experiment,
    select_sources,
)

__version__ = "0.1.0"
