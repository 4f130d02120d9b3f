"""Synthetic dataset generation, per-pixel features, and the linear trainer."""

import numpy as np
import pytest

from forgetdyn import (
    Dataset,
    InvalidConfig,
    LabeledImage,
    NumericalDivergence,
    OutOfBounds,
    RngStream,
    SyntheticConfig,
    ToyModel,
    TraceAccumulator,
    TrainConfig,
    UntrainedModel,
    extract_features,
    feature_grid,
    generate_dataset,
    per_class_accuracy,
    predict,
    train,
)

import oracles

# Four well-separated intensity bands: easy to learn, fast to train.
EASY = SyntheticConfig(
    height=32,
    width=32,
    num_classes=4,
    band_layout=((0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)),
    class_intensity=((0.05, 0.02), (0.35, 0.02), (0.65, 0.02), (0.95, 0.02)),
    boundary_jitter=2,
    underrepresented=(1,),
    inline_count=6,
    crossline_count=6,
    test_count=2,
)


class TestSyntheticConfig:
    def test_default_is_valid(self):
        SyntheticConfig().validate()

    def test_resolved_class_names_default(self):
        cfg = SyntheticConfig(num_classes=3, band_layout=((0, 0.4), (1, 0.3), (2, 0.3)),
                              class_intensity=((0.1, 0.0), (0.5, 0.0), (0.9, 0.0)),
                              underrepresented=(2,))
        assert cfg.resolved_class_names() == ("class_0", "class_1", "class_2")

    def test_explicit_class_names_kept(self):
        cfg = SyntheticConfig(class_names=["a", "b", "c", "d", "e", "f"])
        assert cfg.resolved_class_names() == ("a", "b", "c", "d", "e", "f")

    def test_json_lists_are_normalized(self):
        cfg = SyntheticConfig(band_layout=[[0, 0.5], [1, 0.5]], num_classes=2,
                              class_intensity=[[0.2, 0.1], [0.8, 0.1]],
                              underrepresented=[1])
        assert cfg.band_layout == ((0, 0.5), (1, 0.5))
        cfg.validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"height": 0},
            {"num_classes": 1},
            {"band_layout": ()},
            {"band_layout": ((0, 0.5), (1, 0.5))},  # classes 2..5 uncovered
            {"band_layout": ((0, 0.2), (1, 0.2), (5, 0.1), (2, 0.2), (3, 0.2), (4, 0.2))},
            {"class_intensity": ((0.5, 0.1),)},
            {"class_intensity": ((0.2, 0.05), (0.35, 0.05), (0.5, 0.05),
                                 (0.65, 0.05), (0.8, 0.05), (0.45, -0.1))},
            {"boundary_jitter": -1},
            {"underrepresented": ()},
            {"underrepresented": (9,)},
            {"inline_count": -1},
            {"inline_count": 0, "crossline_count": 0},
            {"test_count": -2},
            {"class_names": ("x",)},
        ],
    )
    def test_invalid_configs_rejected(self, overrides):
        from dataclasses import replace

        with pytest.raises(InvalidConfig):
            replace(SyntheticConfig(), **overrides).validate()


class TestGenerateDataset:
    def test_split_sizes_and_membership(self):
        ds = generate_dataset(SyntheticConfig(), RngStream(7))
        assert len(ds.train) == 32
        assert len(ds.validation) == 8
        assert len(ds.test) == 8
        # Every fifth slice index per orientation goes to validation.
        val_ids = {img.image_id for img in ds.validation}
        assert val_ids == {
            f"{o}_{i:03d}" for o in ("inline", "crossline") for i in (0, 5, 10, 15)
        }
        assert len({img.image_id for img in ds.all_images()}) == 48

    def test_deterministic(self):
        a = generate_dataset(EASY, RngStream(3))
        b = generate_dataset(EASY, RngStream(3))
        for x, y in zip(a.all_images(), b.all_images()):
            assert x.image_id == y.image_id
            assert np.array_equal(x.features, y.features)
            assert np.array_equal(x.labels, y.labels)

    def test_seed_changes_content(self):
        a = generate_dataset(EASY, RngStream(3))
        b = generate_dataset(EASY, RngStream(4))
        assert not np.array_equal(a.train[0].features, b.train[0].features)

    def test_slice_content_independent_of_counts(self):
        # Each slice comes from its own derived stream, so adding more slices
        # to the config must not change the ones already present.
        from dataclasses import replace

        small = generate_dataset(replace(EASY, inline_count=3), RngStream(5))
        large = generate_dataset(replace(EASY, inline_count=6), RngStream(5))
        by_id_small = {img.image_id: img for img in small.all_images()}
        by_id_large = {img.image_id: img for img in large.all_images()}
        for image_id in by_id_small:
            assert np.array_equal(
                by_id_small[image_id].features, by_id_large[image_id].features
            )

    def test_zero_jitter_gives_exact_bands(self):
        cfg = SyntheticConfig(
            height=50,
            width=20,
            num_classes=5,
            band_layout=((0, 0.2), (1, 0.2), (2, 0.2), (3, 0.2), (4, 0.2)),
            class_intensity=tuple((0.1 + 0.2 * k, 0.0) for k in range(5)),
            boundary_jitter=0,
            underrepresented=(4,),
            inline_count=1,
            crossline_count=0,
            test_count=0,
        )
        img = generate_dataset(cfg, RngStream(0)).validation[0]
        for r in range(50):
            assert (img.labels[r] == r // 10).all()
        # Zero intensity std makes features exactly the configured means.
        means = np.array([m for m, _ in cfg.class_intensity])
        assert np.array_equal(img.features, means[img.labels])

    def test_every_class_occurs_in_every_slice(self):
        ds = generate_dataset(SyntheticConfig(), RngStream(11))
        for img in ds.all_images():
            assert set(np.unique(img.labels)) == set(range(6))

    def test_invalid_config_raises_at_generation(self):
        from dataclasses import replace

        with pytest.raises(InvalidConfig):
            generate_dataset(replace(EASY, boundary_jitter=-2), RngStream(0))


class TestFeatures:
    def test_feature_grid_matches_hand_oracle(self):
        rng = np.random.default_rng(17)
        feats = rng.normal(size=(6, 5))
        img = LabeledImage("a", feats, np.zeros((6, 5), dtype=int))
        grid = feature_grid(img)
        assert grid.shape == (6, 5, 4)
        for r in range(6):
            for c in range(5):
                mean, std = oracles.neighborhood_by_hand(feats.tolist(), r, c)
                assert grid[r, c, 0] == feats[r, c]
                assert grid[r, c, 1] == pytest.approx(mean, abs=1e-9)
                assert grid[r, c, 2] == pytest.approx(std, abs=1e-9)
                assert grid[r, c, 3] == pytest.approx(r / 6)

    def test_extract_matches_grid(self):
        rng = np.random.default_rng(23)
        img = LabeledImage("a", rng.normal(size=(4, 7)), np.zeros((4, 7), dtype=int))
        grid = feature_grid(img)
        for r in range(4):
            for c in range(7):
                assert extract_features(img, (r, c)) == pytest.approx(
                    grid[r, c], abs=1e-9
                )

    def test_constant_image_has_zero_texture(self):
        img = LabeledImage("a", np.full((3, 3), 2.5), np.zeros((3, 3), dtype=int))
        grid = feature_grid(img)
        assert np.allclose(grid[..., 0], 2.5)
        assert np.allclose(grid[..., 1], 2.5)
        assert np.allclose(grid[..., 2], 0.0)

    @pytest.mark.parametrize("index", [(-1, 0), (0, -1), (4, 0), (0, 7)])
    def test_out_of_bounds_pixel(self, index):
        img = LabeledImage("a", np.zeros((4, 7)), np.zeros((4, 7), dtype=int))
        with pytest.raises(OutOfBounds):
            extract_features(img, index)


class TestTrainConfig:
    def test_default_valid(self):
        TrainConfig().validate()

    def test_zero_learning_rate_is_legal(self):
        TrainConfig(learning_rate=0.0).validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"epochs": 0},
            {"learning_rate": -0.1},
            {"learning_rate": float("inf")},
            {"batch_size": 0},
            {"snapshot_every": 0},
        ],
    )
    def test_invalid_rejected(self, overrides):
        from dataclasses import replace

        with pytest.raises(InvalidConfig):
            replace(TrainConfig(), **overrides).validate()


class TestToyModel:
    def test_shape_consistency_enforced(self):
        with pytest.raises(InvalidConfig):
            ToyModel(weights=np.zeros((3, 4)), biases=np.zeros(2),
                     epochs_run=1, learning_rate=0.1, seed=0)

    def test_properties(self):
        model = ToyModel(weights=np.zeros((3, 4)), biases=np.zeros(3),
                         epochs_run=1, learning_rate=0.1, seed=0)
        assert model.num_classes == 3
        assert model.feature_dim == 4


@pytest.fixture(scope="module")
def easy_dataset():
    return generate_dataset(EASY, RngStream(0))


class TestTrain:
    def test_zero_learning_rate_null_run(self, easy_dataset):
        snapshots = []
        model = train(
            easy_dataset,
            TrainConfig(epochs=4, learning_rate=0.0, seed=0),
            snapshot_sink=lambda e, i, p: snapshots.append((e, i, p)),
        )
        assert np.array_equal(model.weights, np.zeros((4, 4)))
        assert np.array_equal(model.biases, np.zeros(4))
        # Zero weights predict class 0 everywhere, every epoch.
        watched = len(easy_dataset.validation) + len(easy_dataset.test)
        assert len(snapshots) == 4 * watched
        for _, _, pred in snapshots:
            assert (pred == 0).all()

    def test_null_run_heatmaps_are_zero(self, easy_dataset):
        acc = TraceAccumulator(easy_dataset.validation, easy_dataset.num_classes)
        train(
            easy_dataset,
            TrainConfig(epochs=4, learning_rate=0.0, seed=0),
            snapshot_sink=acc.consume,
        )
        for img in easy_dataset.validation:
            heat = acc.heatmap(img.image_id)
            assert heat.total_events() == 0
            assert np.array_equal(heat.ever_correct, (img.labels == 0).astype(np.uint8))

    def test_training_is_deterministic(self, easy_dataset):
        cfg = TrainConfig(epochs=6, seed=3)
        stream_a, stream_b = [], []
        model_a = train(easy_dataset, cfg,
                        snapshot_sink=lambda e, i, p: stream_a.append((e, i, p.copy())))
        model_b = train(easy_dataset, cfg,
                        snapshot_sink=lambda e, i, p: stream_b.append((e, i, p.copy())))
        assert np.array_equal(model_a.weights, model_b.weights)
        assert np.array_equal(model_a.biases, model_b.biases)
        assert len(stream_a) == len(stream_b)
        for (ea, ia, pa), (eb, ib, pb) in zip(stream_a, stream_b):
            assert (ea, ia) == (eb, ib)
            assert np.array_equal(pa, pb)

    def test_seed_changes_the_run(self, easy_dataset):
        a = train(easy_dataset, TrainConfig(epochs=3, seed=0))
        b = train(easy_dataset, TrainConfig(epochs=3, seed=1))
        assert not np.array_equal(a.weights, b.weights)

    def test_learns_the_easy_bands(self, easy_dataset):
        model = train(easy_dataset, TrainConfig(epochs=40, seed=0))
        correct = total = 0
        for img in easy_dataset.validation:
            pred = predict(model, img)
            correct += int((pred == img.labels).sum())
            total += pred.size
        assert correct / total > 0.95
        acc = per_class_accuracy(model, easy_dataset.test, easy_dataset.num_classes)
        assert np.nanmin(acc) > 0.9

    def test_snapshot_cadence(self, easy_dataset):
        epochs_seen = set()
        count = 0

        def sink(epoch, image_id, pred):
            nonlocal count
            epochs_seen.add(epoch)
            count += 1

        train(easy_dataset, TrainConfig(epochs=7, snapshot_every=3, seed=0),
              snapshot_sink=sink)
        assert epochs_seen == {0, 3, 6}
        watched = len(easy_dataset.validation) + len(easy_dataset.test)
        assert count == 3 * watched

    def test_track_train_includes_training_split(self, easy_dataset):
        ids = set()
        train(easy_dataset, TrainConfig(epochs=1, track_train=True, seed=0),
              snapshot_sink=lambda e, i, p: ids.add(i))
        expected = {img.image_id for img in easy_dataset.all_images()}
        assert ids == expected

    def test_snapshots_feed_accumulator_without_gaps(self, easy_dataset):
        acc = TraceAccumulator(easy_dataset.validation, easy_dataset.num_classes)
        train(easy_dataset, TrainConfig(epochs=5, seed=1), snapshot_sink=acc.consume)
        for img in easy_dataset.validation:
            assert acc.heatmap(img.image_id).epochs_observed == 5

    def test_empty_training_split_rejected(self, easy_dataset):
        from dataclasses import replace

        empty = replace(easy_dataset, train=())
        with pytest.raises(InvalidConfig):
            train(empty, TrainConfig(epochs=1))

    def test_config_validated(self, easy_dataset):
        with pytest.raises(InvalidConfig):
            train(easy_dataset, TrainConfig(epochs=0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        # Astronomically scaled intensities overflow the squared-intensity
        # texture feature, which poisons the loss with nan on epoch 0.
        labels = np.zeros((4, 4), dtype=int)
        labels[2:] = 1
        huge = LabeledImage("huge", np.full((4, 4), 1e300), labels)
        ds = Dataset(2, ("a", "b"), train=(huge,), validation=(), test=())
        with pytest.raises(NumericalDivergence):
            train(ds, TrainConfig(epochs=1, batch_size=16))


class TestPredict:
    def test_matches_scalar_argmax(self, easy_dataset):
        model = train(easy_dataset, TrainConfig(epochs=5, seed=0))
        img = easy_dataset.test[0]
        pred = predict(model, img)
        grid = feature_grid(img)
        for r in range(0, img.height, 5):
            for c in range(0, img.width, 5):
                scores = [
                    sum(w * f for w, f in zip(row, grid[r, c])) + b
                    for row, b in zip(model.weights.tolist(), model.biases.tolist())
                ]
                best = max(range(len(scores)), key=lambda i: (scores[i], -i))
                assert pred[r, c] == best

    def test_non_finite_model_rejected(self):
        model = ToyModel(weights=np.full((2, 4), np.nan), biases=np.zeros(2),
                         epochs_run=1, learning_rate=0.1, seed=0)
        img = LabeledImage("a", np.zeros((2, 2)), np.zeros((2, 2), dtype=int))
        with pytest.raises(UntrainedModel):
            predict(model, img)

    def test_wrong_feature_dim_rejected(self):
        model = ToyModel(weights=np.zeros((2, 3)), biases=np.zeros(2),
                         epochs_run=1, learning_rate=0.1, seed=0)
        img = LabeledImage("a", np.zeros((2, 2)), np.zeros((2, 2), dtype=int))
        with pytest.raises(InvalidConfig):
            predict(model, img)


class TestPerClassAccuracy:
    def test_counts_by_hand(self):
        # Zero weights predict class 0 everywhere.
        model = ToyModel(weights=np.zeros((3, 4)), biases=np.zeros(3),
                         epochs_run=0, learning_rate=0.0, seed=0)
        labels = np.array([[0, 0], [1, 1]])
        img = LabeledImage("a", np.zeros((2, 2)), labels)
        acc = per_class_accuracy(model, [img], num_classes=3)
        assert acc[0] == 1.0
        assert acc[1] == 0.0
        assert np.isnan(acc[2])

    def test_aggregates_over_images(self):
        model = ToyModel(weights=np.zeros((2, 4)), biases=np.zeros(2),
                         epochs_run=0, learning_rate=0.0, seed=0)
        img_a = LabeledImage("a", np.zeros((1, 2)), np.array([[0, 1]]))
        img_b = LabeledImage("b", np.zeros((1, 2)), np.array([[0, 0]]))
        acc = per_class_accuracy(model, [img_a, img_b], num_classes=2)
        assert acc[0] == 1.0  # 3 of 3 class-0 pixels hit
        assert acc[1] == 0.0
