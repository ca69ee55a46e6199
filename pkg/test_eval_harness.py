"""
FlowAug - Evaluation Harness Tests

Synthetic data, stratified folds, classifier metrics, paired cross-validation
and the augmentation-size sweep
"""

import numpy as np
import pytest

from config import RunConfig
from engine.errors import ConfigError, DataError, LeakageError, ShapeError
from engine.rng import SeededRng
from services.augmentation_service import AugmentationSet, Provenance
from services.classifier_service import (
    BaselineCNN,
    ClassifierService,
    ClassifierSettings,
    metrics_from_predictions,
    summarize_metrics,
)
from services.dataset_service import (
    DatasetService,
    FoldPlan,
    LabeledDataset,
    SyntheticSeismoConfig,
    class_counts_for,
)
from services.experiment_service import ExperimentService, audit_provenance, recommend_size
from utils.io_utils import read_csv
from utils.stats import mean_sd, paired_comparison, sign_test


@pytest.fixture
def datasets():
    return DatasetService()


@pytest.fixture
def experiments():
    return ExperimentService(progress_bars=False)


def permuted_labels(counts, seed=0):
    labels = np.repeat(np.arange(len(counts)), counts)
    return labels[SeededRng(seed).permutation(len(labels))]


def brightness_images(per_class, rng):
    """Three classes that differ only in mean brightness."""
    levels = np.repeat([0.1, 0.5, 0.9], per_class)
    images = levels[:, None, None, None] + rng.normal((len(levels), 8, 8, 1), 0.02)
    return images, np.repeat(np.arange(3), per_class)


# ---- synthetic data -----------------------------------------------------------


def test_class_counts_follow_largest_remainder():
    assert class_counts_for((0.70, 0.22, 0.08), 1000).tolist() == [700, 220, 80]
    assert class_counts_for((0.70, 0.22, 0.08), 120).tolist() == [84, 26, 10]
    assert class_counts_for((0.70, 0.22, 0.08), 3000).tolist() == [2100, 660, 240]
    assert class_counts_for((0.5, 0.25, 0.25), 3).tolist() == [1, 1, 1]


def test_tiny_dataset_has_exact_counts_and_grid_pixels(tiny_dataset):
    assert tiny_dataset.class_counts().tolist() == [84, 26, 10]
    assert tiny_dataset.image_shape == (8, 8, 1)
    scaled = tiny_dataset.images * 256
    assert np.allclose(scaled, np.round(scaled))
    assert tiny_dataset.images.min() >= 0.0
    assert tiny_dataset.images.max() <= 255.0 / 256.0


def test_generation_is_seeded(datasets):
    config = SyntheticSeismoConfig(image_size=8, n_images=30, seed=4)
    first = datasets.generate_synthetic_dataset(config)
    second = datasets.generate_synthetic_dataset(config)
    other = datasets.generate_synthetic_dataset(SyntheticSeismoConfig(image_size=8, n_images=30, seed=5))
    assert np.array_equal(first.images, second.images)
    assert np.array_equal(first.labels, second.labels)
    assert not np.array_equal(first.images, other.images)


def test_bad_images_are_rougher_than_good_ones(tiny_dataset):
    """Test that degraded gathers carry more pixel energy away from mid-grey"""
    energy = np.abs(tiny_dataset.images - 0.5).mean(axis=(1, 2, 3))
    good = energy[tiny_dataset.labels == 0].mean()
    bad = energy[tiny_dataset.labels == 2].mean()
    assert bad > good


@pytest.mark.parametrize(
    "overrides",
    [
        {"class_ratios": (0.5, 0.3, 0.3)},
        {"class_ratios": (0.1, 0.2, 0.7)},
        {"image_size": 12},
        {"n_images": 2},
        {"spike_rate_bad": 1.5},
    ],
)
def test_invalid_generator_settings_are_rejected(datasets, overrides):
    with pytest.raises(ConfigError):
        datasets.generate_synthetic_dataset(SyntheticSeismoConfig(**overrides))


def test_labeled_dataset_checks_lengths():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((3, 4, 4, 1)), np.zeros(2))


# ---- folds and splits ---------------------------------------------------------


def test_kfold_balances_every_class(datasets):
    labels = permuted_labels(class_counts_for((0.70, 0.22, 0.08), 1000))
    plan = datasets.stratified_kfold(labels, 10, seed=0)
    for fold in range(plan.k):
        assert np.bincount(labels[plan.test_indices(fold)], minlength=3).tolist() == [70, 22, 8]
        train = plan.train_indices(fold)
        assert len(np.intersect1d(train, plan.test_indices(fold))) == 0
        assert len(train) + len(plan.test_indices(fold)) == 1000


def test_kfold_spread_is_at_most_one(datasets):
    labels = permuted_labels([7, 5, 3])
    plan = datasets.stratified_kfold(labels, 3, seed=2)
    counts = np.array([np.bincount(labels[f], minlength=3) for f in plan.folds])
    assert np.all(counts.max(axis=0) - counts.min(axis=0) <= 1)


def test_kfold_needs_k_samples_per_class(datasets):
    with pytest.raises(DataError):
        datasets.stratified_kfold(permuted_labels([10, 10, 2]), 3, seed=0)
    with pytest.raises(ConfigError):
        datasets.stratified_kfold(permuted_labels([10, 10, 10]), 1, seed=0)


def test_kfold_is_seeded(datasets):
    labels = permuted_labels([20, 10, 5])
    first = datasets.stratified_kfold(labels, 5, seed=9)
    second = datasets.stratified_kfold(labels, 5, seed=9)
    assert all(np.array_equal(a, b) for a, b in zip(first.folds, second.folds))


def test_fold_plan_detects_overlap():
    labels = np.array([0, 1, 0, 1])
    with pytest.raises(DataError):
        FoldPlan([np.array([0, 1]), np.array([1, 2, 3])]).validate(labels)


def test_train_valid_test_split_is_disjoint_and_stratified(datasets, tiny_dataset):
    splits = datasets.train_valid_test_split(tiny_dataset, (0.70, 0.15, 0.15), seed=0)
    joined = np.concatenate([splits["train"], splits["valid"], splits["test"]])
    assert sorted(joined.tolist()) == list(range(len(tiny_dataset)))
    for part in splits.values():
        assert np.all(np.bincount(tiny_dataset.labels[part], minlength=3) > 0)
    with pytest.raises(ConfigError):
        datasets.train_valid_test_split(tiny_dataset, (0.5, 0.5, 0.5), seed=0)


# ---- metrics ------------------------------------------------------------------


def test_perfect_predictions_score_one():
    labels = np.array([0, 1, 2, 0, 1, 2])
    metrics = metrics_from_predictions(labels, labels)
    assert np.allclose(metrics.f1, 1.0)
    assert metrics.accuracy == 1.0


def test_always_good_predictor_scores_zero_on_other_classes():
    labels = np.array([0, 0, 1, 2])
    metrics = metrics_from_predictions(labels, np.zeros(4, dtype=int))
    assert np.isclose(metrics.precision[0], 0.5)
    assert np.isclose(metrics.recall[0], 1.0)
    assert np.isclose(metrics.f1[0], 2.0 / 3.0)
    assert metrics.f1[1] == 0.0 and metrics.f1[2] == 0.0
    assert metrics.precision[1] == 0.0


def test_metrics_match_hand_computed_confusion():
    labels = np.array([0, 0, 0, 1, 1, 2])
    predictions = np.array([0, 1, 0, 1, 2, 2])
    metrics = metrics_from_predictions(labels, predictions)
    assert metrics.confusion.tolist() == [[2, 1, 0], [0, 1, 1], [0, 0, 1]]
    assert np.allclose(metrics.precision, [1.0, 0.5, 0.5])
    assert np.allclose(metrics.recall, [2.0 / 3.0, 0.5, 1.0])
    assert np.allclose(metrics.f1, [0.8, 0.5, 2.0 / 3.0])
    assert np.isclose(metrics.accuracy, 4.0 / 6.0)
    assert metrics.support.tolist() == [3, 2, 1]


def test_metrics_need_matching_inputs():
    with pytest.raises(DataError):
        metrics_from_predictions(np.array([0, 1]), np.array([0]))
    with pytest.raises(DataError):
        metrics_from_predictions(np.array([], dtype=int), np.array([], dtype=int))


def test_summary_reports_mean_and_sample_sd():
    runs = [
        metrics_from_predictions(np.array([0, 1, 2]), np.array([0, 1, 2])),
        metrics_from_predictions(np.array([0, 1, 2]), np.array([0, 0, 2])),
    ]
    summary = summarize_metrics(runs)
    assert summary["good/recall"] == (1.0, 0.0)
    mean, sd = summary["medium/f1"]
    assert np.isclose(mean, 0.5)
    assert np.isclose(sd, np.std([1.0, 0.0], ddof=1))
    assert "macro/f1" in summary and "accuracy" in summary


def test_sign_test_drops_ties():
    p_value, positive, negative, ties = sign_test([0.1, 0.2, 0.3, -0.1, 0.0])
    assert (positive, negative, ties) == (3, 1, 1)
    assert np.isclose(p_value, 5.0 / 16.0)
    assert sign_test([0.0, 0.0])[0] == 1.0


def test_paired_comparison_and_mean_sd():
    comparison = paired_comparison([0.5, 0.6, 0.7], [0.4, 0.6, 0.5])
    assert np.allclose(comparison.deltas, [0.1, 0.0, 0.2])
    assert np.isclose(comparison.mean, 0.1)
    assert np.isclose(comparison.median, 0.1)
    assert mean_sd([2.0]) == (2.0, 0.0)
    assert mean_sd([]) == (0.0, 0.0)


# ---- classifier ---------------------------------------------------------------


def test_classifier_can_fit_separable_classes(rng):
    """Test that the baseline CNN memorizes a small separable set"""
    images, labels = brightness_images(10, rng)
    settings = ClassifierSettings(filters=(4, 8), max_epochs=300, batch_size=32, learning_rate=0.02)
    service = ClassifierService(progress_bars=False)
    trained = service.train_classifier(images, labels, settings, seed=0)
    metrics = service.evaluate(trained.model, images, labels)
    assert metrics.accuracy >= 0.9


def test_classifier_separates_unseen_images(rng):
    """Test held-out accuracy and per-class F1 on cleanly separable classes"""
    images, labels = brightness_images(10, rng.child("train"))
    unseen, unseen_labels = brightness_images(20, rng.child("unseen"))
    settings = ClassifierSettings(filters=(4, 8), max_epochs=300, batch_size=32, learning_rate=0.02)
    service = ClassifierService(progress_bars=False)
    trained = service.train_classifier(images, labels, settings, seed=1)
    metrics = service.evaluate(trained.model, unseen, unseen_labels)
    assert metrics.accuracy >= 0.9
    assert np.all(metrics.f1 >= 0.8)


def test_classifier_training_is_deterministic(rng):
    images, labels = brightness_images(6, rng)
    settings = ClassifierSettings(filters=(2, 4), max_epochs=3, patience=2, batch_size=8)
    service = ClassifierService(progress_bars=False)
    valid = (images[::3], labels[::3])
    first = service.train_classifier(images, labels, settings, seed=5, valid=valid)
    second = service.train_classifier(images, labels, settings, seed=5, valid=valid)
    for name, value in first.model.state().items():
        assert np.array_equal(value, second.model.state()[name])
    assert first.history == second.history


def test_classifier_rejects_single_class(rng):
    images, _ = brightness_images(4, rng)
    with pytest.raises(DataError):
        ClassifierService(progress_bars=False).train_classifier(
            images, np.zeros(len(images), dtype=int), ClassifierSettings(max_epochs=1), seed=0
        )


def test_classifier_needs_pooling_friendly_shape(rng):
    with pytest.raises(ShapeError):
        BaselineCNN((6, 6, 1), (2, 4), rng)


def test_invalid_classifier_settings_are_rejected():
    with pytest.raises(ConfigError):
        ClassifierSettings(filters=(4,)).validate()
    with pytest.raises(ConfigError):
        ClassifierSettings(learning_rate=0.0).validate()


# ---- leakage and recommendation -----------------------------------------------


def provenance_set(pairs):
    records = [Provenance(local_a=0, local_b=1, source_a=a, source_b=b, t=0.5, fold_id=0) for a, b in pairs]
    return AugmentationSet(np.zeros((len(records), 4, 4, 1)), records)


def test_audit_accepts_clean_provenance():
    audit_provenance(0, [1, 2], [5, 6, 7], [5, 6, 7, 8], provenance_set([(5, 6), (6, 7)]))


def test_audit_rejects_test_ids_anywhere():
    with pytest.raises(LeakageError):
        audit_provenance(0, [1, 2], [1, 5, 6], [5, 6], provenance_set([(5, 6)]))
    with pytest.raises(LeakageError):
        audit_provenance(0, [1, 2], [5, 6], [5, 6], provenance_set([(5, 2)]))
    with pytest.raises(LeakageError):
        audit_provenance(0, [1, 2], [5, 6], [2, 5, 6], provenance_set([(5, 6)]))


def test_audit_rejects_sources_outside_flow_training_set():
    with pytest.raises(LeakageError):
        audit_provenance(0, [1], [5, 6], [5, 6, 9], provenance_set([(5, 9)]))


def test_recommendation_prefers_smaller_size_on_ties():
    means = {"good": [0.9, 0.9, 0.9], "medium": [0.7, 0.7, 0.7], "bad": [0.3, 0.5, 0.5]}
    assert recommend_size([0, 100, 250], means, "bad") == 100


def test_recommendation_skips_harmful_sizes():
    means = {"good": [0.9, 0.85, 0.9], "medium": [0.7, 0.7, 0.695], "bad": [0.3, 0.6, 0.5]}
    assert recommend_size([0, 100, 250], means, "bad") == 250


def test_recommendation_needs_zero_reference():
    with pytest.raises(ConfigError):
        recommend_size([100, 250], {"good": [0, 0], "medium": [0, 0], "bad": [0, 0]}, "bad")


# ---- protocols ----------------------------------------------------------------


def test_cross_validation_without_augmentation_pairs_identical_arms(experiments, tiny_dataset, run_config):
    """Test that zero synthetic images give zero deltas and p = 1"""
    result = experiments.cross_validate(tiny_dataset, run_config, seed=0, k=3, augment_count=0)
    assert len(result.folds) == 3
    for fold in result.folds:
        assert np.array_equal(fold.baseline.f1, fold.augmented.f1)
        assert fold.augmentations is None
    assert np.all(result.rare_f1.deltas == 0.0)
    assert result.rare_f1.p_value == 1.0
    test_ids = np.concatenate([f.test_ids for f in result.folds])
    assert sorted(test_ids.tolist()) == list(range(len(tiny_dataset)))


def test_cross_validation_with_augmentation_writes_reports(experiments, tiny_dataset, run_config, tmp_path):
    result = experiments.cross_validate(tiny_dataset, run_config, seed=1, k=3, augment_count=6, out_dir=tmp_path)
    for fold in result.folds:
        assert len(fold.augmentations) == 6
        assert not fold.augmentations.source_ids() & set(fold.test_ids.tolist())
        assert all(tiny_dataset.labels[i] == 2 for i in fold.augmentations.source_ids())

    for name in ("folds.csv", "metrics.csv", "paired.csv", "summary.csv", "sign_test.csv", "provenance_fold0.csv"):
        assert (tmp_path / name).exists(), name
    assert len(read_csv(tmp_path / "paired.csv")) == 3
    assert len(read_csv(tmp_path / "metrics.csv")) == 3 * 2 * 3
    summary = read_csv(tmp_path / "summary.csv")
    assert len(summary) == 3 * 2
    assert {(row["class"], row["arm"]) for row in summary} == {
        (name, arm) for name in ("good", "medium", "bad") for arm in ("baseline", "augmented")
    }
    aggregate = read_csv(tmp_path / "summary_aggregate.csv")
    assert {(row["metric"], row["arm"]) for row in aggregate} == {
        (metric, arm)
        for metric in ("macro_precision", "macro_recall", "macro_f1", "accuracy")
        for arm in ("baseline", "augmented")
    }


def test_cross_validation_is_reproducible(experiments, tiny_dataset, run_config):
    first = experiments.cross_validate(tiny_dataset, run_config, seed=3, k=3, augment_count=4)
    second = experiments.cross_validate(tiny_dataset, run_config, seed=3, k=3, augment_count=4)
    assert np.array_equal(first.rare_f1.deltas, second.rare_f1.deltas)
    for a, b in zip(first.folds, second.folds):
        assert np.array_equal(a.augmentations.images, b.augmentations.images)


def test_sweep_has_one_row_per_size_and_run(experiments, tiny_dataset, run_config, tmp_path):
    result = experiments.augmentation_size_sweep(
        tiny_dataset, run_config, seed=0, sizes=[4, 8], runs=2, out_dir=tmp_path
    )
    assert result.sizes == [0, 4, 8]
    assert len(result.rows) == 3 * 2
    assert {(row["size"], row["run"]) for row in result.rows} == {(s, r) for s in (0, 4, 8) for r in (0, 1)}
    assert result.recommended in result.sizes
    assert len(result.f1_means["bad"]) == 3

    recommendation = (tmp_path / "recommendation.txt").read_text().splitlines()
    assert recommendation[0] == f"recommended_size={result.recommended}"
    assert (tmp_path / "sweep.png").stat().st_size > 0
    assert len(read_csv(tmp_path / "sweep_summary.csv")) == 3 * 3


def test_sweep_rejects_bad_arguments(experiments, tiny_dataset, run_config):
    with pytest.raises(ConfigError):
        experiments.augmentation_size_sweep(tiny_dataset, run_config, seed=0, sizes=[], runs=1)
    with pytest.raises(ConfigError):
        experiments.augmentation_size_sweep(tiny_dataset, run_config, seed=0, sizes=[-1, 0], runs=1)
    with pytest.raises(ConfigError):
        experiments.augmentation_size_sweep(tiny_dataset, run_config, seed=0, sizes=[0], runs=0)


# ---- full scale ---------------------------------------------------------------


@pytest.mark.slow
def test_full_scale_dataset_and_folds(datasets):
    dataset = datasets.generate_synthetic_dataset(SyntheticSeismoConfig(seed=0))
    assert dataset.class_counts().tolist() == [2100, 660, 240]
    assert dataset.image_shape == (32, 32, 1)
    plan = datasets.stratified_kfold(dataset.labels, 10, seed=0)
    for fold in range(plan.k):
        assert np.bincount(dataset.labels[plan.test_indices(fold)], minlength=3).tolist() == [210, 66, 24]


@pytest.fixture(scope="module")
def full_scale():
    run_config = RunConfig.defaults("production")
    dataset = DatasetService().generate_synthetic_dataset(SyntheticSeismoConfig.from_run_config(run_config, seed=0))
    return run_config, dataset


@pytest.fixture(scope="module")
def full_cross_validation(full_scale):
    run_config, dataset = full_scale
    return ExperimentService(progress_bars=False).cross_validate(dataset, run_config, seed=0, k=10, augment_count=250)


@pytest.mark.slow
def test_full_cross_validation_keeps_every_fold_clean(full_scale, full_cross_validation):
    """Test that all ten folds pass the provenance audit against their own test split"""
    _, dataset = full_scale
    rare_label = full_cross_validation.rare_label
    assert len(full_cross_validation.folds) == 10
    for fold in full_cross_validation.folds:
        assert len(fold.augmentations) == 250
        test = set(fold.test_ids.tolist())
        outside = np.array([int(i) not in test for i in dataset.ids])
        train_ids = dataset.ids[outside]
        rare_train_ids = dataset.ids[outside & (dataset.labels == rare_label)]
        audit_provenance(fold.fold, fold.test_ids, rare_train_ids, train_ids, fold.augmentations)


@pytest.mark.slow
def test_full_cross_validation_improves_rare_class(full_cross_validation):
    """Test the paired rare-class F1 gain with the one-sided sign test"""
    rare = full_cross_validation.rare_f1
    assert rare.median > 0
    assert rare.p_value < 0.1
    assert full_cross_validation.macro_f1.mean >= -0.01


@pytest.mark.slow
def test_full_sweep_recommends_a_harmless_size(full_scale, tmp_path):
    run_config, dataset = full_scale
    sizes = [0, 100, 250, 500, 1000]
    result = ExperimentService(progress_bars=False).augmentation_size_sweep(
        dataset, run_config, seed=0, sizes=sizes, runs=10, out_dir=tmp_path
    )
    assert result.sizes == sizes
    assert len(result.rows) == len(sizes) * 10
    assert result.recommended == recommend_size(sizes, result.f1_means, "bad")
    best = result.sizes.index(result.recommended)
    for name in ("good", "medium"):
        assert result.f1_means[name][best] >= result.f1_means[name][0] - 0.01 - 1e-12
    assert len(read_csv(tmp_path / "sweep.csv")) == len(sizes) * 10
