"""
FlowAug - Experiment Service
Leakage-free cross-validation and augmentation-size sweeps

Features:
- Paired k-fold protocol: baseline and augmented arms share folds, seeds and
  the classifier validation split
- Per-fold flow training on training-fold data only, with provenance audits
- Paired rare-class F1 deltas with a one-sided sign test
- Augmentation-size sweep with an argmax-with-no-harm size recommendation
- CSV reports, provenance files and the sweep plot
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from engine.errors import ConfigError, DataError, LeakageError
from engine.rng import SeededRng
from flows.model import MultiScaleFlow
from flows.objective import Dequantizer
from services.augmentation_service import (
    PROVENANCE_FIELDS,
    AugmentationSet,
    InterpolationSpec,
    get_augmentation_service,
)
from services.classifier_service import (
    ClassifierSettings,
    ClassMetrics,
    get_classifier_service,
    summarize_metrics,
)
from services.dataset_service import LabeledDataset, get_dataset_service
from services.flow_training_service import build_flow_model, build_train_config, get_flow_training_service
from utils.image_io import CLASS_NAMES
from utils.io_utils import PathLike, atomic_write_text, ensure_dir, write_csv
from utils.plotting import plot_sweep
from utils.stats import PairedComparison, mean_sd, paired_comparison

logger = logging.getLogger(__name__)

ARMS = ("baseline", "augmented")
HARM_TOLERANCE = 0.01
FOLD_FIELDS = ("fold", "arm", "class", "precision", "recall", "f1", "support")
METRIC_FIELDS = ("fold", "class", "precision", "recall", "f1", "arm")
PAIRED_FIELDS = ("fold", "baseline_f1", "augmented_f1", "delta", "baseline_macro_f1", "augmented_macro_f1")
SUMMARY_FIELDS = (
    "arm", "class", "precision_mean", "precision_sd", "recall_mean", "recall_sd", "f1_mean", "f1_sd",
)
AGGREGATE_FIELDS = ("arm", "metric", "mean", "sd")
SIGN_TEST_FIELDS = ("metric", "mean_delta", "median_delta", "positive", "negative", "ties", "p_value")


def audit_provenance(
    fold: int,
    test_ids: Sequence[int],
    flow_train_ids: Sequence[int],
    classifier_train_ids: Sequence[int],
    augmentations: AugmentationSet,
) -> None:
    """
    Assert that nothing trained in this iteration touched a test image

    Raises:
        LeakageError: any flow, augmentation or classifier source is a test id,
            or an augmentation source was not part of the flow's training data
    """
    test = set(int(i) for i in test_ids)
    flow = set(int(i) for i in flow_train_ids)
    checks = {
        "flow training set": flow,
        "augmentation sources": augmentations.source_ids(),
        "classifier training set": set(int(i) for i in classifier_train_ids),
    }
    for what, ids in checks.items():
        leaked = sorted(ids & test)
        if leaked:
            raise LeakageError(f"fold {fold}: {what} contains test ids {leaked[:10]}")
    outside = sorted(augmentations.source_ids() - flow)
    if outside:
        raise LeakageError(f"fold {fold}: augmentation sources {outside[:10]} were not in the flow training set")


def recommend_size(
    sizes: Sequence[int],
    f1_means: Dict[str, Sequence[float]],
    rare_class: str,
    tolerance: float = HARM_TOLERANCE,
) -> int:
    """
    Size with the highest mean rare-class F1 among sizes where no other class
    falls more than `tolerance` below its zero-augmentation mean; ties go to
    the smaller size
    """
    sizes = list(sizes)
    if 0 not in sizes:
        raise ConfigError("the recommendation needs the zero-augmentation reference size")
    reference = sizes.index(0)
    best_size, best_f1 = None, -np.inf
    for i, size in sorted(enumerate(sizes), key=lambda item: item[1]):
        harmed = any(
            f1_means[name][i] < f1_means[name][reference] - tolerance - 1e-12
            for name in f1_means
            if name != rare_class
        )
        if harmed:
            continue
        if f1_means[rare_class][i] > best_f1:
            best_size, best_f1 = size, f1_means[rare_class][i]
    return int(best_size)


@dataclass
class FoldResult:
    fold: int
    baseline: ClassMetrics
    augmented: ClassMetrics
    synthetic_count: int
    test_ids: np.ndarray
    augmentations: Optional[AugmentationSet] = None


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]
    rare_label: int
    rare_f1: PairedComparison
    macro_f1: PairedComparison

    def arm(self, name: str) -> List[ClassMetrics]:
        return [getattr(f, name) for f in self.folds]

    def summary_rows(self) -> List[Dict[str, object]]:
        """Mean and sample sd of precision, recall and F1 per (arm, class)"""
        rows = []
        for arm in ARMS:
            summary = summarize_metrics(self.arm(arm))
            for name in CLASS_NAMES:
                row = {"arm": arm, "class": name}
                for metric in ("precision", "recall", "f1"):
                    row[f"{metric}_mean"], row[f"{metric}_sd"] = summary[f"{name}/{metric}"]
                rows.append(row)
        return rows

    def aggregate_rows(self) -> List[Dict[str, object]]:
        """Macro averages and accuracy per arm"""
        rows = []
        for arm in ARMS:
            summary = summarize_metrics(self.arm(arm))
            for metric in ("precision", "recall", "f1"):
                mean, sd = summary[f"macro/{metric}"]
                rows.append({"arm": arm, "metric": f"macro_{metric}", "mean": mean, "sd": sd})
            mean, sd = summary["accuracy"]
            rows.append({"arm": arm, "metric": "accuracy", "mean": mean, "sd": sd})
        return rows


@dataclass
class SweepResult:
    sizes: List[int]
    rows: List[Dict[str, object]] = field(default_factory=list)
    f1_means: Dict[str, List[float]] = field(default_factory=dict)
    f1_sds: Dict[str, List[float]] = field(default_factory=dict)
    recommended: Optional[int] = None


class ExperimentService:
    """
    Runs the cross-validation and sweep protocols on a labeled dataset
    """

    def __init__(self, progress_bars: bool = True):
        self.datasets = get_dataset_service()
        self.flows = get_flow_training_service(progress_bars=progress_bars)
        self.augmenter = get_augmentation_service()
        self.classifiers = get_classifier_service(progress_bars=progress_bars)
        logger.info("Initializing ExperimentService")

    # ---- shared steps ---------------------------------------------------------

    def _train_flow(
        self, dataset: LabeledDataset, flow_positions: np.ndarray, run_config, rng: SeededRng
    ) -> MultiScaleFlow:
        model = build_flow_model(run_config, dataset.image_shape, rng.child("model"))
        train_config = build_train_config(run_config, seed=rng.derive_seed("train"))
        self.flows.fit(model, dataset.images[flow_positions], train_config, Dequantizer(run_config.discretization))
        return model

    def _interpolate(
        self,
        model: MultiScaleFlow,
        dataset: LabeledDataset,
        source_positions: np.ndarray,
        count: int,
        run_config,
        rng: SeededRng,
        fold_id: int,
    ) -> AugmentationSet:
        return self.augmenter.generate_augmentations(
            model,
            dataset.images[source_positions],
            count,
            InterpolationSpec.from_run_config(run_config),
            rng,
            source_ids=dataset.ids[source_positions],
            fold_id=fold_id,
        )

    @staticmethod
    def _require_sources(source_positions: np.ndarray, where: str) -> None:
        if len(source_positions) < 2:
            raise DataError(
                f"augmentation needs at least 2 rare-class training images, {where} has {len(source_positions)}"
            )

    def _fit_and_score(
        self,
        dataset: LabeledDataset,
        train: np.ndarray,
        valid: np.ndarray,
        test: np.ndarray,
        settings: ClassifierSettings,
        seed: int,
        extra: Optional[AugmentationSet] = None,
        rare_label: int = 0,
    ) -> ClassMetrics:
        images, labels = dataset.images[train], dataset.labels[train]
        if extra is not None and len(extra):
            images = np.concatenate([images, extra.images], axis=0)
            labels = np.concatenate([labels, np.full(len(extra), rare_label, dtype=np.int64)])
        trained = self.classifiers.train_classifier(
            images, labels, settings, seed, valid=(dataset.images[valid], dataset.labels[valid])
        )
        return self.classifiers.evaluate(trained.model, dataset.images[test], dataset.labels[test])

    # ---- cross-validation -----------------------------------------------------

    def cross_validate(
        self,
        dataset: LabeledDataset,
        run_config,
        seed: int,
        k: Optional[int] = None,
        augment_count: Optional[int] = None,
        out_dir: Optional[PathLike] = None,
    ) -> CrossValidationResult:
        """
        Paired stratified k-fold comparison of baseline and augmented training

        Args:
            dataset: labeled images
            run_config: effective RunConfig (model, training, classifier knobs)
            seed: master seed; every fold derives its own streams from it
            k: folds (default run_config.folds)
            augment_count: synthetic rare-class images per fold (default run_config.augment_count)
            out_dir: when given, reports are written here

        Returns:
            CrossValidationResult with per-fold metrics and paired statistics

        Raises:
            DataError: a fold has fewer than 2 rare-class training images
            LeakageError: a provenance audit failed
        """
        k = run_config.folds if k is None else k
        count = run_config.augment_count if augment_count is None else augment_count
        if count < 0:
            raise ConfigError(f"augment count must be non-negative, got {count}")
        rare_label = CLASS_NAMES.index(run_config.rare_class)
        settings = ClassifierSettings.from_run_config(run_config)
        plan = self.datasets.stratified_kfold(dataset.labels, k, seed)
        master = SeededRng(seed)
        logger.info(f"Cross-validating {len(dataset)} images over {k} folds with {count} augmentations per fold")

        folds: List[FoldResult] = []
        for fold in range(plan.k):
            fold_rng = master.child("fold", fold)
            test = plan.test_indices(fold)
            train_all = plan.train_indices(fold)
            train, valid = self.datasets.holdout_split(
                train_all, dataset.labels[train_all], run_config.clf_valid_fraction, fold_rng.derive_seed("valid")
            )
            clf_seed = fold_rng.derive_seed("classifier")
            try:
                baseline = self._fit_and_score(dataset, train, valid, test, settings, clf_seed)
                augmentations = None
                if count > 0:
                    rare = train[dataset.labels[train] == rare_label]
                    flow_positions = rare if run_config.flow_train_scope == "rare" else train
                    self._require_sources(rare, f"fold {fold}")
                    augment_rng = fold_rng.child("augment")
                    model = self._train_flow(dataset, flow_positions, run_config, augment_rng)
                    augmentations = self._interpolate(
                        model, dataset, rare, count, run_config, augment_rng.child("interpolate"), fold
                    )
                    audit_provenance(
                        fold, dataset.ids[test], dataset.ids[flow_positions], dataset.ids[train], augmentations
                    )
                    augmented = self._fit_and_score(
                        dataset, train, valid, test, settings, clf_seed, extra=augmentations, rare_label=rare_label
                    )
                else:
                    augmented = baseline
            except Exception as e:
                logger.error(f"Cross-validation fold {fold} failed: {str(e)}")
                raise

            folds.append(FoldResult(fold, baseline, augmented, count, dataset.ids[test], augmentations))
            logger.info(
                f"fold {fold}: F1 baseline={np.round(baseline.f1, 4).tolist()} "
                f"augmented={np.round(augmented.f1, 4).tolist()}",
                extra={"fold": fold, "baseline_f1": baseline.f1.tolist(), "augmented_f1": augmented.f1.tolist()},
            )

        result = CrossValidationResult(
            folds=folds,
            rare_label=rare_label,
            rare_f1=paired_comparison(
                [f.augmented.f1[rare_label] for f in folds], [f.baseline.f1[rare_label] for f in folds]
            ),
            macro_f1=paired_comparison([f.augmented.macro_f1 for f in folds], [f.baseline.macro_f1 for f in folds]),
        )
        logger.info(
            f"Rare-class F1 delta: mean={result.rare_f1.mean:.4f}, median={result.rare_f1.median:.4f}, "
            f"sign test p={result.rare_f1.p_value:.4f}"
        )
        if out_dir is not None:
            self.write_cross_validation(out_dir, result)
        return result

    def write_cross_validation(self, out_dir: PathLike, result: CrossValidationResult) -> None:
        out = ensure_dir(out_dir)
        fold_rows, metric_rows, paired_rows = [], [], []
        for f in result.folds:
            for arm in ARMS:
                for row in getattr(f, arm).rows():
                    fold_rows.append({"fold": f.fold, "arm": arm, **row})
                    metric_rows.append({"fold": f.fold, "arm": arm, **row})
            paired_rows.append(
                {
                    "fold": f.fold,
                    "baseline_f1": float(f.baseline.f1[result.rare_label]),
                    "augmented_f1": float(f.augmented.f1[result.rare_label]),
                    "delta": float(f.augmented.f1[result.rare_label] - f.baseline.f1[result.rare_label]),
                    "baseline_macro_f1": f.baseline.macro_f1,
                    "augmented_macro_f1": f.augmented.macro_f1,
                }
            )
            if f.augmentations is not None:
                write_csv(out / f"provenance_fold{f.fold}.csv", f.augmentations.rows(), PROVENANCE_FIELDS)
        write_csv(out / "folds.csv", fold_rows, FOLD_FIELDS)
        write_csv(out / "metrics.csv", metric_rows, METRIC_FIELDS)
        write_csv(out / "paired.csv", paired_rows, PAIRED_FIELDS)
        write_csv(out / "summary.csv", result.summary_rows(), SUMMARY_FIELDS)
        write_csv(out / "summary_aggregate.csv", result.aggregate_rows(), AGGREGATE_FIELDS)
        sign_rows = []
        for metric, comparison in (("rare_f1", result.rare_f1), ("macro_f1", result.macro_f1)):
            sign_rows.append(
                {
                    "metric": metric,
                    "mean_delta": comparison.mean,
                    "median_delta": comparison.median,
                    "positive": comparison.positive,
                    "negative": comparison.negative,
                    "ties": comparison.ties,
                    "p_value": comparison.p_value,
                }
            )
        write_csv(out / "sign_test.csv", sign_rows, SIGN_TEST_FIELDS)
        logger.info(f"Wrote cross-validation reports to {out}")

    # ---- sweep ----------------------------------------------------------------

    def augmentation_size_sweep(
        self,
        dataset: LabeledDataset,
        run_config,
        seed: int,
        sizes: Optional[Sequence[int]] = None,
        runs: Optional[int] = None,
        out_dir: Optional[PathLike] = None,
    ) -> SweepResult:
        """
        Per-class F1 against the number of synthetic rare-class images

        One flow is trained on the rare-class part of a fixed stratified train
        split. Each run draws one augmentation set of the largest size and uses
        its prefixes, so a larger size always contains the smaller ones.

        Raises:
            ConfigError: empty or negative sizes, runs < 1
        """
        sizes = list(run_config.sweep_sizes if sizes is None else sizes)
        runs = run_config.sweep_runs if runs is None else runs
        if not sizes:
            raise ConfigError("augmentation sweep needs at least one size")
        if any(int(s) < 0 for s in sizes):
            raise ConfigError(f"augmentation sizes must be non-negative, got {sizes}")
        if runs < 1:
            raise ConfigError(f"sweep needs at least one run, got {runs}")
        sizes = sorted(set(int(s) for s in sizes))
        if sizes[0] != 0:
            logger.info("Adding the zero-augmentation reference size to the sweep")
            sizes = [0] + sizes

        rare_label = CLASS_NAMES.index(run_config.rare_class)
        settings = ClassifierSettings.from_run_config(run_config)
        splits = self.datasets.train_valid_test_split(dataset, run_config.split_ratios, seed)
        train, valid, test = splits["train"], splits["valid"], splits["test"]
        master = SeededRng(seed)
        largest = sizes[-1]
        logger.info(f"Sweeping augmentation sizes {sizes} over {runs} runs")

        rare = train[dataset.labels[train] == rare_label]
        flow_positions = rare if run_config.flow_train_scope == "rare" else train
        model: Optional[MultiScaleFlow] = None
        if largest > 0:
            self._require_sources(rare, "the sweep train split")
            model = self._train_flow(dataset, flow_positions, run_config, master.child("flow"))

        result = SweepResult(sizes=sizes)
        per_size: Dict[int, List[ClassMetrics]] = {s: [] for s in sizes}
        for run in range(runs):
            run_rng = master.child("run", run)
            clf_seed = run_rng.derive_seed("classifier")
            augmentations = None
            if model is not None:
                augmentations = self._interpolate(
                    model, dataset, rare, largest, run_config, run_rng.child("interpolate"), fold_id=run
                )
                audit_provenance(run, dataset.ids[test], dataset.ids[flow_positions], dataset.ids[train], augmentations)
            for size in sizes:
                extra = augmentations.head(size) if augmentations is not None and size > 0 else None
                try:
                    metrics = self._fit_and_score(
                        dataset, train, valid, test, settings, clf_seed, extra=extra, rare_label=rare_label
                    )
                except Exception as e:
                    logger.error(f"Sweep run {run} at size {size} failed: {str(e)}")
                    raise
                per_size[size].append(metrics)
                row = {"size": size, "run": run, "macro_f1": metrics.macro_f1, "accuracy": metrics.accuracy}
                row.update({f"f1_{name}": float(metrics.f1[k]) for k, name in enumerate(CLASS_NAMES)})
                result.rows.append(row)
                logger.info(f"sweep run {run} size {size}: F1={np.round(metrics.f1, 4).tolist()}")

        for k, name in enumerate(CLASS_NAMES):
            stats = [mean_sd([m.f1[k] for m in per_size[s]]) for s in sizes]
            result.f1_means[name] = [m for m, _ in stats]
            result.f1_sds[name] = [sd for _, sd in stats]
        result.recommended = recommend_size(sizes, result.f1_means, run_config.rare_class)
        logger.info(f"Recommended augmentation size: {result.recommended}")

        if out_dir is not None:
            self.write_sweep(out_dir, result, run_config.rare_class)
        return result

    def write_sweep(self, out_dir: PathLike, result: SweepResult, rare_class: str) -> None:
        out = ensure_dir(out_dir)
        fields = ("size", "run") + tuple(f"f1_{name}" for name in CLASS_NAMES) + ("macro_f1", "accuracy")
        write_csv(out / "sweep.csv", result.rows, fields)
        summary_rows = [
            {"size": size, "class": name, "f1_mean": result.f1_means[name][i], "f1_sd": result.f1_sds[name][i]}
            for i, size in enumerate(result.sizes)
            for name in CLASS_NAMES
        ]
        write_csv(out / "sweep_summary.csv", summary_rows, ("size", "class", "f1_mean", "f1_sd"))
        plot_sweep(out / "sweep.png", result.sizes, result.f1_means, result.f1_sds, result.recommended)
        lines = [
            f"recommended_size={result.recommended}",
            f"rare_class={rare_class}",
            f"rule=argmax mean {rare_class} F1; no other class more than {HARM_TOLERANCE} below its size-0 mean",
        ]
        index = result.sizes.index(result.recommended)
        lines += [f"{name}_f1_mean={result.f1_means[name][index]!r}" for name in CLASS_NAMES]
        atomic_write_text(Path(out) / "recommendation.txt", "\n".join(lines) + "\n")
        logger.info(f"Wrote sweep reports to {out}")


# Singleton instance
_experiment_service_instance = None


def get_experiment_service(progress_bars: bool = True) -> ExperimentService:
    """
    Get singleton instance of ExperimentService

    Returns:
        ExperimentService instance
    """
    global _experiment_service_instance

    if _experiment_service_instance is None:
        _experiment_service_instance = ExperimentService(progress_bars=progress_bars)

    return _experiment_service_instance
