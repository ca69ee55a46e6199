"""
FlowAug - Dataset Service
Synthetic seismic shot-gather images and stratified data splits

Features:
- Hyperbolic reflection events built from Ricker wavelets on a trace grid
- Class-specific degradations: band-limited swell noise (medium, bad),
  amplitude spikes and dead traces (bad)
- Exact class counts by the largest-remainder rule, 8-bit quantized pixels
- Stratified k-fold plans and stratified train/validation/test splits
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from engine.errors import ConfigError, DataError
from engine.rng import SeededRng
from flows.objective import Dequantizer
from utils.image_io import CLASS_NAMES

logger = logging.getLogger(__name__)

GOOD, MEDIUM, BAD = 0, 1, 2


@dataclass
class SyntheticSeismoConfig:
    """Parameters of the synthetic shot-gather generator"""

    image_size: int = 32
    class_ratios: Tuple[float, float, float] = (0.70, 0.22, 0.08)
    n_images: int = 3000
    background_noise: float = 0.03
    swell_amplitude_medium: float = 0.35
    swell_amplitude_bad: float = 0.8
    spike_rate_bad: float = 0.02
    dead_trace_prob_bad: float = 0.12
    seed: int = 0
    discretization: float = 1.0 / 256.0

    def validate(self) -> None:
        if len(self.class_ratios) != 3:
            raise ConfigError(f"class_ratios needs 3 entries (good, medium, bad), got {self.class_ratios}")
        if any(r < 0 for r in self.class_ratios) or abs(sum(self.class_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"class_ratios must be non-negative and sum to 1, got {self.class_ratios}")
        good, medium, bad = self.class_ratios
        if not (bad < good and bad < medium):
            raise ConfigError(f"the bad class must be the strict minority, got ratios {self.class_ratios}")
        size = self.image_size
        if size < 4 or size & (size - 1):
            raise ConfigError(f"image_size must be a power of two >= 4, got {size}")
        if self.n_images < 3:
            raise ConfigError(f"n_images must be at least 3, got {self.n_images}")
        for name in ("background_noise", "swell_amplitude_medium", "swell_amplitude_bad"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("spike_rate_bad", "dead_trace_prob_bad"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {getattr(self, name)}")

    @classmethod
    def from_run_config(cls, run_config, seed: int) -> "SyntheticSeismoConfig":
        return cls(
            image_size=run_config.image_size,
            class_ratios=tuple(run_config.class_ratios),
            n_images=run_config.n_images,
            background_noise=run_config.background_noise,
            swell_amplitude_medium=run_config.swell_amplitude_medium,
            swell_amplitude_bad=run_config.swell_amplitude_bad,
            spike_rate_bad=run_config.spike_rate_bad,
            dead_trace_prob_bad=run_config.dead_trace_prob_bad,
            seed=seed,
            discretization=run_config.discretization,
        )


@dataclass
class LabeledDataset:
    """Images with class labels; `ids` are stable global indices"""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    splits: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataError(
                f"dataset has {len(self.images)} images, {len(self.labels)} labels and {len(self.ids)} ids"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))

    def subset(self, positions: Sequence[int]) -> "LabeledDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(self.images[positions], self.labels[positions], self.ids[positions])


@dataclass
class FoldPlan:
    """k disjoint test folds given as dataset positions"""

    folds: List[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))

    def validate(self, labels: np.ndarray) -> None:
        """Check disjointness, coverage and per-fold class balance."""
        labels = np.asarray(labels)
        joined = np.concatenate(self.folds)
        if len(joined) != len(np.unique(joined)):
            raise DataError("fold plan folds overlap")
        if set(joined.tolist()) != set(range(len(labels))):
            raise DataError("fold plan does not cover every sample exactly once")
        counts = np.array([np.bincount(labels[f], minlength=len(CLASS_NAMES)) for f in self.folds])
        spread = counts.max(axis=0) - counts.min(axis=0)
        if np.any(spread > 1):
            raise DataError(f"per-fold class counts differ by more than one: {counts.tolist()}")


def class_counts_for(ratios: Sequence[float], total: int) -> np.ndarray:
    """Exact per-class counts summing to `total` (largest remainder, ties to the lower class)."""
    raw = np.asarray(ratios, dtype=np.float64) * total
    counts = np.floor(raw + 1e-9).astype(np.int64)
    remainder = total - int(counts.sum())
    fractions = raw - counts
    for index in sorted(range(len(raw)), key=lambda i: (-fractions[i], i))[:remainder]:
        counts[index] += 1
    return counts


def ricker(tau: np.ndarray, frequency: float) -> np.ndarray:
    arg = (math.pi * frequency * tau) ** 2
    return (1.0 - 2.0 * arg) * np.exp(-arg)


class DatasetService:
    """
    Builds and splits labeled shot-gather datasets
    """

    def __init__(self):
        logger.info("Initializing DatasetService")

    # ---- generation -----------------------------------------------------------

    def _clean_gather(self, size: int, rng: SeededRng) -> np.ndarray:
        """Curved-event texture in [-1, 1] on a (time, trace) grid."""
        t = np.linspace(0.0, 1.0, size)[:, None]
        x = np.linspace(-1.0, 1.0, size)[None, :]
        signal = np.zeros((size, size))
        events = int(rng.integers(2, 5))
        for _ in range(events):
            t0 = rng.uniform(0.1, 0.7)
            velocity = rng.uniform(1.2, 3.5)
            apex = rng.uniform(-0.3, 0.3)
            amplitude = rng.uniform(0.5, 1.0) * (1 if rng.random() < 0.8 else -1)
            arrival = np.sqrt(t0**2 + ((x - apex) / velocity) ** 2)
            signal += amplitude * ricker(t - arrival, frequency=rng.uniform(6.0, 10.0))
        peak = np.max(np.abs(signal))
        return signal / peak if peak > 0 else signal

    def _swell(self, size: int, amplitude: float, width_range: Tuple[float, float], rng: SeededRng) -> np.ndarray:
        """Low-frequency, high-amplitude noise confined to a band of adjacent traces."""
        noise = np.zeros((size, size))
        width = max(1, int(round(size * rng.uniform(*width_range))))
        start = int(rng.integers(0, size - width + 1))
        t = np.linspace(0.0, 1.0, size)[:, None]
        components = np.zeros((size, width))
        for _ in range(3):
            frequency = rng.uniform(0.5, 2.5)
            phase = rng.uniform(0.0, 2 * math.pi, (1, width))
            components += np.sin(2 * math.pi * frequency * t + phase) * rng.uniform(0.5, 1.0, (1, width))
        taper = np.hanning(width + 2)[1:-1][None, :]
        noise[:, start : start + width] = amplitude * components / 3.0 * (0.5 + 0.5 * taper)
        return noise

    def _render(self, label: int, config: SyntheticSeismoConfig, rng: SeededRng) -> np.ndarray:
        size = config.image_size
        signal = self._clean_gather(size, rng.child("events"))
        signal = signal + rng.child("background").normal((size, size), config.background_noise)
        if label == MEDIUM:
            signal = signal + self._swell(size, config.swell_amplitude_medium, (0.15, 0.35), rng.child("swell"))
        elif label == BAD:
            swell_rng = rng.child("swell")
            for band in range(2):
                signal = signal + self._swell(size, config.swell_amplitude_bad, (0.25, 0.5), swell_rng.child(band))
            spike_rng = rng.child("spikes")
            spikes = spike_rng.random((size, size)) < config.spike_rate_bad
            signs = np.where(spike_rng.random((size, size)) < 0.5, -1.0, 1.0)
            signal = np.where(spikes, signs * spike_rng.uniform(1.5, 3.0, (size, size)), signal)
            dead_rng = rng.child("dead")
            dead = dead_rng.random(size) < config.dead_trace_prob_bad
            if not dead.any() and config.dead_trace_prob_bad > 0:
                dead[int(dead_rng.integers(0, size))] = True
            signal[:, dead] = 0.0
        image = 0.5 + 0.25 * signal
        return Dequantizer(config.discretization).quantize(image)[:, :, None]

    def generate_synthetic_dataset(self, config: SyntheticSeismoConfig) -> LabeledDataset:
        """
        Generate a labeled synthetic dataset

        Args:
            config: generator parameters

        Returns:
            LabeledDataset with exactly class_counts_for(ratios, n) images per class
        """
        config.validate()
        rng = SeededRng(config.seed)
        counts = class_counts_for(config.class_ratios, config.n_images)
        labels = np.repeat(np.arange(len(CLASS_NAMES)), counts)
        labels = labels[rng.child("order").permutation(len(labels))]
        logger.info(
            f"Generating synthetic dataset: {config.n_images} images of {config.image_size}x{config.image_size}, "
            f"counts {dict(zip(CLASS_NAMES, counts.tolist()))}"
        )
        images = np.stack([self._render(int(label), config, rng.child("image", i)) for i, label in enumerate(labels)])
        return LabeledDataset(images, labels)

    # ---- splits ---------------------------------------------------------------

    def stratified_kfold(self, labels: np.ndarray, k: int, seed: int) -> FoldPlan:
        """
        Per-class stratified k-fold plan

        Raises:
            DataError: some class has fewer than k samples
        """
        labels = np.asarray(labels)
        if k < 2:
            raise ConfigError(f"k must be at least 2, got {k}")
        counts = np.bincount(labels, minlength=len(CLASS_NAMES))
        present = counts[counts > 0]
        if np.any(present < k):
            small = {CLASS_NAMES[c]: int(counts[c]) for c in range(len(counts)) if 0 < counts[c] < k}
            raise DataError(f"every class needs at least k={k} samples, got {small}")
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=SeededRng(seed).derive_seed("folds"))
        folds = [np.sort(test) for _, test in splitter.split(np.zeros(len(labels)), labels)]
        plan = FoldPlan(folds)
        plan.validate(labels)
        return plan

    def holdout_split(
        self, positions: np.ndarray, labels: np.ndarray, fraction: float, seed: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Stratified (keep, holdout) split of `positions`, whose labels are `labels`."""
        if not 0.0 < fraction < 1.0:
            raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")
        keep, holdout = train_test_split(
            np.asarray(positions),
            test_size=fraction,
            stratify=np.asarray(labels),
            random_state=SeededRng(seed).derive_seed("holdout"),
        )
        return np.sort(keep), np.sort(holdout)

    def train_valid_test_split(
        self, dataset: LabeledDataset, ratios: Sequence[float], seed: int
    ) -> Dict[str, np.ndarray]:
        """
        Fixed stratified split into train / valid / test positions

        The result is also recorded in `dataset.splits`.
        """
        if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three positive values summing to 1, got {ratios}")
        train_ratio, valid_ratio, test_ratio = ratios
        positions = np.arange(len(dataset))
        rest, test = self.holdout_split(positions, dataset.labels, test_ratio, seed)
        train, valid = self.holdout_split(
            rest, dataset.labels[rest], valid_ratio / (train_ratio + valid_ratio), seed + 1
        )
        dataset.splits = {"train": train, "valid": valid, "test": test}
        logger.info(f"Split dataset: train={len(train)}, valid={len(valid)}, test={len(test)}")
        return dict(dataset.splits)


# Singleton instance
_dataset_service_instance = None


def get_dataset_service() -> DatasetService:
    """
    Get singleton instance of DatasetService

    Returns:
        DatasetService instance
    """
    global _dataset_service_instance

    if _dataset_service_instance is None:
        _dataset_service_instance = DatasetService()

    return _dataset_service_instance
