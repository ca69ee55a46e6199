"""
FlowAug - Classifier Service
Baseline CNN image classifier with early stopping and per-class metrics

Features:
- Two conv blocks (3x3 conv, ReLU, 2x2 average pool) and a pooled dense head
- He-initialized weights from a seeded stream; fully deterministic training
- Adam on mean cross-entropy, early stopping on validation loss
- Precision, recall and F1 per class with the 0/0 -> 0 convention
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from tqdm import tqdm

from engine.errors import ConfigError, DataError, ShapeError
from engine.ops import avg_pool2, conv2d, cross_entropy, matmul
from engine.optim import Adam
from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor, gradient, no_grad
from utils.image_io import CLASS_NAMES
from utils.stats import mean_sd

logger = logging.getLogger(__name__)

NUM_CLASSES = len(CLASS_NAMES)
PREDICT_BATCH = 256


@dataclass
class ClassifierSettings:
    """Fixed baseline classifier recipe"""

    filters: Tuple[int, int] = (8, 16)
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3

    def validate(self) -> None:
        if len(self.filters) != 2 or any(f < 1 for f in self.filters):
            raise ConfigError(f"classifier needs two positive filter counts, got {self.filters}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs, patience and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def from_run_config(cls, run_config) -> "ClassifierSettings":
        return cls(
            filters=tuple(int(f) for f in run_config.clf_filters),
            max_epochs=run_config.clf_max_epochs,
            patience=run_config.clf_patience,
            batch_size=run_config.clf_batch_size,
            learning_rate=run_config.clf_lr,
        )


class BaselineCNN:
    """
    Small fixed convolutional classifier

    Args:
        image_shape: (H, W, C); H and W divisible by 4
        filters: channels of the two conv blocks
        rng: seeded stream for He initialization
    """

    def __init__(self, image_shape: Tuple[int, int, int], filters: Sequence[int], rng: SeededRng):
        height, width, channels = image_shape
        if height % 4 or width % 4:
            raise ShapeError(f"BaselineCNN needs spatial dims divisible by 4, got {image_shape}")
        self.image_shape = tuple(image_shape)
        self.filters = tuple(filters)
        first, second = self.filters
        self.conv1 = Parameter(self._he((3, 3, channels, first), 9 * channels, rng.child("conv1")), "block1/filters")
        self.bias1 = Parameter(np.zeros(first), "block1/bias")
        self.conv2 = Parameter(self._he((3, 3, first, second), 9 * first, rng.child("conv2")), "block2/filters")
        self.bias2 = Parameter(np.zeros(second), "block2/bias")
        self.dense = Parameter(self._he((second, NUM_CLASSES), second, rng.child("dense")), "head/weights")
        self.dense_bias = Parameter(np.zeros(NUM_CLASSES), "head/bias")

    @staticmethod
    def _he(shape, fan_in: int, rng: SeededRng) -> np.ndarray:
        return rng.normal(shape, np.sqrt(2.0 / fan_in))

    def parameters(self) -> List[Parameter]:
        return [self.conv1, self.bias1, self.conv2, self.bias2, self.dense, self.dense_bias]

    def logits(self, images) -> Tensor:
        x = Tensor(np.asarray(images, dtype=np.float64) - 0.5)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"classifier expects (B, {self.image_shape}), got {x.shape}")
        h = avg_pool2(conv2d(x, self.conv1, self.bias1).relu())
        h = avg_pool2(conv2d(h, self.conv2, self.bias2).relu())
        pooled = h.mean(axis=(1, 2))
        return matmul(pooled, self.dense) + self.dense_bias

    def predict(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        predictions = []
        with no_grad():
            for start in range(0, len(images), PREDICT_BATCH):
                predictions.append(np.argmax(self.logits(images[start : start + PREDICT_BATCH]).data, axis=1))
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.assign(state[p.name])


@dataclass
class ClassMetrics:
    """Per-class precision/recall/F1 (index = label) plus macro scores and accuracy"""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def rows(self) -> List[Dict[str, object]]:
        return [
            {
                "class": name,
                "precision": float(self.precision[k]),
                "recall": float(self.recall[k]),
                "f1": float(self.f1[k]),
                "support": int(self.support[k]),
            }
            for k, name in enumerate(CLASS_NAMES)
        ]


def metrics_from_predictions(labels: np.ndarray, predictions: np.ndarray) -> ClassMetrics:
    """Confusion-matrix metrics; an undefined ratio (0/0) counts as 0."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.size == 0:
        raise DataError(f"need equally sized non-empty label arrays, got {labels.shape} and {predictions.shape}")
    classes = list(range(NUM_CLASSES))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, predictions, labels=classes, average=None, zero_division=0
    )
    return ClassMetrics(
        precision=np.asarray(precision, dtype=np.float64),
        recall=np.asarray(recall, dtype=np.float64),
        f1=np.asarray(f1, dtype=np.float64),
        support=np.asarray(support, dtype=np.int64),
        confusion=confusion_matrix(labels, predictions, labels=classes),
    )


def summarize_metrics(runs: Sequence[ClassMetrics]) -> Dict[str, Tuple[float, float]]:
    """
    Mean and sample sd across folds or runs

    Keys are "<class>/<metric>" for each class, plus "macro/<metric>" and "accuracy".
    """
    summary: Dict[str, Tuple[float, float]] = {}
    for k, name in enumerate(CLASS_NAMES):
        for metric in ("precision", "recall", "f1"):
            summary[f"{name}/{metric}"] = mean_sd([getattr(m, metric)[k] for m in runs])
    for metric in ("precision", "recall", "f1"):
        summary[f"macro/{metric}"] = mean_sd([getattr(m, f"macro_{metric}") for m in runs])
    summary["accuracy"] = mean_sd([m.accuracy for m in runs])
    return summary


@dataclass
class TrainedClassifier:
    model: BaselineCNN
    best_epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)


class ClassifierService:
    """
    Trains and evaluates the baseline classifier
    """

    def __init__(self, progress_bars: bool = True):
        self.progress_bars = progress_bars
        logger.info("Initializing ClassifierService")

    def _loss(self, model: BaselineCNN, images: np.ndarray, labels: np.ndarray) -> float:
        with no_grad():
            total = 0.0
            for start in range(0, len(images), PREDICT_BATCH):
                chunk = slice(start, start + PREDICT_BATCH)
                total += cross_entropy(model.logits(images[chunk]), labels[chunk]).item() * len(labels[chunk])
        return total / len(labels)

    def train_classifier(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        settings: ClassifierSettings,
        seed: int,
        valid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ) -> TrainedClassifier:
        """
        Train a BaselineCNN

        Args:
            images: (N, H, W, C) training images
            labels: (N,) integer labels
            settings: classifier recipe
            seed: drives initialization and epoch shuffling
            valid: (images, labels) for early stopping; None trains for max_epochs

        Returns:
            TrainedClassifier holding the best-validation-loss weights

        Raises:
            DataError: empty training set or a single class
        """
        settings.validate()
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) == 0:
            raise DataError("classifier training set is empty")
        if len(np.unique(labels)) < 2:
            raise DataError(f"classifier training set has a single class: {CLASS_NAMES[int(labels[0])]}")

        rng = SeededRng(seed)
        model = BaselineCNN(images.shape[1:], settings.filters, rng.child("init"))
        parameters = model.parameters()
        optimizer = Adam(parameters, learning_rate=settings.learning_rate)
        count = len(labels)
        result = TrainedClassifier(model=model, best_epoch=0)
        best_loss = np.inf
        best_state = model.state()
        stale = 0

        try:
            epochs = tqdm(range(settings.max_epochs), desc="classifier", disable=not self.progress_bars, leave=False)
            for epoch in epochs:
                order = rng.child("epoch", epoch).permutation(count)
                train_loss = 0.0
                for start in range(0, count, settings.batch_size):
                    idx = order[start : start + settings.batch_size]
                    loss = cross_entropy(model.logits(images[idx]), labels[idx])
                    gradient(loss, parameters)
                    optimizer.step()
                    train_loss += loss.item() * len(idx)
                record = {"epoch": epoch, "train_loss": train_loss / count}

                if valid is None:
                    monitored = record["train_loss"]
                else:
                    monitored = self._loss(model, np.asarray(valid[0], dtype=np.float64), np.asarray(valid[1]))
                    record["valid_loss"] = monitored
                result.history.append(record)
                logger.debug(f"classifier epoch {epoch}: {record}")

                if monitored < best_loss:
                    best_loss, best_state, stale = monitored, model.state(), 0
                    result.best_epoch = epoch
                elif valid is not None:
                    stale += 1
                    if stale >= settings.patience:
                        logger.info(f"Early stopping at epoch {epoch}; best epoch {result.best_epoch}")
                        break
        except Exception as e:
            logger.error(f"Classifier training failed: {str(e)}")
            raise

        model.load_state(best_state)
        return result

    def evaluate(self, model: BaselineCNN, images: np.ndarray, labels: np.ndarray) -> ClassMetrics:
        """Per-class metrics of `model` on a labeled test set."""
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) == 0:
            raise DataError("cannot evaluate on an empty test set")
        return metrics_from_predictions(labels, model.predict(images))


# Singleton instance
_classifier_service_instance = None


def get_classifier_service(progress_bars: bool = True) -> ClassifierService:
    """
    Get singleton instance of ClassifierService

    Returns:
        ClassifierService instance
    """
    global _classifier_service_instance

    if _classifier_service_instance is None:
        _classifier_service_instance = ClassifierService(progress_bars=progress_bars)

    return _classifier_service_instance
