"""
FlowAug - Flow Training Service
Maximum-likelihood training of multi-scale flows on image sets

Features:
- Data-dependent ActNorm initialization on the first seeded batch
- Adam with warm-up + polynomial learning-rate decay and gradient-norm clipping
- Seeded epoch shuffling and per-batch dequantization noise
- Divergence detection with the loss curve attached to the error
- Held-out bits-per-dimension evaluation
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from engine.errors import DataError, DivergenceError
from engine.optim import Adam, clip_grad_norm, warmup_polynomial_lr
from engine.rng import SeededRng
from engine.tensor import gradient, no_grad
from flows.model import MultiScaleFlow
from flows.objective import Dequantizer, TrainConfig, nll_loss
from utils.io_utils import PathLike, write_csv

logger = logging.getLogger(__name__)

LOSS_CURVE_FIELDS = ("step", "nll_nats", "bits_per_dim", "lr")
# Smallest magnitude the first loss counts as when scaling the divergence threshold
DIVERGENCE_FLOOR = 1.0


def divergence_threshold(first_nll: float, factor: float) -> float:
    """Loss level above which steps count towards divergence, from the first step's loss"""
    return factor * max(abs(first_nll), DIVERGENCE_FLOOR)


@dataclass
class TrainingResult:
    """Loss curve and schedule details of one `fit` call"""

    curve: List[Dict[str, float]] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)
    total_steps: int = 0
    warmup_steps: int = 0

    @property
    def final_nll(self) -> float:
        return self.epoch_means[-1] if self.epoch_means else float("nan")


def build_flow_model(run_config, input_shape: Tuple[int, int, int], rng: SeededRng) -> MultiScaleFlow:
    """Construct the model described by a RunConfig."""
    return MultiScaleFlow(
        input_shape=input_shape,
        levels=run_config.flow_levels,
        steps=run_config.flow_steps,
        hidden=run_config.flow_filters,
        rng=rng,
        attention_levels=run_config.attention_levels,
        heads=run_config.attention_heads,
        stabilizer=run_config.scale_stabilizer,
    )


def build_train_config(run_config, seed: int) -> TrainConfig:
    train_config = TrainConfig(
        epochs=run_config.flow_epochs,
        batch_size=run_config.flow_batch_size,
        warmup_steps=run_config.warmup_steps,
        max_lr=run_config.max_lr,
        lr_power=run_config.lr_power,
        seed=seed,
        gradient_clip_norm=run_config.gradient_clip_norm,
    )
    train_config.validate()
    return train_config


class FlowTrainingService:
    """
    Trains flows by minimizing the dequantized negative log-likelihood
    """

    def __init__(self, progress_bars: bool = True):
        """
        Initialize the flow training service

        Args:
            progress_bars: show tqdm bars over epochs
        """
        self.progress_bars = progress_bars
        logger.info("Initializing FlowTrainingService")

    def fit(
        self,
        model: MultiScaleFlow,
        images: np.ndarray,
        config: TrainConfig,
        dequantizer: Optional[Dequantizer] = None,
    ) -> TrainingResult:
        """
        Train `model` in place

        Args:
            model: flow to train
            images: (N, H, W, C) training images (grid-valued when a dequantizer is given)
            config: training knobs; `config.seed` drives every random draw
            dequantizer: adds U[0, a) noise per batch; None for continuous data

        Returns:
            TrainingResult with one curve row per optimizer step

        Raises:
            DataError: fewer than two images
            DivergenceError: loss above the divergence threshold for too long
        """
        config.validate()
        images = np.asarray(images, dtype=np.float64)
        count = images.shape[0]
        if count < 2:
            raise DataError(f"flow training needs at least 2 images, got {count}")

        rng = SeededRng(config.seed)
        batch_size = min(config.batch_size, count)
        steps_per_epoch = math.ceil(count / batch_size)
        total_steps = config.epochs * steps_per_epoch

        if not model.is_initialized:
            init_rng = rng.child("init")
            init_batch = images[init_rng.permutation(count)[:batch_size]]
            if dequantizer is not None:
                init_batch = dequantizer.dequantize(init_batch, init_rng.child("noise"))
            model.initialize(init_batch)

        result = TrainingResult(total_steps=total_steps)
        if total_steps == 0:
            logger.info("Zero epochs requested: model initialized, no optimizer steps taken")
            return result

        warmup = config.warmup_steps
        if warmup >= total_steps:
            warmup = total_steps // 5
            logger.warning(
                f"warmup_steps={config.warmup_steps} >= total steps {total_steps}; using {warmup} warm-up steps"
            )
        result.warmup_steps = warmup

        parameters = model.parameters()
        optimizer = Adam(parameters, learning_rate=config.max_lr)
        logger.info(
            f"Training flow: {count} images, {config.epochs} epochs x {steps_per_epoch} steps, "
            f"batch {batch_size}, {len(parameters)} parameter tensors"
        )

        threshold: Optional[float] = None
        above = 0
        step = 0
        try:
            for epoch in tqdm(range(config.epochs), desc="flow", disable=not self.progress_bars, leave=False):
                epoch_rng = rng.child("epoch", epoch)
                order = epoch_rng.permutation(count)
                epoch_losses = []
                for batch_index in range(steps_per_epoch):
                    idx = order[batch_index * batch_size : (batch_index + 1) * batch_size]
                    batch = images[idx]
                    if dequantizer is not None:
                        batch = dequantizer.dequantize(batch, epoch_rng.child(batch_index))

                    report = nll_loss(model, batch, dequantizer, step=step)
                    gradient(report.loss, parameters)
                    clip_grad_norm(parameters, config.gradient_clip_norm)
                    lr = warmup_polynomial_lr(step, warmup, config.max_lr, total_steps, config.lr_power)
                    optimizer.step(lr)

                    row = {"step": step, "nll_nats": report.nll_nats, "bits_per_dim": report.bits_per_dim, "lr": lr}
                    result.curve.append(row)
                    epoch_losses.append(report.nll_nats)
                    logger.debug(
                        f"step {step}: nll={report.nll_nats:.5f} nats, bpd={report.bits_per_dim:.5f}, lr={lr:.3e}"
                    )

                    if threshold is None:
                        threshold = divergence_threshold(report.nll_nats, config.divergence_factor)
                    above = above + 1 if report.nll_nats > threshold else 0
                    if above >= config.divergence_patience:
                        raise DivergenceError(
                            f"loss exceeded {threshold:.4g} nats for {above} consecutive steps (step {step})",
                            curve=result.curve,
                        )
                    step += 1

                epoch_mean = float(np.mean(epoch_losses))
                result.epoch_means.append(epoch_mean)
                logger.info(
                    f"epoch {epoch + 1}/{config.epochs}: mean nll={epoch_mean:.5f} nats",
                    extra={"epoch": epoch + 1, "nll_nats": epoch_mean, "lr": lr},
                )
        except Exception as e:
            logger.error(f"Flow training failed at step {step}: {str(e)}")
            raise

        return result

    def evaluate_bits_per_dim(
        self,
        model: MultiScaleFlow,
        images: np.ndarray,
        dequantizer: Dequantizer,
        rng: SeededRng,
        draws: int = 1,
        batch_size: int = 64,
    ) -> float:
        """
        Mean dequantized bits per dimension of `images`

        Args:
            model: trained flow
            images: (N, H, W, C) grid-valued images
            dequantizer: noise model and c correction
            rng: noise stream
            draws: dequantization draws averaged per image
            batch_size: evaluation batch size

        Returns:
            Bits per dimension averaged over images and draws
        """
        images = np.asarray(images, dtype=np.float64)
        if images.shape[0] == 0:
            raise DataError("cannot evaluate bits/dim on an empty image set")
        values = []
        with no_grad():
            for draw in range(draws):
                draw_rng = rng.child(draw)
                for start in range(0, images.shape[0], batch_size):
                    batch = dequantizer.dequantize(images[start : start + batch_size], draw_rng.child(start))
                    report = nll_loss(model, batch, dequantizer)
                    values.extend([report.bits_per_dim] * batch.shape[0])
        return float(np.mean(values))

    def write_loss_curve(self, path: PathLike, result: TrainingResult) -> None:
        write_csv(path, result.curve, LOSS_CURVE_FIELDS)


# Singleton instance
_training_service_instance = None


def get_flow_training_service(progress_bars: bool = True) -> FlowTrainingService:
    """
    Get singleton instance of FlowTrainingService

    Returns:
        FlowTrainingService instance
    """
    global _training_service_instance

    if _training_service_instance is None:
        _training_service_instance = FlowTrainingService(progress_bars=progress_bars)

    return _training_service_instance
