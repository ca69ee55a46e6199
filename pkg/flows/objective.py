"""
FlowAug - Likelihood Objective
Uniform dequantization and the negative log-likelihood in nats and bits per dimension

Conventions:
- Images are scaled to [0, 1) on a grid of step a (1/256 for 8-bit data)
- Dequantized x~ = x + u, u ~ U[0, a)
- c = -M * log(a) converts a density on x~ into a discrete probability mass
- bits_per_dim = (nll_nats + c) / (M * ln 2)
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from engine.errors import ConfigError, NonFiniteError
from engine.rng import SeededRng
from engine.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_DISCRETIZATION = 1.0 / 256.0


class Dequantizer:
    """
    Uniform dequantizer for grid-valued data

    Args:
        discretization: grid step a > 0
    """

    def __init__(self, discretization: float = DEFAULT_DISCRETIZATION):
        if not discretization > 0:
            raise ConfigError(f"discretization level must be positive, got {discretization}")
        self.discretization = float(discretization)

    def dequantize(self, x: np.ndarray, rng: SeededRng) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x + rng.uniform(0.0, self.discretization, x.shape)

    def correction(self, dimension: int) -> float:
        """c = -M log a for per-sample dimensionality M."""
        return -dimension * math.log(self.discretization)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        """Clamp to [0, 1 - a] and snap down to the grid."""
        a = self.discretization
        clipped = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0 - a)
        return np.floor(clipped / a + 1e-9) * a

    def __repr__(self) -> str:
        return f"Dequantizer(a={self.discretization})"


def bits_per_dim(nll_nats: float, correction: float, dimension: int) -> float:
    return (nll_nats + correction) / (dimension * math.log(2.0))


def nats_from_bits_per_dim(bpd: float, correction: float, dimension: int) -> float:
    return bpd * dimension * math.log(2.0) - correction


@dataclass
class LossReport:
    """Mean batch NLL with its bits-per-dimension view"""

    nll_nats: float
    bits_per_dim: float
    step: int
    dimension: int
    correction: float
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        row.pop("loss")
        return row


def nll_loss(model, batch, dequantizer: Optional[Dequantizer] = None, step: int = 0) -> LossReport:
    """
    Mean negative log-likelihood of an already-dequantized batch

    Args:
        model: MultiScaleFlow
        batch: (B, H, W, C) continuous values
        dequantizer: supplies c; None means continuous data with c = 0
        step: training step recorded on the report

    Returns:
        LossReport whose `loss` tensor is recorded for differentiation
    """
    log_p = model.log_prob(batch)
    loss = -log_p.mean()
    nll = loss.item()
    if not math.isfinite(nll):
        raise NonFiniteError(f"non-finite loss at step {step} [last layer reached: {model.last_layer}]")
    dimension = model.dimension
    correction = dequantizer.correction(dimension) if dequantizer is not None else 0.0
    return LossReport(
        nll_nats=nll,
        bits_per_dim=bits_per_dim(nll, correction, dimension),
        step=step,
        dimension=dimension,
        correction=correction,
        loss=loss,
    )


@dataclass
class TrainConfig:
    """Flow training knobs"""

    epochs: int = 50
    batch_size: int = 32
    warmup_steps: int = 500
    max_lr: float = 1e-3
    lr_power: float = 1.0
    seed: int = 0
    gradient_clip_norm: float = 50.0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        positive = (
            "batch_size", "max_lr", "lr_power", "gradient_clip_norm", "divergence_factor", "divergence_patience",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
