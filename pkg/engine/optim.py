"""
FlowAug - Optimization Primitives
Adam with bias correction, global gradient-norm clipping and the
polynomial-decay learning-rate schedule with linear warm-up
"""

import logging
import math
from typing import Dict, Iterable, List, Optional

import numpy as np

from engine.errors import ConfigError, NonFiniteGradientError
from engine.tensor import Parameter

logger = logging.getLogger(__name__)


def warmup_polynomial_lr(
    step: int,
    warmup_steps: int,
    max_lr: float,
    total_steps: int,
    power: float = 1.0,
) -> float:
    """
    Learning rate at `step`

    Linear ramp 0 -> max_lr over `warmup_steps`, then
    max_lr * ((total - step) / (total - warmup)) ** power, floored at 0.

    Raises:
        ConfigError: negative step or warmup_steps >= total_steps
    """
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if warmup_steps < 0 or warmup_steps >= total_steps:
        raise ConfigError(f"warmup_steps ({warmup_steps}) must be in [0, total_steps={total_steps})")
    if step < warmup_steps:
        return max_lr * step / warmup_steps
    fraction = (total_steps - step) / (total_steps - warmup_steps)
    return max_lr * max(fraction, 0.0) ** power


def global_grad_norm(parameters: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in parameters))


def clip_grad_norm(parameters: List[Parameter], max_norm: float) -> float:
    """
    Rescale all gradients so their joint L2 norm is at most `max_norm`

    Returns:
        The norm before clipping (may be non-finite; the optimizer reports that)
    """
    norm = global_grad_norm(parameters)
    if math.isfinite(norm) and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in parameters:
            p.grad = p.grad * factor
    return norm


class Adam:
    """
    Adam optimizer

    Moment estimates are keyed by parameter name and persist across calls.
    """

    def __init__(
        self,
        parameters: List[Parameter],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        names = [p.name for p in parameters]
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"parameter names must be unique, duplicated: {duplicates}")
        self.parameters = list(parameters)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._first: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in parameters}
        self._second: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in parameters}

    def step(self, learning_rate: Optional[float] = None) -> None:
        """
        Apply one bias-corrected Adam update

        Args:
            learning_rate: overrides the constructor rate for this step

        Raises:
            NonFiniteGradientError: some gradient holds NaN/Inf; nothing is updated
        """
        for p in self.parameters:
            if not np.all(np.isfinite(p.grad)):
                logger.error(f"Aborting Adam step: non-finite gradient in {p.name}")
                raise NonFiniteGradientError(p.name)

        lr = self.learning_rate if learning_rate is None else learning_rate
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for p in self.parameters:
            m = self._first[p.name]
            v = self._second[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def state_summary(self) -> Dict[str, float]:
        return {"step": float(self.step_count), "learning_rate": float(self.learning_rate)}
