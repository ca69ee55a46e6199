"""
FlowAug - Two-Dimensional Toy Flows
Two-moons data and grid quadrature of learned densities
"""

import logging

import numpy as np
from sklearn.datasets import make_moons

from engine.rng import SeededRng
from engine.tensor import no_grad
from flows.model import MultiScaleFlow

logger = logging.getLogger(__name__)

TOY_SHAPE = (1, 1, 2)


def two_moons(n: int, seed: int, noise: float = 0.05) -> np.ndarray:
    """`n` two-moons points shaped as (n, 1, 1, 2) pseudo-images."""
    points, _ = make_moons(n_samples=n, noise=noise, random_state=SeededRng(seed).derive_seed("moons"))
    return points.reshape(n, *TOY_SHAPE)


def build_toy_flow(rng: SeededRng, steps: int = 4, hidden: int = 16, stabilizer: str = "sigmoid") -> MultiScaleFlow:
    """Single-level, squeeze-free flow over 2-D points."""
    return MultiScaleFlow(
        TOY_SHAPE,
        levels=1,
        steps=steps,
        hidden=hidden,
        rng=rng,
        attention_levels=0,
        squeeze=False,
        stabilizer=stabilizer,
    )


def grid_mass(model: MultiScaleFlow, limit: float = 4.0, step: float = 0.05, batch: int = 4096) -> float:
    """Riemann sum of exp(log_prob) over the square [-limit, limit]^2."""
    axis = np.linspace(-limit, limit, int(round(2 * limit / step)) + 1)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel()], axis=1).reshape(-1, *TOY_SHAPE)
    total = 0.0
    with no_grad():
        for start in range(0, len(points), batch):
            total += float(np.exp(model.log_prob(points[start : start + batch]).data).sum())
    mass = total * step * step
    logger.debug(f"grid mass over [-{limit}, {limit}]^2 at step {step}: {mass:.6f}")
    return mass
