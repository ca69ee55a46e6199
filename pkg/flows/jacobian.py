"""
FlowAug - Numerical Oracles
Dense Jacobians by finite differences and randomized gradient checks,
shared by the test suite and the `verify` command
"""

import logging
from typing import Callable, Dict

import numpy as np

from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor, gradient, no_grad

logger = logging.getLogger(__name__)


def dense_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """
    Central-difference Jacobian of `fn` at `x`

    Args:
        fn: maps an array shaped like x to any array; output is flattened
        x: evaluation point
        step: perturbation size

    Returns:
        (out_size, x.size) matrix
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    columns = []
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        delta = np.asarray(fn(plus.reshape(x.shape))).reshape(-1) - np.asarray(fn(minus.reshape(x.shape))).reshape(-1)
        columns.append(delta / (2.0 * step))
    return np.stack(columns, axis=1)


def log_abs_det_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5) -> float:
    jac = dense_jacobian(fn, x, step)
    if jac.shape[0] != jac.shape[1]:
        raise ValueError(f"Jacobian is not square: {jac.shape}")
    _, logabs = np.linalg.slogdet(jac)
    return float(logabs)


def layer_function(layer) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a layer's forward pass as an array -> array map without recording."""

    def fn(x: np.ndarray) -> np.ndarray:
        with no_grad():
            y, _ = layer.forward(Tensor(x))
        return y.data

    return fn


def model_function(model) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a model's forward pass; the output is the flattened latent code."""

    def fn(x: np.ndarray) -> np.ndarray:
        with no_grad():
            latent, _ = model.forward(Tensor(x))
        return latent.flatten()

    return fn


def gradient_check(
    loss_fn: Callable[[], Tensor],
    parameter: Parameter,
    rng: SeededRng,
    projections: int = 10,
    step: float = 1e-5,
) -> float:
    """
    Compare analytic and central-difference directional derivatives

    Args:
        loss_fn: recomputes the scalar loss from the current parameter values
        parameter: parameter under test (perturbed in place, then restored)
        rng: source of random projection directions
        projections: number of random unit directions
        step: finite-difference step

    Returns:
        Largest relative error across the projections
    """
    loss = loss_fn()
    gradient(loss, [parameter])
    analytic_grad = parameter.grad.copy()
    original = parameter.data.copy()
    worst = 0.0
    try:
        for k in range(projections):
            direction = rng.child(k).normal(parameter.shape)
            direction /= np.linalg.norm(direction) or 1.0
            analytic = float(np.sum(analytic_grad * direction))
            with no_grad():
                parameter.data[...] = original + step * direction
                upper = loss_fn().item()
                parameter.data[...] = original - step * direction
                lower = loss_fn().item()
            parameter.data[...] = original
            numeric = (upper - lower) / (2.0 * step)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / scale)
    finally:
        parameter.data[...] = original
    return worst


def gradient_check_all(
    loss_fn: Callable[[], Tensor],
    parameters,
    rng: SeededRng,
    projections: int = 10,
) -> Dict[str, float]:
    """Relative error per parameter name."""
    return {p.name: gradient_check(loss_fn, p, rng.child(p.name), projections) for p in parameters}
