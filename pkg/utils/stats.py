"""
FlowAug - Statistics Helpers
Paired deltas, sign test and mean/sd summaries for experiment reports
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

logger = logging.getLogger(__name__)


@dataclass
class PairedComparison:
    """Per-fold paired differences (treatment - control)"""

    deltas: np.ndarray
    mean: float
    median: float
    positive: int
    negative: int
    ties: int
    p_value: float


def sign_test(deltas: Sequence[float]) -> Tuple[float, int, int, int]:
    """
    One-sided sign test of H1: positive deltas are more frequent

    Ties (delta == 0) are dropped. With no non-zero deltas the p-value is 1.

    Returns:
        (p_value, positives, negatives, ties)
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    positive = int(np.sum(deltas > 0))
    negative = int(np.sum(deltas < 0))
    ties = int(deltas.size - positive - negative)
    trials = positive + negative
    if trials == 0:
        logger.warning("Sign test skipped: every paired delta is zero")
        return 1.0, positive, negative, ties
    result = binomtest(positive, trials, p=0.5, alternative="greater")
    return float(result.pvalue), positive, negative, ties


def paired_comparison(treatment: Sequence[float], control: Sequence[float]) -> PairedComparison:
    treatment = np.asarray(treatment, dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    if treatment.shape != control.shape:
        raise ValueError(f"paired arrays differ in shape: {treatment.shape} vs {control.shape}")
    deltas = treatment - control
    p_value, positive, negative, ties = sign_test(deltas)
    return PairedComparison(
        deltas=deltas,
        mean=float(deltas.mean()) if deltas.size else 0.0,
        median=float(np.median(deltas)) if deltas.size else 0.0,
        positive=positive,
        negative=negative,
        ties=ties,
        p_value=p_value,
    )


def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for fewer than two values)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0, 0.0
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), sd
