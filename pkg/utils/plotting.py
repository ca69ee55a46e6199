"""
FlowAug - Sweep Plot
F1 versus augmentation size per class, with standard-deviation bands
"""

import io
import logging
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from utils.io_utils import PathLike, atomic_write_bytes  # noqa: E402

logger = logging.getLogger(__name__)


def plot_sweep(
    path: PathLike,
    sizes: Sequence[int],
    means: Dict[str, Sequence[float]],
    sds: Dict[str, Sequence[float]],
    recommended: Optional[int] = None,
) -> None:
    """
    Write a PNG of mean F1 per class against augmentation size

    Args:
        path: destination file
        sizes: augmentation sizes (x axis)
        means: class name -> mean F1 per size
        sds: class name -> F1 standard deviation per size
        recommended: size to mark with a vertical line
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for name, curve in means.items():
            lower = [m - s for m, s in zip(curve, sds[name])]
            upper = [m + s for m, s in zip(curve, sds[name])]
            ax.plot(sizes, curve, marker="o", label=name)
            ax.fill_between(sizes, lower, upper, alpha=0.2)
        if recommended is not None:
            ax.axvline(recommended, color="grey", linestyle="--", label=f"recommended ({recommended})")
        ax.set_xlabel("synthetic rare-class samples")
        ax.set_ylabel("F1")
        ax.set_ylim(0.0, 1.05)
        ax.legend(loc="lower right")
        ax.grid(alpha=0.3)
        buffer = io.BytesIO()
        fig.savefig(buffer, format="png", dpi=100, bbox_inches="tight")
    finally:
        plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"Wrote sweep plot to {path}")
