"""
FlowAug - Augmentation Service
Sampling and latent-space interpolation with a trained flow

Features:
- encode / decode between images and latent codes
- Temperature-scaled sampling from the Gaussian prior
- Linear or spherical interpolation applied to every latent part
- Rare-class augmentation sets with full source provenance
- Interpolation strips and plurality (non-duplication) reports
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from engine.errors import ConfigError, DataError, ShapeError
from engine.rng import SeededRng
from engine.tensor import Tensor, no_grad
from flows.model import LatentCode, MultiScaleFlow
from flows.objective import DEFAULT_DISCRETIZATION, Dequantizer
from utils.image_io import write_pgm
from utils.io_utils import PathLike, ensure_dir, write_csv

logger = logging.getLogger(__name__)

INTERPOLATION_MODES = ("linear", "spherical")
PAIRING_POLICIES = ("random",)
PROVENANCE_FIELDS = ("index", "source_a", "source_b", "t", "fold_id", "local_a", "local_b")
DECODE_BATCH = 64


@dataclass
class InterpolationSpec:
    """How synthetic samples are drawn between pairs of real ones"""

    mode: str = "linear"
    t_low: float = 0.2
    t_high: float = 0.8
    temperature: float = 1.0
    discretization: float = DEFAULT_DISCRETIZATION
    pairing: str = "random"

    def validate(self) -> None:
        if self.mode not in INTERPOLATION_MODES:
            raise ConfigError(f"interpolation mode must be one of {INTERPOLATION_MODES}, got '{self.mode}'")
        if self.pairing not in PAIRING_POLICIES:
            raise ConfigError(f"pairing policy must be one of {PAIRING_POLICIES}, got '{self.pairing}'")
        if not 0.0 < self.t_low < self.t_high < 1.0:
            raise ConfigError(f"t range must satisfy 0 < t_low < t_high < 1, got ({self.t_low}, {self.t_high})")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be non-negative, got {self.temperature}")
        if not self.discretization > 0:
            raise ConfigError(f"discretization must be positive, got {self.discretization}")

    @classmethod
    def from_run_config(cls, run_config) -> "InterpolationSpec":
        spec = cls(
            mode=run_config.interp_mode,
            t_low=run_config.t_low,
            t_high=run_config.t_high,
            temperature=run_config.temperature,
            discretization=run_config.discretization,
            pairing=run_config.interp_pairing,
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class Provenance:
    """Where one synthetic image came from"""

    local_a: int
    local_b: int
    source_a: int
    source_b: int
    t: float
    fold_id: int


@dataclass
class AugmentationSet:
    images: np.ndarray
    provenance: List[Provenance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.provenance)

    def source_ids(self) -> set:
        ids = set()
        for record in self.provenance:
            ids.add(record.source_a)
            ids.add(record.source_b)
        return ids

    def head(self, count: int) -> "AugmentationSet":
        return AugmentationSet(self.images[:count], self.provenance[:count])

    def rows(self) -> List[Dict[str, object]]:
        return [
            {
                "index": i,
                "source_a": p.source_a,
                "source_b": p.source_b,
                "t": p.t,
                "fold_id": p.fold_id,
                "local_a": p.local_a,
                "local_b": p.local_b,
            }
            for i, p in enumerate(self.provenance)
        ]


def blend_latents(z_a: np.ndarray, z_b: np.ndarray, t: float, mode: str = "linear") -> np.ndarray:
    """
    Interpolate one latent part

    Spherical mode treats the whole part as one vector and falls back to
    linear interpolation when the two vectors are (anti)parallel.
    """
    if mode == "linear":
        return (1.0 - t) * z_a + t * z_b
    if mode != "spherical":
        raise ConfigError(f"unknown interpolation mode '{mode}'")
    a, b = z_a.reshape(-1), z_b.reshape(-1)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return (1.0 - t) * z_a + t * z_b
    omega = np.arccos(np.clip(np.dot(a, b) / norm, -1.0, 1.0))
    sin_omega = np.sin(omega)
    if sin_omega < 1e-8:
        return (1.0 - t) * z_a + t * z_b
    return (np.sin((1.0 - t) * omega) / sin_omega) * z_a + (np.sin(t * omega) / sin_omega) * z_b


class AugmentationService:
    """
    Synthesizes images from a trained flow
    """

    def __init__(self):
        logger.info("Initializing AugmentationService")

    # ---- latent round trip ----------------------------------------------------

    def encode(self, model: MultiScaleFlow, images: np.ndarray) -> LatentCode:
        """Latent codes of a (B, H, W, C) batch."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        with no_grad():
            latent, _ = model.forward(Tensor(images))
        return latent

    def decode(self, model: MultiScaleFlow, latent: LatentCode) -> np.ndarray:
        """Images for a batch of latent codes."""
        with no_grad():
            return model.inverse(latent).data

    def _decode_arrays(self, model: MultiScaleFlow, parts: Sequence[np.ndarray]) -> np.ndarray:
        count = parts[0].shape[0]
        outputs = []
        for start in range(0, count, DECODE_BATCH):
            chunk = LatentCode.from_arrays([p[start : start + DECODE_BATCH] for p in parts])
            outputs.append(self.decode(model, chunk))
        return np.concatenate(outputs, axis=0)

    # ---- generation -----------------------------------------------------------

    def sample(self, model: MultiScaleFlow, n: int, temperature: float, rng: SeededRng) -> np.ndarray:
        """
        Draw z ~ N(0, temperature^2 I) for every latent part and decode

        Returns:
            (n, H, W, C) array
        """
        if temperature < 0:
            raise ConfigError(f"temperature must be non-negative, got {temperature}")
        if n < 0:
            raise ConfigError(f"sample count must be non-negative, got {n}")
        h, w, c = model.input_shape
        if n == 0:
            return np.zeros((0, h, w, c))
        parts = [rng.child(i).normal(shape, scale=temperature) for i, shape in enumerate(model.latent_shapes(n))]
        logger.info(f"Sampling {n} images at temperature {temperature}")
        return self._decode_arrays(model, parts)

    def interpolate(
        self,
        model: MultiScaleFlow,
        x_a: np.ndarray,
        x_b: np.ndarray,
        t: float,
        mode: str = "linear",
    ) -> np.ndarray:
        """
        Decode the latent blend of two images at position t in (0, 1)

        Returns:
            (H, W, C) synthetic image (not clamped)
        """
        if not 0.0 < t < 1.0:
            raise ConfigError(f"interpolation position t must lie strictly inside (0, 1), got {t}")
        x_a = np.asarray(x_a, dtype=np.float64)
        x_b = np.asarray(x_b, dtype=np.float64)
        if x_a.shape != x_b.shape:
            raise ShapeError(f"endpoints differ in shape: {x_a.shape} vs {x_b.shape}")
        if np.array_equal(x_a, x_b):
            raise DataError("interpolation endpoints are identical")
        latent = self.encode(model, np.stack([x_a, x_b]))
        parts = [blend_latents(p[0:1], p[1:2], t, mode) for p in latent.arrays()]
        return self._decode_arrays(model, parts)[0]

    def interpolation_strip(
        self,
        model: MultiScaleFlow,
        x_a: np.ndarray,
        x_b: np.ndarray,
        steps: int = 8,
        mode: str = "linear",
    ) -> np.ndarray:
        """Decoded latent walk from x_a to x_b with `steps` evenly spaced positions, endpoints included."""
        if steps < 2:
            raise ConfigError(f"an interpolation strip needs at least 2 steps, got {steps}")
        latent = self.encode(model, np.stack([np.asarray(x_a), np.asarray(x_b)]))
        ts = np.linspace(0.0, 1.0, steps)
        parts = [
            np.concatenate([blend_latents(p[0:1], p[1:2], float(t), mode) for t in ts], axis=0)
            for p in latent.arrays()
        ]
        return self._decode_arrays(model, parts)

    def generate_augmentations(
        self,
        model: MultiScaleFlow,
        images: np.ndarray,
        count: int,
        spec: InterpolationSpec,
        rng: SeededRng,
        source_ids: Optional[Sequence[int]] = None,
        fold_id: int = 0,
    ) -> AugmentationSet:
        """
        Synthesize `count` images by interpolating random same-class pairs

        Each round pairs the sources by a fresh permutation (no image used twice
        within a round) and draws t ~ U(t_low, t_high) per pair. Pairs of
        identical images and repeated (pair, t) triples are skipped. Outputs are
        clamped to [0, 1 - a] and snapped to the data grid.

        Args:
            model: trained flow
            images: (N, H, W, C) source images, N >= 2
            count: number of synthetic images
            spec: interpolation settings
            rng: seeded stream; fully determines the result with the inputs
            source_ids: global dataset ids of the sources (default 0..N-1)
            fold_id: cross-validation iteration recorded in provenance

        Returns:
            AugmentationSet with provenance for every image
        """
        spec.validate()
        images = np.asarray(images, dtype=np.float64)
        n = images.shape[0]
        if count < 0:
            raise ConfigError(f"augmentation count must be non-negative, got {count}")
        if n < 2:
            raise DataError(f"augmentation needs at least 2 source images, got {n}")
        ids = np.arange(n) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ShapeError(f"source_ids must have one entry per image, got {ids.shape} for {n} images")
        if count == 0:
            return AugmentationSet(np.zeros((0,) + images.shape[1:]), [])

        flat = images.reshape(n, -1)
        if np.all(flat == flat[0]):
            raise DataError("all augmentation source images are identical")

        chosen: List[tuple] = []
        seen = set()
        max_rounds = 1000 + 10 * count
        rounds = 0
        while len(chosen) < count:
            if rounds >= max_rounds:
                raise DataError(f"could not form {count} distinct interpolation pairs from {n} sources")
            round_rng = rng.child("round", rounds)
            order = round_rng.permutation(n)
            pairs = order[: 2 * (n // 2)].reshape(-1, 2)
            ts = round_rng.uniform(spec.t_low, spec.t_high, len(pairs))
            for (i, j), t in zip(pairs, ts):
                if len(chosen) == count:
                    break
                if np.array_equal(flat[i], flat[j]):
                    continue
                key = (min(i, j), max(i, j), float(t))
                if key in seen:
                    continue
                seen.add(key)
                chosen.append((int(i), int(j), float(t)))
            rounds += 1

        logger.info(f"Generating {count} interpolations from {n} sources over {rounds} pairing rounds")
        latent = self.encode_batched(model, images)
        parts = []
        for part in latent:
            blended = [blend_latents(part[i : i + 1], part[j : j + 1], t, spec.mode) for i, j, t in chosen]
            parts.append(np.concatenate(blended, axis=0))
        decoded = self._decode_arrays(model, parts)
        synthetic = Dequantizer(spec.discretization).quantize(decoded)

        provenance = [
            Provenance(local_a=i, local_b=j, source_a=int(ids[i]), source_b=int(ids[j]), t=t, fold_id=fold_id)
            for i, j, t in chosen
        ]
        return AugmentationSet(synthetic, provenance)

    def encode_batched(self, model: MultiScaleFlow, images: np.ndarray) -> List[np.ndarray]:
        chunks = [
            self.encode(model, images[s : s + DECODE_BATCH]).arrays() for s in range(0, len(images), DECODE_BATCH)
        ]
        return [np.concatenate([c[k] for c in chunks], axis=0) for k in range(len(chunks[0]))]

    # ---- reports and persistence ----------------------------------------------

    def plurality_report(
        self,
        synthetic: np.ndarray,
        sources: np.ndarray,
        provenance: Optional[Sequence[Provenance]] = None,
    ) -> Dict[str, object]:
        """
        Distance of synthetic images to their sources

        Returns:
            {'nearest_source': per-image mean-abs distance to the closest source,
             'to_a' / 'to_b': distances to each endpoint (with provenance),
             'exact_copy_fraction': share of images identical to some source}
        """
        synthetic = np.asarray(synthetic, dtype=np.float64).reshape(len(synthetic), -1)
        sources = np.asarray(sources, dtype=np.float64).reshape(len(sources), -1)
        if len(synthetic) == 0:
            return {"nearest_source": np.zeros(0), "exact_copy_fraction": 0.0}
        distances = np.concatenate(
            [
                np.abs(synthetic[s : s + 16, None, :] - sources[None, :, :]).mean(axis=2)
                for s in range(0, len(synthetic), 16)
            ]
        )
        nearest = distances.min(axis=1)
        report: Dict[str, object] = {
            "nearest_source": nearest,
            "exact_copy_fraction": float(np.mean(nearest == 0.0)),
        }
        if provenance is not None:
            report["to_a"] = np.array([distances[k, p.local_a] for k, p in enumerate(provenance)])
            report["to_b"] = np.array([distances[k, p.local_b] for k, p in enumerate(provenance)])
        return report

    def save(self, out_dir: PathLike, augmentations: AugmentationSet, prefix: str = "aug") -> Path:
        """Write images as PGM and provenance as CSV; returns the CSV path."""
        out_dir = ensure_dir(out_dir)
        image_dir = ensure_dir(out_dir / "images")
        for index, image in enumerate(augmentations.images):
            write_pgm(image_dir / f"{prefix}_{index:05d}.pgm", image)
        return write_csv(out_dir / f"{prefix}_provenance.csv", augmentations.rows(), PROVENANCE_FIELDS)


# Singleton instance
_augmentation_service_instance = None


def get_augmentation_service() -> AugmentationService:
    """
    Get singleton instance of AugmentationService

    Returns:
        AugmentationService instance
    """
    global _augmentation_service_instance

    if _augmentation_service_instance is None:
        _augmentation_service_instance = AugmentationService()

    return _augmentation_service_instance
