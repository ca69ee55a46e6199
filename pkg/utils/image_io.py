"""
FlowAug - Image I/O
Binary PGM (P5) images, CSV dataset manifests and tiled sample sheets

Pixel convention: float images on the 1/256 grid in [0, 1) map to bytes by
v -> round(v * 256), so a write-then-read round trip is lossless.
"""

import io
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from engine.errors import DataError
from utils.io_utils import PathLike, atomic_write_bytes, ensure_dir, read_csv, write_csv

logger = logging.getLogger(__name__)

CLASS_NAMES = ("good", "medium", "bad")
MANIFEST_FILENAME = "manifest.csv"
LEVELS = 256


def to_bytes(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise DataError(f"PGM images are single-channel, got shape {image.shape}")
        image = image[:, :, 0]
    if image.ndim != 2:
        raise DataError(f"expected an (H, W) or (H, W, 1) image, got shape {image.shape}")
    return np.clip(np.rint(image * LEVELS), 0, LEVELS - 1).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) / LEVELS)[:, :, None]


def encode_pgm(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(to_bytes(image)).save(buffer, format="PPM")
    return buffer.getvalue()


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """Write one image as 8-bit binary PGM."""
    return atomic_write_bytes(path, encode_pgm(image))


def read_pgm(path: PathLike) -> np.ndarray:
    """
    Read an 8-bit PGM

    Returns:
        (H, W, 1) float image on the 1/256 grid
    """
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            pixels = np.array(img)
    except (OSError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"cannot read image {path}: {str(e)}")
    return from_bytes(pixels)


def make_sheet(images: Sequence[np.ndarray], columns: int = 8, border: int = 1) -> np.ndarray:
    """Tile images into one (H, W, 1) sheet separated by `border` background pixels."""
    if len(images) == 0:
        raise DataError("cannot build a sheet from zero images")
    tiles = [to_bytes(img) for img in images]
    h, w = tiles[0].shape
    columns = max(1, min(columns, len(tiles)))
    rows = (len(tiles) + columns - 1) // columns
    sheet = np.zeros((rows * (h + border) + border, columns * (w + border) + border), dtype=np.uint8)
    for index, tile in enumerate(tiles):
        r, c = divmod(index, columns)
        top = border + r * (h + border)
        left = border + c * (w + border)
        sheet[top : top + h, left : left + w] = tile
    return from_bytes(sheet)


def write_sheet(path: PathLike, images: Sequence[np.ndarray], columns: int = 8) -> Path:
    return write_pgm(path, make_sheet(images, columns))


def save_dataset(directory: PathLike, images: np.ndarray, labels: np.ndarray) -> Path:
    """
    Write every image as PGM plus manifest.csv (path, label)

    Args:
        directory: output directory
        images: (N, H, W, 1) grid-valued array
        labels: (N,) integer class indices into CLASS_NAMES

    Returns:
        Path of the manifest
    """
    directory = ensure_dir(directory)
    ensure_dir(directory / "images")
    rows = []
    for index, (image, label) in enumerate(zip(images, labels)):
        relative = f"images/{index:05d}.pgm"
        write_pgm(directory / relative, image)
        rows.append({"path": relative, "label": CLASS_NAMES[int(label)]})
    logger.info(f"Saved {len(rows)} images to {directory}")
    return write_csv(directory / MANIFEST_FILENAME, rows, ["path", "label"])


def load_dataset(directory: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a manifest directory written by `save_dataset`

    Returns:
        (images (N, H, W, 1), labels (N,))
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_FILENAME
    if not manifest.is_file():
        raise DataError(f"no {MANIFEST_FILENAME} in {directory}")
    images: List[np.ndarray] = []
    labels: List[int] = []
    for row in read_csv(manifest):
        if row["label"] not in CLASS_NAMES:
            raise DataError(f"{manifest}: unknown label '{row['label']}'")
        images.append(read_pgm(directory / row["path"]))
        labels.append(CLASS_NAMES.index(row["label"]))
    if not images:
        raise DataError(f"{manifest} lists no images")
    return np.stack(images), np.asarray(labels, dtype=np.int64)
