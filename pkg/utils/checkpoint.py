"""
FlowAug - Model Checkpoints
Little-endian binary parameter store with integrity checks

Layout:
- 8 bytes   magic b"FLOWCKPT"
- u32       format version
- 32 bytes  SHA-256 digest of the model architecture
- u32       record count
- records   u32 name length, UTF-8 name, u32 rank, rank x u32 extents, float64 payload
- 32 bytes  SHA-256 over every preceding byte
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from engine.errors import CheckpointError
from utils.io_utils import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"FLOWCKPT"
FORMAT_VERSION = 1
DIGEST_SIZE = 32
_U32 = struct.Struct("<I")


def architecture_digest(architecture: Mapping[str, object]) -> bytes:
    """SHA-256 over the sorted key=value lines of a model architecture record."""
    text = "".join(f"{key}={architecture[key]}\n" for key in sorted(architecture))
    return hashlib.sha256(text.encode("utf-8")).digest()


def encode_checkpoint(model) -> bytes:
    parameters = model.parameters()
    chunks: List[bytes] = [
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        architecture_digest(model.architecture()),
        _U32.pack(len(parameters)),
    ]
    for p in parameters:
        name = p.name.encode("utf-8")
        chunks.append(_U32.pack(len(name)))
        chunks.append(name)
        chunks.append(_U32.pack(p.data.ndim))
        chunks.extend(_U32.pack(extent) for extent in p.data.shape)
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: PathLike, model) -> Path:
    """Atomically write every model parameter to `path`."""
    payload = encode_checkpoint(model)
    logger.info(f"Saving checkpoint with {len(model.parameters())} parameters to {path}")
    return atomic_write_bytes(path, payload)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset} (needed {count} more)")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(payload: bytes) -> Tuple[bytes, Dict[str, np.ndarray]]:
    """
    Parse and verify a checkpoint payload

    Returns:
        (architecture digest, ordered mapping name -> array)
    """
    if len(payload) < len(MAGIC) + 4 + DIGEST_SIZE + 4 + DIGEST_SIZE:
        raise CheckpointError(f"checkpoint too short ({len(payload)} bytes)")
    body, checksum = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")

    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a FLOWCKPT file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    digest = reader.take(DIGEST_SIZE)
    count = reader.u32()

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in records:
            raise CheckpointError(f"duplicate parameter record '{name}'")
        records[name] = data
    if reader.offset != len(body):
        raise CheckpointError(f"{len(body) - reader.offset} trailing bytes after the last record")
    return digest, records


def load_checkpoint(path: PathLike, model) -> None:
    """
    Restore parameters into `model` and mark its ActNorm layers initialized

    Raises:
        CheckpointError: unreadable, corrupted, or written by a different architecture
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {str(e)}")

    digest, records = decode_checkpoint(payload)
    if digest != architecture_digest(model.architecture()):
        raise CheckpointError(f"checkpoint {path} was written for a different model architecture")

    params = model.named_parameters()
    missing = sorted(set(params) - set(records))
    extra = sorted(set(records) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, value in records.items():
        if value.shape != params[name].shape:
            raise CheckpointError(f"parameter '{name}' has shape {value.shape}, model expects {params[name].shape}")
        params[name].assign(value)
    for actnorm in model.actnorms():
        actnorm.mark_initialized()
    logger.info(f"Loaded {len(records)} parameters from {path}")
