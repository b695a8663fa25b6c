"""Binary checkpoint format for encoder parameters.

Layout (all little-endian):

    b"VLCD" | uint32 version | uint64 metadata length | metadata JSON (UTF-8)
    | float64 tensor blobs in the order of metadata["tensors"]

Metadata is dumped with sorted keys so identical checkpoints have
identical bytes.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeInt, ValidationError

from src.config import EncoderSpec
from src.numerics.tensor import ContractError
from src.services.encoders import EncoderParams

logger = logging.getLogger(__name__)

MAGIC = b"VLCD"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not understood."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared content."""


class ShapeChainError(CheckpointError):
    """Tensor shapes do not form the declared encoder."""


class _TensorEntry(BaseModel):
    name: str
    shape: List[NonNegativeInt]


class _Metadata(BaseModel):
    """Shape of the metadata block; unknown keys are ignored."""
    model_config = ConfigDict(extra="ignore")

    encoder: EncoderSpec
    stage: str
    seed: int
    epoch: NonNegativeInt
    config_hash: str
    config: Dict[str, Any] = {}
    loss_digest: str = ""
    init: str = "fresh"
    extra: Dict[str, Any] = {}
    tensors: List[_TensorEntry]


@dataclass
class Checkpoint:
    """Encoder parameters plus the provenance of the run that produced them."""
    params: EncoderParams
    stage: str
    seed: int
    epoch: int
    config_hash: str
    config: Dict[str, Any] = field(default_factory=dict)
    loss_digest: str = ""
    init: str = "fresh"
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def spec(self) -> EncoderSpec:
        return self.params.spec

    def metadata(self) -> Dict[str, Any]:
        names = self.params.tensor_names()
        return {
            "encoder": self.spec.model_dump(mode="json"),
            "stage": self.stage,
            "seed": self.seed,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "config": self.config,
            "loss_digest": self.loss_digest,
            "init": self.init,
            "extra": self.extra,
            "tensors": [
                {"name": name, "shape": list(tensor.shape)}
                for name, tensor in zip(names, self.params.tensors())
            ],
        }


def loss_digest(records: List[Dict[str, Any]]) -> str:
    """SHA-256 over the canonical JSON of a loss history."""
    payload = json.dumps(records, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    metadata = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in ckpt.params.tensors())
    return _HEADER.pack(MAGIC, VERSION, len(metadata)) + metadata + blobs


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse a checkpoint, validating magic, version, sizes and shape chain."""
    if len(raw) < len(MAGIC):
        raise TruncatedCheckpointError(f"{source}: {len(raw)} bytes is shorter than the header")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpointError(f"{source}: header is truncated")

    _, version, meta_length = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: format version {version}, expected {VERSION}")

    body = _HEADER.size + meta_length
    if len(raw) < body:
        raise TruncatedCheckpointError(f"{source}: metadata is truncated")
    try:
        metadata = _Metadata.model_validate(json.loads(raw[_HEADER.size:body].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise CheckpointError(f"{source}: unreadable metadata ({e})")

    tensors, offset = [], body
    for entry in metadata.tensors:
        shape = tuple(entry.shape)
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise TruncatedCheckpointError(f"{source}: tensor {entry.name} is truncated")
        tensors.append(np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes")

    try:
        params = EncoderParams.from_tensors(metadata.encoder, tensors)
    except ContractError as e:
        raise ShapeChainError(f"{source}: {e.message}")

    return Checkpoint(
        params=params,
        stage=metadata.stage,
        seed=metadata.seed,
        epoch=metadata.epoch,
        config_hash=metadata.config_hash,
        config=metadata.config,
        loss_digest=metadata.loss_digest,
        init=metadata.init,
        extra=metadata.extra,
    )


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    logger.info(f"Saved {ckpt.stage} checkpoint for {ckpt.spec.name} to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    ckpt = from_bytes(path.read_bytes(), source=str(path))
    logger.debug(f"Loaded {ckpt.stage} checkpoint for {ckpt.spec.name} from {path}")
    return ckpt
