"""Versioned tensor container used for checkpoints and frame files.

Layout::

    b"POLYADAPT" | version: u32 LE | header length: u64 LE | header (JSON) | payload

The header lists ``[name, shape, offset]`` for each tensor; the payload is
little-endian float32, row-major, tensors back to back in header order.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import orjson

from .config import AblationVariant, ModelConfig
from .errors import CheckpointError, TruncatedFileError
from .module import Module

logger = logging.getLogger(__name__)

MAGIC = b"POLYADAPT"
VERSION = 1
_PREFIX = struct.Struct("<IQ")
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] | None = None
    variant: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)


def write_container(
    path: str | Path,
    kind: str,
    tensors: dict[str, np.ndarray],
    config: dict[str, Any] | None = None,
    variant: str | None = None,
    metadata: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
        index.append([name, list(data.shape), offset])
        chunks.append(data.tobytes(order="C"))
        offset += data.nbytes
    header = orjson.dumps(
        {"kind": kind, "config": config, "variant": variant, "metadata": metadata or {}, "tensors": index},
        option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY,
    )
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a polyadapt container")
    start = len(MAGIC)
    if len(raw) < start + _PREFIX.size:
        raise TruncatedFileError(f"{path}: truncated before header length")
    version, header_len = _PREFIX.unpack_from(raw, start)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    start += _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = orjson.loads(raw[start : start + header_len])
    except orjson.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = memoryview(raw)[start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise TruncatedFileError(f"{path}: payload ends inside tensor {name}")
        tensors[name] = np.frombuffer(payload[offset:end], dtype=PAYLOAD_DTYPE).reshape(shape).astype(np.float32)
    return Checkpoint(
        kind=header["kind"],
        tensors=tensors,
        config=header.get("config"),
        variant=header.get("variant"),
        metadata=header.get("metadata") or {},
    )


def checkpoint_model_config(ckpt: Checkpoint) -> ModelConfig:
    if ckpt.config is None:
        raise CheckpointError(f"{ckpt.kind} container carries no model config")
    return ModelConfig.model_validate(ckpt.config)


def save_checkpoint(model: Module, path: str | Path, metadata: dict[str, Any] | None = None) -> Path:
    """Write every named parameter of ``model`` with its config echo."""
    meta = dict(metadata or {})
    meta.setdefault("seed", getattr(model, "seed", 0))
    pretrained = getattr(model, "pretrained", None)
    if pretrained is not None:
        meta["pretrained"] = sorted(pretrained)
        meta["frozen"] = sorted(n for n, p in model.named_parameters() if not p.requires_grad)
    variant = getattr(model, "variant", None)
    out = write_container(
        path,
        kind=model.kind,
        tensors=model.state_dict(),
        config=model.config.model_dump(mode="json"),
        variant=variant.value if variant is not None else None,
        metadata=meta,
    )
    logger.info("checkpoint saved", extra={"fields": {"path": str(out), "kind": model.kind}})
    return out


def model_from_checkpoint(ckpt: Checkpoint, config: ModelConfig | None = None, dtype: Any = np.float32) -> Module:
    """Rebuild the model a container describes and load its tensors.

    ``config`` overrides the echoed config; tensors that do not fit it are
    rejected by name.
    """
    cfg = config or checkpoint_model_config(ckpt)
    seed = int(ckpt.metadata.get("seed", 0))
    model: Module
    if ckpt.kind == "recognizer":
        from .model import SpeechRecognizer

        model = SpeechRecognizer(cfg, AblationVariant(ckpt.variant or "tf"), seed, dtype)
        model.pretrained = set(ckpt.metadata.get("pretrained", []))
    elif ckpt.kind == "text":
        from .model import TextSeq2Seq

        model = TextSeq2Seq(cfg, seed, dtype)
    elif ckpt.kind == "acoustic":
        from .pretrain import AcousticPretrainer, pretrainer_config

        model = AcousticPretrainer(cfg, pretrainer_config(ckpt.metadata), seed, dtype)
    else:
        raise CheckpointError(f"cannot build a model from a {ckpt.kind!r} container")
    model.load_state_dict(ckpt.tensors)
    frozen = set(ckpt.metadata.get("frozen", []))
    for name, param in model.named_parameters():
        param.requires_grad = name not in frozen
    return model


def load_checkpoint(path: str | Path, config: ModelConfig | None = None, dtype: Any = np.float32) -> Module:
    return model_from_checkpoint(read_checkpoint(path), config, dtype)


def write_frames(path: str | Path, frames: np.ndarray) -> Path:
    return write_container(path, "frames", {"frames": frames})


def read_frames(path: str | Path) -> np.ndarray:
    ckpt = read_checkpoint(path)
    if ckpt.kind != "frames":
        raise CheckpointError(f"{path}: expected a frames container, found {ckpt.kind!r}")
    return ckpt.tensors["frames"]


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
