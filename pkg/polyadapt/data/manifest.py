"""Tab-separated manifests and sharded frame storage.

A manifest line is ``path<TAB>text<TAB>lang<TAB>n_frames``. ``path`` is
``<shard>#<key>``: the frames of one split and language live in a single
container file (see :mod:`polyadapt.checkpoint`) with one tensor per
utterance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from ..checkpoint import read_checkpoint, write_container
from ..errors import DataError

FIELDS = ("path", "text", "lang", "n_frames")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    text: str
    lang: str
    n_frames: int

    @property
    def lang_id(self) -> int:
        return int(self.lang.lstrip("l"))

    @property
    def shard(self) -> str:
        return self.path.split("#", 1)[0]

    @property
    def key(self) -> str:
        return self.path.split("#", 1)[1]


def manifest_frame(records: Sequence[ManifestRecord]) -> pd.DataFrame:
    return pd.DataFrame([[r.path, r.text, r.lang, r.n_frames] for r in records], columns=list(FIELDS))


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_frame(records).to_csv(
        path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE, lineterminator="\n", encoding="utf-8"
    )
    return path


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    if path.stat().st_size == 0:
        return []
    df = pd.read_csv(
        path,
        sep="\t",
        header=None,
        names=list(FIELDS),
        dtype={"path": str, "text": str, "lang": str, "n_frames": np.int64},
        keep_default_na=False,
        quoting=csv.QUOTE_NONE,
        encoding="utf-8",
    )
    return [ManifestRecord(r.path, r.text, r.lang, int(r.n_frames)) for r in df.itertuples(index=False)]


def manifest_path(root: str | Path, split: str) -> Path:
    return Path(root) / "manifests" / f"{split}.tsv"


def write_shard(root: str | Path, shard: str, frames: Iterable[np.ndarray]) -> list[str]:
    """Store utterances in ``root/shard`` and return their manifest paths."""
    tensors = {f"{i:06d}": f for i, f in enumerate(frames)}
    write_container(Path(root) / shard, "frames", tensors)
    return [f"{shard}#{key}" for key in tensors]


class FrameStore:
    """Reads utterance frames by manifest path, caching opened shards."""

    def __init__(self, root: str | Path, max_shards: int = 16) -> None:
        self.root = Path(root)
        self._load = lru_cache(maxsize=max_shards)(self._read_shard)

    def _read_shard(self, shard: str) -> dict[str, np.ndarray]:
        ckpt = read_checkpoint(self.root / shard)
        if ckpt.kind != "frames":
            raise DataError(f"{shard} is not a frames container")
        return ckpt.tensors

    def get(self, record: ManifestRecord) -> np.ndarray:
        tensors = self._load(record.shard)
        try:
            frames = tensors[record.key]
        except KeyError:
            raise DataError(f"{record.path}: no such utterance in shard") from None
        if frames.shape[0] != record.n_frames:
            raise DataError(f"{record.path}: manifest says {record.n_frames} frames, file has {frames.shape[0]}")
        return frames
