"""Frame-budget batching, collation and background prefetch."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, TypeVar

import numpy as np

from ..errors import DataError, ParameterError
from .manifest import FrameStore, ManifestRecord
from .vocab import PAD, Vocabulary

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class BatchStream:
    """Batches as lists of manifest indices, plus the number of skipped utterances."""

    batches: list[list[int]]
    skipped: int = 0

    def __iter__(self) -> Iterator[list[int]]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def pack_by_budget(lengths: Sequence[int], frame_budget: int, order: Sequence[int] | None = None) -> tuple[list[list[int]], int]:
    """Greedy packing of length-sorted items so padded size stays within budget.

    A batch of ``c`` items padded to length ``L`` costs ``c·L`` frames.
    """
    idx = list(order) if order is not None else sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches: list[list[int]] = []
    current: list[int] = []
    longest = 0
    skipped = 0
    for i in idx:
        n = lengths[i]
        if n > frame_budget:
            skipped += 1
            continue
        top = max(longest, n)
        if current and (len(current) + 1) * top > frame_budget:
            batches.append(current)
            current, top = [], n
        current.append(i)
        longest = top
    if current:
        batches.append(current)
    return batches, skipped


def make_batches(
    manifest: Sequence[ManifestRecord],
    frame_budget: int,
    homogeneous_lang: bool = True,
    seed: int = 0,
) -> BatchStream:
    """Sort by length, bucket within the frame budget, shuffle the batch order."""
    if frame_budget < 1:
        raise ParameterError(f"frame_budget must be positive, got {frame_budget}")
    lengths = [r.n_frames for r in manifest]
    groups: dict[str, list[int]] = {}
    for i, record in enumerate(manifest):
        groups.setdefault(record.lang if homogeneous_lang else "", []).append(i)
    batches: list[list[int]] = []
    skipped = 0
    for key in sorted(groups):
        order = sorted(groups[key], key=lambda i: (lengths[i], i))
        packed, n_skipped = pack_by_budget(lengths, frame_budget, order)
        batches.extend(packed)
        skipped += n_skipped
    if skipped:
        logger.warning("utterances longer than the frame budget skipped", extra={"fields": {"skipped": skipped, "budget": frame_budget}})
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(batches))
    return BatchStream([batches[i] for i in perm], skipped)


@dataclass
class Batch:
    frames: np.ndarray
    frame_lengths: np.ndarray
    dec_input: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    lang: int
    texts: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.target_mask.sum())


def collate(
    frames: Sequence[np.ndarray],
    texts: Sequence[str],
    lang: int,
    vocab: Vocabulary,
    dtype: np.dtype | type = np.float32,
) -> Batch:
    """Pad frames with each utterance's last frame and token rows with PAD.

    ``dec_input`` is ``[tag] + chars`` and ``targets`` is ``chars + [EOS]``.
    """
    if not frames:
        raise DataError("cannot collate an empty batch")
    lengths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    t_max = int(lengths.max())
    padded = np.stack([np.pad(f, ((0, t_max - f.shape[0]), (0, 0)), mode="edge") for f in frames]).astype(dtype)
    sequences = [vocab.encode_target(t, lang) for t in texts]
    l_max = max(len(s) for s in sequences) - 1
    dec_input = np.full((len(sequences), l_max), PAD, dtype=np.int64)
    targets = np.full((len(sequences), l_max), PAD, dtype=np.int64)
    for row, seq in enumerate(sequences):
        dec_input[row, : len(seq) - 1] = seq[:-1]
        targets[row, : len(seq) - 1] = seq[1:]
    return Batch(padded, lengths, dec_input, targets, targets != PAD, lang, list(texts))


def load_batch(
    records: Sequence[ManifestRecord],
    indices: Sequence[int],
    store: FrameStore,
    vocab: Vocabulary,
    dtype: np.dtype | type = np.float32,
) -> Batch:
    chosen = [records[i] for i in indices]
    langs = {r.lang_id for r in chosen}
    if len(langs) != 1:
        raise DataError(f"batch mixes languages {sorted(langs)}")
    return collate([store.get(r) for r in chosen], [r.text for r in chosen], langs.pop(), vocab, dtype)


def pad_tokens(sequences: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad, dtype=np.int64)
    for row, seq in enumerate(sequences):
        out[row, : len(seq)] = seq
    return out, out != pad


_DONE = object()


def prefetch(iterable: Iterable[T], depth: int = 2) -> Iterator[T]:
    """Produce items on one background thread through a bounded queue."""
    if depth < 1:
        raise ParameterError(f"prefetch depth must be >= 1, got {depth}")
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce() -> None:
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)

    thread = threading.Thread(target=produce, name="prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        thread.join(timeout=1.0)
