"""Masked contrastive acoustic pretraining and denoising text pretraining.

Both produce containers that :func:`polyadapt.model.build_model` consumes:
``frontend.*``/``encoder.*`` from the acoustic pretrainer and
``text_encoder.*``/``decoder.*`` from the text pretrainer.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from tenacity import retry, retry_if_result, stop_after_attempt

from .checkpoint import Checkpoint, save_checkpoint
from .config import ModelConfig, PretrainConfig, RunConfig
from .data.batching import pack_by_budget, pad_tokens
from .data.corpus import read_text_pool
from .data.manifest import FrameStore, manifest_path, read_manifest
from .data.vocab import EOS, MASK, Vocabulary, tokenize
from .errors import DataError, NumericalAbort, ParameterError
from .functional import l2_normalize, softmax_cross_entropy, straight_through_quantize, where_mask
from .layers import Linear
from .model import AcousticEncoder, ConvDownsampler, TextSeq2Seq, downsampled_length, sequence_loss
from .module import Module
from .tensor import Parameter, Tensor, add, backward, constant, gather, matmul, mul, reshape, scale, sub, tensor_sum, transpose
from .train import Adam, MetricsLog, clip_grad_norm, lr_at_step

logger = logging.getLogger(__name__)

MIN_MASKED, MAX_MASKED = 0.1, 0.9
MASK_ATTEMPTS = 20


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    mask: np.ndarray
    lengths: np.ndarray
    skipped: int = 0

    @property
    def masked_fraction(self) -> np.ndarray:
        return self.mask.sum(axis=1) / np.maximum(self.lengths, 1)


def span_mask(length: int, starts: Sequence[int], span_len: int, width: int | None = None) -> np.ndarray:
    """Boolean row of ``width`` with spans of ``span_len`` from each start, clipped at ``length``."""
    row = np.zeros(width or length, dtype=bool)
    for s in starts:
        row[s : min(s + span_len, length)] = True
    return row


def _sample_row(rng: np.random.Generator, length: int, p: float, span_len: int, width: int) -> np.ndarray | None:
    def out_of_range(row: np.ndarray) -> bool:
        return not MIN_MASKED <= row.sum() / length <= MAX_MASKED

    # None once every attempt misses the range
    @retry(
        retry=retry_if_result(out_of_range),
        stop=stop_after_attempt(MASK_ATTEMPTS),
        retry_error_callback=lambda state: None,
    )
    def attempt() -> np.ndarray:
        starts = np.flatnonzero(rng.random(length) < p)
        if starts.size == 0:
            starts = np.array([int(rng.integers(length))])
        return span_mask(length, starts.tolist(), span_len, width)

    return attempt()


def plan_masks(lengths: Sequence[int], p: float, span_len: int, seed: int | np.random.Generator = 0) -> MaskPlan:
    """Sample masked spans per utterance: starts at probability ``p``, at least one span.

    Plans whose masked fraction falls outside [0.1, 0.9] are re-sampled up to
    ``MASK_ATTEMPTS`` times. Utterances shorter than ``span_len``, and those
    with no in-range plan after the last attempt, are skipped (all positions
    unmasked) and counted.
    """
    if not 0.0 < p < 1.0:
        raise ParameterError(f"mask probability must be in (0, 1), got {p}")
    if span_len < 1:
        raise ParameterError(f"span length must be >= 1, got {span_len}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lengths = np.asarray(lengths, dtype=np.int64)
    width = int(lengths.max()) if lengths.size else 0
    mask = np.zeros((lengths.size, width), dtype=bool)
    skipped = 0
    for b, n in enumerate(lengths):
        if n < span_len:
            skipped += 1
            continue
        row = _sample_row(rng, int(n), p, span_len, width)
        if row is None:
            skipped += 1
            continue
        mask[b] = row
    if skipped:
        logger.warning("utterances without a usable mask plan skipped", extra={"fields": {"skipped": skipped}})
    return MaskPlan(mask, lengths, skipped)


# ---------------------------------------------------------------------------
# Contrastive objective
# ---------------------------------------------------------------------------

def sample_negatives(mask: np.ndarray, n_negatives: int, seed: int | np.random.Generator = 0) -> tuple[list[np.ndarray], int]:
    """Candidate positions per utterance, shape ``[P×(n+1)]`` with the positive first.

    Negatives are drawn without replacement from the other masked positions
    of the same utterance, ``n = min(n_negatives, P - 1)``. Utterances with a
    single masked position get an empty array and are counted.
    """
    if n_negatives < 1:
        raise ParameterError(f"n_negatives must be >= 1, got {n_negatives}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out, lonely = [], 0
    for row in np.asarray(mask, dtype=bool):
        positions = np.flatnonzero(row)
        if positions.size < 2:
            lonely += int(positions.size == 1)
            out.append(np.zeros((0, 1), dtype=np.int64))
            continue
        n = min(n_negatives, positions.size - 1)
        cands = np.empty((positions.size, n + 1), dtype=np.int64)
        for i, pos in enumerate(positions):
            others = np.delete(positions, i)
            cands[i, 0] = pos
            cands[i, 1:] = rng.choice(others, size=n, replace=False)
        out.append(cands)
    return out, lonely


def contrastive_loss(
    context: Tensor,
    targets: Tensor,
    mask: MaskPlan | np.ndarray,
    n_negatives: int,
    temperature: float,
    seed: int | np.random.Generator = 0,
) -> Tensor:
    """InfoNCE over masked positions with cosine similarity divided by ``temperature``.

    Mean over every masked position that has at least one negative.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    mask_array = mask.mask if isinstance(mask, MaskPlan) else np.asarray(mask, dtype=bool)
    b, t, d = context.shape
    if targets.shape != context.shape or mask_array.shape != (b, t):
        raise ParameterError(f"context {context.shape}, targets {targets.shape} and mask {mask_array.shape} disagree")
    candidates, lonely = sample_negatives(mask_array, n_negatives, seed)
    if lonely:
        logger.warning("utterances with a single masked position contribute no loss", extra={"fields": {"count": lonely}})
    ctx = l2_normalize(reshape(context, (b * t, d)))
    tgt = l2_normalize(reshape(targets, (b * t, d)))
    total: Tensor | None = None
    count = 0
    for row, cands in enumerate(candidates):
        if not cands.size:
            continue
        p, k = cands.shape
        c = reshape(gather(ctx, row * t + cands[:, 0]), (p, 1, d))
        q = transpose(gather(tgt, row * t + cands), (0, 2, 1))
        logits = scale(reshape(matmul(c, q), (p, k)), 1.0 / temperature)
        term = softmax_cross_entropy(logits, np.zeros(p, dtype=np.int64), reduction="sum")
        total = term if total is None else add(total, term)
        count += p
    if total is None:
        return Tensor(np.zeros((), dtype=context.dtype), requires_grad=False)
    return scale(total, 1.0 / count)


class Codebook(Module):
    """Nearest-entry quantizer with a straight-through gradient."""

    def __init__(self, rng: np.random.Generator, size: int, dim: int, dtype: Any = np.float32) -> None:
        if size < 2:
            raise ParameterError(f"codebook needs at least 2 entries, got {size}")
        self.entries = Parameter(rng.normal(0.0, 1.0, size=(size, dim)), dtype=dtype)

    def quantize(self, z: Tensor) -> tuple[Tensor, np.ndarray]:
        return straight_through_quantize(z, self.entries)

    def commitment(self, z: Tensor, index: np.ndarray, valid: np.ndarray) -> Tensor:
        """Mean squared distance between valid inputs and their assigned entries."""
        flat = reshape(z, (-1, z.shape[-1]))
        rows = np.flatnonzero(np.asarray(valid, dtype=bool).reshape(-1))
        diff = sub(gather(flat, rows), gather(self.entries, index.reshape(-1)[rows]))
        return scale(tensor_sum(mul(diff, diff)), 1.0 / max(rows.size, 1))


class AcousticPretrainer(Module):
    """Frontend and encoder trained to identify quantized targets at masked positions."""

    kind = "acoustic"

    def __init__(self, cfg: ModelConfig, pcfg: PretrainConfig, seed: int = 0, dtype: Any = np.float32) -> None:
        cfg = cfg.model_copy(update={"rel_pos": False, "stack_text_encoder": False})
        rng = np.random.default_rng([seed, 20])
        dropout_rng = np.random.default_rng([seed, 22])
        self.frontend = ConvDownsampler(rng, cfg.feature_dim, cfg.d_model, cfg.conv_downsample_factor, dtype)
        self.encoder = AcousticEncoder(cfg, rng, rng, "none", dropout_rng, dtype)
        self.mask_embedding = Parameter(rng.uniform(0.0, 1.0, size=cfg.d_model), dtype=dtype)
        self.project_context = Linear(rng, cfg.d_model, pcfg.code_dim, dtype=dtype)
        self.project_targets = Linear(rng, cfg.d_model, pcfg.code_dim, dtype=dtype)
        self.codebook = Codebook(rng, pcfg.codebook_size, pcfg.code_dim, dtype)
        self.config = cfg
        self.pretrain_config = pcfg
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def loss(self, frames: np.ndarray, lengths: np.ndarray, rng: np.random.Generator) -> Tensor:
        pcfg = self.pretrain_config
        h = self.frontend(constant(frames, self.dtype))
        out_lengths = np.array([downsampled_length(int(n), self.config.conv_downsample_factor) for n in lengths])
        valid = np.arange(h.shape[1])[None, :] < out_lengths[:, None]
        z = self.project_targets(h)
        quantized, index = self.codebook.quantize(z)
        plan = plan_masks(out_lengths, pcfg.mask_prob, pcfg.mask_span, rng)
        context = self.project_context(self.encoder(where_mask(h, plan.mask, self.mask_embedding), valid, None))
        loss = contrastive_loss(context, quantized, plan, pcfg.n_negatives, pcfg.temperature, rng)
        if pcfg.commitment_weight > 0:
            loss = add(loss, scale(self.codebook.commitment(z, index, valid), pcfg.commitment_weight))
        return loss


def pretrainer_config(metadata: dict) -> PretrainConfig:
    return PretrainConfig(codebook_size=metadata.get("codebook_size", 64), code_dim=metadata.get("code_dim", 32))


def _train_loop(
    model: Module,
    batches: Sequence[Any],
    updates: int,
    pcfg: PretrainConfig,
    loss_fn,
    metrics: MetricsLog,
    log_every: int,
) -> list[float]:
    optimizer = Adam(model.trainable_parameters())
    rng = np.random.default_rng([pcfg.seed, 30])
    started = time.perf_counter()
    losses = []
    order = rng.permutation(len(batches))
    for update in range(1, updates + 1):
        if (update - 1) % len(batches) == 0 and update > 1:
            order = rng.permutation(len(batches))
        batch = batches[order[(update - 1) % len(batches)]]
        model.train()
        optimizer.zero_grad()
        loss = loss_fn(batch, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalAbort(update)
        touched = backward(loss, [p for _, p in optimizer.params])
        clip_grad_norm(optimizer.params, pcfg.clip_norm)
        lr = lr_at_step(update, pcfg)
        optimizer.step(lr, touched)
        losses.append(value)
        if update % log_every == 0 or update == 1 or update == updates:
            record = {"update": update, "lr": lr, "loss": value, "wall_seconds": round(time.perf_counter() - started, 3)}
            metrics.write(record)
            logger.info("pretraining progress", extra={"fields": record})
    optimizer.zero_grad()
    return losses


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    path: Path | None = None


def _snapshot(model: Module, metadata: dict) -> Checkpoint:
    return Checkpoint(model.kind, model.state_dict(), model.config.model_dump(mode="json"), None, metadata)


def pretrain_encoder(
    unlabeled: Sequence[np.ndarray],
    cfg: ModelConfig,
    pcfg: PretrainConfig,
    out_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    updates: int | None = None,
    log_every: int = 50,
) -> PretrainResult:
    """Train the frontend, encoder and codebook on unlabeled frames."""
    if not unlabeled:
        raise DataError("unlabeled corpus is empty")
    model = AcousticPretrainer(cfg, pcfg, pcfg.seed)
    lengths = [f.shape[0] for f in unlabeled]
    budget = max(pcfg.frame_budget, max(lengths))
    packed, _ = pack_by_budget(lengths, budget)

    def make(indices: list[int]) -> tuple[np.ndarray, np.ndarray]:
        t_max = max(lengths[i] for i in indices)
        frames = np.stack([np.pad(unlabeled[i], ((0, t_max - lengths[i]), (0, 0)), mode="edge") for i in indices])
        return frames, np.array([lengths[i] for i in indices])

    batches = [make(idx) for idx in packed]
    losses = _train_loop(
        model,
        batches,
        updates or pcfg.encoder_updates,
        pcfg,
        lambda batch, rng: model.loss(batch[0], batch[1], rng),
        MetricsLog(metrics_path),
        log_every,
    )
    meta = {"seed": pcfg.seed, "codebook_size": pcfg.codebook_size, "code_dim": pcfg.code_dim, "final_loss": losses[-1]}
    path = save_checkpoint(model, out_path, meta) if out_path is not None else None
    return PretrainResult(_snapshot(model, meta), losses, path)


# ---------------------------------------------------------------------------
# Denoising text pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    deletion_prob: float = 0.1
    infill_prob: float = 0.1
    mean_span: float = 3.0

    @classmethod
    def from_config(cls, pcfg: PretrainConfig) -> "NoiseConfig":
        return cls(pcfg.deletion_prob, pcfg.infill_prob, pcfg.mean_span)


def corrupt_text(tokens: Sequence[int], noise: NoiseConfig, seed: int | np.random.Generator = 0) -> list[int]:
    """Span infilling (each span becomes one MASK) and token deletion.

    The first token is always kept so the result is never empty.
    """
    if not tokens:
        raise DataError("cannot corrupt an empty sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = [int(tokens[0])]
    i = 1
    while i < len(tokens):
        u_infill, u_delete = rng.random(2)
        if u_infill < noise.infill_prob:
            span = max(1, int(rng.poisson(noise.mean_span)))
            out.append(MASK)
            i += span
        elif u_delete < noise.deletion_prob:
            i += 1
        else:
            out.append(int(tokens[i]))
            i += 1
    return out


@dataclass
class TextBatch:
    source: np.ndarray
    source_valid: np.ndarray
    dec_input: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray


def make_text_batch(
    sentences: Sequence[tuple[str, int]],
    vocab: Vocabulary,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> TextBatch:
    """Source ``[tag] + corrupt(chars) + [EOS]``; target is the clean sentence."""
    sources, dec, tgt = [], [], []
    for text, lang in sentences:
        chars = tokenize(text, vocab)
        noisy = corrupt_text(chars, noise, rng) if chars else []
        sources.append([vocab.tag_id(lang)] + noisy + [EOS])
        dec.append([vocab.tag_id(lang)] + chars)
        tgt.append(chars + [EOS])
    source, source_valid = pad_tokens(sources)
    dec_input, _ = pad_tokens(dec)
    targets, target_mask = pad_tokens(tgt)
    return TextBatch(source, source_valid, dec_input, targets, target_mask)


def text_loss(model: TextSeq2Seq, batch: TextBatch, smoothing: float) -> Tensor:
    logits = model(batch.source, batch.source_valid, batch.dec_input)
    return sequence_loss(logits, batch.targets, batch.target_mask, smoothing)


def pretrain_decoder(
    text_corpus: Sequence[tuple[str, int]],
    cfg: ModelConfig,
    pcfg: PretrainConfig,
    out_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    updates: int | None = None,
    log_every: int = 50,
) -> PretrainResult:
    """Train a text encoder-decoder to reconstruct sentences from noisy copies."""
    if not text_corpus:
        raise DataError("text corpus is empty")
    model = TextSeq2Seq(cfg, pcfg.seed)
    vocab = Vocabulary(cfg.num_languages)
    noise = NoiseConfig.from_config(pcfg)
    n = pcfg.sentences_per_batch
    chunks = [list(text_corpus[i : i + n]) for i in range(0, len(text_corpus), n)]
    losses = _train_loop(
        model,
        chunks,
        updates or pcfg.decoder_updates,
        pcfg,
        lambda chunk, rng: text_loss(model, make_text_batch(chunk, vocab, noise, rng), cfg.label_smoothing),
        MetricsLog(metrics_path),
        log_every,
    )
    meta = {"seed": pcfg.seed, "final_loss": losses[-1]}
    path = save_checkpoint(model, out_path, meta) if out_path is not None else None
    return PretrainResult(_snapshot(model, meta), losses, path)


PRETRAIN_KINDS = ("encoder", "decoder")


def load_unlabeled(corpus: str | Path) -> list[np.ndarray]:
    store = FrameStore(corpus)
    return [store.get(r) for r in read_manifest(manifest_path(corpus, "unlabeled"))]


def run_pretraining(kind: str, cfg: RunConfig, corpus: str | Path, out_dir: str | Path) -> PretrainResult:
    """Pretrain one side from a generated corpus into ``out_dir/<kind>.ckpt``."""
    if kind not in PRETRAIN_KINDS:
        raise DataError(f"unknown pretraining kind {kind!r}; expected one of {PRETRAIN_KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("pretraining started", extra={"fields": {"kind": kind, "corpus": str(corpus)}})
    if kind == "encoder":
        return pretrain_encoder(load_unlabeled(corpus), cfg.model, cfg.pretrain, out / "encoder.ckpt", out / "encoder_metrics.jsonl")
    return pretrain_decoder(read_text_pool(corpus), cfg.model, cfg.pretrain, out / "decoder.ckpt", out / "decoder_metrics.jsonl")
