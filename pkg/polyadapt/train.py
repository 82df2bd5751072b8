"""Supervised fine-tuning: optimizer, schedule, accumulation and the fit loop."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Iterator, Sequence

import numpy as np
import orjson

from .checkpoint import save_checkpoint
from .config import PretrainConfig, RunConfig, TrainSchedule
from .data.batching import Batch, load_batch, make_batches, prefetch
from .data.corpus import load_languages
from .data.manifest import FrameStore, ManifestRecord, manifest_path, read_manifest
from .data.vocab import Vocabulary
from .errors import DataError, NumericalAbort, UsageError
from .evaluation import evaluate_records
from .model import SpeechRecognizer, trainable_names
from .module import Module
from .tensor import Parameter, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def lr_at_step(step: int, schedule: TrainSchedule | PretrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse square-root decay."""
    if step < 1:
        raise UsageError(f"learning rate is defined from step 1, got {step}")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


class Adam:
    """Adaptive moments with bias correction over the trainable parameters.

    Only parameters in ``touched`` are updated; the rest keep their value
    and moments even when they hold a (zero) gradient.
    """

    def __init__(self, params: Iterable[tuple[str, Parameter]], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
        self.params = [(n, p) for n, p in params if p.requires_grad]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.steps = {n: 0 for n, _ in self.params}
        self.step_count = 0

    @classmethod
    def for_model(cls, model: Module, schedule: TrainSchedule) -> "Adam":
        return cls(model.trainable_parameters(), schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float, touched: Collection[Tensor]) -> None:
        self.step_count += 1
        for name, p in self.params:
            if p not in touched:
                continue
            g = p.grad
            t = self.steps[name] = self.steps[name] + 1
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def global_grad_norm(params: Sequence[tuple[str, Parameter]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[tuple[str, Parameter]], max_norm: float) -> float:
    """Rescale gradients so their global norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for _, p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float
    tokens: int


def accumulate(steps: Iterable[Batch], factor: int) -> Iterator[list[Batch]]:
    """Group consecutive micro-batches into updates of ``factor``; a short tail is dropped."""
    if factor < 1:
        raise UsageError(f"accumulation factor must be >= 1, got {factor}")
    group: list[Batch] = []
    for batch in steps:
        group.append(batch)
        if len(group) == factor:
            yield group
            group = []


def apply_update(
    model: SpeechRecognizer,
    micro_batches: Sequence[Batch],
    optimizer: Adam,
    schedule: TrainSchedule,
    smoothing: float | None = None,
) -> StepResult:
    """One optimizer update from summed micro-batch gradients normalized by their token count."""
    model.train()
    optimizer.zero_grad()
    step = optimizer.step_count + 1
    total_loss = 0.0
    tokens = sum(b.n_tokens for b in micro_batches)
    if tokens == 0:
        raise DataError("update has no target tokens")
    touched: set[Tensor] = set()
    params = [p for _, p in optimizer.params]
    for batch in micro_batches:
        loss = model.loss(batch, smoothing, reduction="sum")
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalAbort(step)
        total_loss += value
        touched |= backward(loss, params)
    for p in params:
        p.grad = (p.grad / p.grad.dtype.type(tokens)).astype(p.grad.dtype)
    norm = clip_grad_norm(optimizer.params, schedule.clip_norm)
    lr = lr_at_step(step, schedule)
    optimizer.step(lr, touched)
    optimizer.zero_grad()
    return StepResult(total_loss / tokens, norm, lr, tokens)


def train_step(model: SpeechRecognizer, batch: Batch, optimizer: Adam, schedule: TrainSchedule, smoothing: float | None = None) -> StepResult:
    return apply_update(model, [batch], optimizer, schedule, smoothing)


def dev_loss(model: SpeechRecognizer, batches: Iterable[Batch]) -> float:
    """Teacher-forced token-level cross-entropy without smoothing."""
    model.eval()
    total, tokens = 0.0, 0
    with no_grad():
        for batch in batches:
            total += float(model.loss(batch, smoothing=0.0, reduction="sum").data)
            tokens += batch.n_tokens
    return total / max(tokens, 1)


def cap_per_language(records: Sequence[ManifestRecord], limit: int) -> list[ManifestRecord]:
    if limit <= 0:
        return list(records)
    seen: dict[str, int] = {}
    out = []
    for r in records:
        if seen.get(r.lang, 0) < limit:
            out.append(r)
            seen[r.lang] = seen.get(r.lang, 0) + 1
    return out


class MetricsLog:
    """Line-delimited JSON records, one per evaluation."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(b"")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")


@dataclass
class FitResult:
    checkpoint: Path | None
    best_dev_wer: float
    best_update: int
    best_dev_loss: float
    best_dev_loss_update: int
    metrics: list[dict] = field(default_factory=list)
    skipped: int = 0


def fit(
    model: SpeechRecognizer,
    corpus: str | Path,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train for ``total_updates``, evaluating the dev split every ``eval_interval``.

    The best dev-WER parameters are saved as ``best.ckpt``; the update with the
    lowest dev loss is recorded in its metadata.
    """
    schedule = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(model.config.num_languages)
    langs = load_languages(corpus)
    store = FrameStore(corpus)
    train_records = read_manifest(manifest_path(corpus, "train"))
    if not train_records:
        raise DataError(f"empty train manifest in {corpus}")
    dev_records = cap_per_language(read_manifest(manifest_path(corpus, "dev")), schedule.dev_max_utterances)
    dev_budget = max(schedule.frame_budget, max((r.n_frames for r in dev_records), default=1))
    dev_batches = [load_batch(dev_records, idx, store, vocab, model.dtype) for idx in make_batches(dev_records, dev_budget)]
    optimizer = Adam.for_model(model, schedule)
    metrics = MetricsLog(out / "metrics.jsonl" if out is not None else None)
    logger.info(
        "fit started",
        extra={"fields": {"variant": model.variant.label, "trainable": len(trainable_names(model)), "updates": schedule.total_updates}},
    )

    def micro_batches() -> Iterator[Batch]:
        epoch = 0
        while True:
            stream = make_batches(train_records, schedule.frame_budget, homogeneous_lang=True, seed=schedule.seed + epoch)
            if not len(stream):
                raise DataError("no train utterance fits the frame budget")
            for idx in stream:
                yield load_batch(train_records, idx, store, vocab, model.dtype)
            epoch += 1

    started = time.perf_counter()
    best_wer, best_update, best_state = math.inf, 0, None
    best_loss, best_loss_update = math.inf, 0
    window: list[float] = []
    updates = accumulate(prefetch(micro_batches(), depth=2), schedule.accumulation_factor)
    for update in range(1, schedule.total_updates + 1):
        result = apply_update(model, next(updates), optimizer, schedule)
        window.append(result.loss)
        if update % schedule.eval_interval and update != schedule.total_updates:
            continue
        loss = dev_loss(model, dev_batches)
        evaluation = evaluate_records(model, dev_records, store, langs, cfg.eval.model_copy(update={"mode": "greedy"}), dev_budget)
        record = {
            "update": update,
            "lr": result.lr,
            "train_loss": float(np.mean(window)),
            "dev_loss": loss,
            "dev_wer": evaluation.report.overall,
            "wall_seconds": round(time.perf_counter() - started, 3),
        }
        metrics.write(record)
        window = []
        logger.info("dev evaluation", extra={"fields": record})
        if loss < best_loss:
            best_loss, best_loss_update = loss, update
        if evaluation.report.overall < best_wer:
            best_wer, best_update, best_state = evaluation.report.overall, update, copy.deepcopy(model.state_dict())
    path = None
    if best_state is not None:
        model.load_state_dict(best_state)
    if out is not None:
        path = save_checkpoint(
            model,
            out / "best.ckpt",
            metadata={
                "dev_wer": best_wer,
                "best_update": best_update,
                "best_dev_loss": best_loss,
                "best_dev_loss_update": best_loss_update,
                "dev_max_utterances": schedule.dev_max_utterances,
            },
        )
    return FitResult(path, best_wer, best_update, best_loss, best_loss_update, metrics.records)
