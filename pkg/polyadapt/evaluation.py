"""Edit distance, error rates and tier-averaged reports."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import EvalConfig
from .data.batching import load_batch, make_batches
from .data.corpus import TIERS, LangSpec, load_languages
from .data.manifest import FrameStore, ManifestRecord, manifest_path, read_manifest
from .data.vocab import Vocabulary, detokenize
from .decode import decode
from .errors import DataError, UndefinedMetricError
from .tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass
class EditCounts:
    dist: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.dist + other.dist,
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            raise UndefinedMetricError("error rate undefined for an empty reference")
        return 100.0 * self.dist / self.ref_len


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein distance split into substitutions, deletions and insertions."""
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    i, j, s, d, ins = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(dp[n, m]), s, d, ins, n)


def units(text: str, char_level: bool = False) -> list[str]:
    """Scoring units: whitespace-split words, or non-space characters."""
    return [c for c in text if not c.isspace()] if char_level else text.split()


def corpus_edits(refs: Sequence[str], hyps: Sequence[str], char_level: bool = False) -> EditCounts:
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = EditCounts()
    for ref, hyp in zip(refs, hyps):
        total = total + edit_distance(units(ref, char_level), units(hyp, char_level))
    return total


def wer(refs: Sequence[str], hyps: Sequence[str], char_level: bool = False) -> float:
    """Corpus error rate in percent: ``100 · Σ dist / Σ ref_len``; can exceed 100."""
    return corpus_edits(refs, hyps, char_level).rate


@dataclass
class EvalReport:
    per_lang: dict[str, float]
    tiers: dict[str, str]
    tier_avg: dict[str, float]
    overall: float
    variant: str = ""
    seed: int = 0
    edits: dict[str, EditCounts] = field(default_factory=dict)
    truncated: dict[str, int] = field(default_factory=dict)

    def rounded(self) -> dict[str, float]:
        out = {lang: round(v, 1) for lang, v in self.per_lang.items()}
        out.update({f"avg_{t}": round(v, 1) for t, v in self.tier_avg.items()})
        out["overall"] = round(self.overall, 1)
        return out


def tier_report(
    per_lang_wer: Mapping[str, float],
    tiers: Mapping[str, str],
    variant: str = "",
    seed: int = 0,
    expected_tiers: Sequence[str] = TIERS,
) -> EvalReport:
    """Unweighted means per tier and over all languages; full precision kept."""
    missing = sorted(set(per_lang_wer) - set(tiers))
    if missing:
        raise DataError(f"languages without a tier: {missing}")
    members: dict[str, list[float]] = {}
    for lang, value in per_lang_wer.items():
        members.setdefault(tiers[lang], []).append(float(value))
    tier_avg: dict[str, float] = {}
    for tier in list(expected_tiers) + sorted(set(members) - set(expected_tiers)):
        if not members.get(tier):
            logger.warning("empty tier omitted from report", extra={"fields": {"tier": tier}})
            continue
        tier_avg[tier] = float(np.mean(members[tier]))
    if not per_lang_wer:
        raise UndefinedMetricError("no languages to report")
    overall = float(np.mean([float(v) for v in per_lang_wer.values()]))
    return EvalReport(dict(per_lang_wer), {k: tiers[k] for k in per_lang_wer}, tier_avg, overall, variant, seed)


@dataclass
class SplitResult:
    report: EvalReport
    hypotheses: list[str]


def evaluate_records(
    model,
    records: Sequence[ManifestRecord],
    store: FrameStore,
    langs: Sequence[LangSpec],
    eval_cfg: EvalConfig,
    frame_budget: int,
    variant: str = "",
    seed: int = 0,
) -> SplitResult:
    """Decode every record and score it per language, merged in manifest order."""
    vocab = Vocabulary(model.config.num_languages)
    by_tag = {lang.tag: lang for lang in langs}
    hyps: list[str | None] = [None] * len(records)
    truncated: dict[str, int] = {}
    budget = max(frame_budget, max((r.n_frames for r in records), default=1))
    model.eval()
    with no_grad():
        for indices in make_batches(records, budget, homogeneous_lang=True, seed=0):
            batch = load_batch(records, indices, store, vocab, model.dtype)
            outs = decode(
                model,
                batch.frames,
                batch.lang,
                eval_cfg.mode,
                eval_cfg.beam_width,
                eval_cfg.max_len,
                eval_cfg.length_exponent,
                lengths=batch.frame_lengths,
            )
            for i, hyp in zip(indices, outs):
                hyps[i] = detokenize(hyp.tokens, vocab)
                if not hyp.finished:
                    truncated[records[i].lang] = truncated.get(records[i].lang, 0) + 1
    per_lang: dict[str, float] = {}
    edits: dict[str, EditCounts] = {}
    for tag in sorted({r.lang for r in records}, key=lambda t: int(t.lstrip("l"))):
        idx = [i for i, r in enumerate(records) if r.lang == tag]
        char_level = by_tag[tag].char_scored if tag in by_tag else False
        counts = corpus_edits([records[i].text for i in idx], [hyps[i] or "" for i in idx], char_level)
        edits[tag] = counts
        per_lang[tag] = counts.rate
    if sum(truncated.values()):
        logger.warning("decodes truncated at max_len", extra={"fields": {"truncated": truncated}})
    report = tier_report(per_lang, {lang.tag: lang.tier for lang in langs}, variant, seed)
    report.edits = edits
    report.truncated = {tag: truncated.get(tag, 0) for tag in per_lang}
    return SplitResult(report, [h or "" for h in hyps])


def evaluate_split(
    model,
    corpus: str | Path,
    eval_cfg: EvalConfig,
    frame_budget: int,
    variant: str = "",
    seed: int = 0,
) -> SplitResult:
    records = read_manifest(manifest_path(corpus, eval_cfg.split))
    if not records:
        raise DataError(f"split {eval_cfg.split!r} of {corpus} is empty")
    return evaluate_records(model, records, FrameStore(corpus), load_languages(corpus), eval_cfg, frame_budget, variant, seed)
