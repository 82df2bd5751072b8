"""Greedy and beam-search decoding from a language tag to the end token."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .data.vocab import EOS
from .errors import ParameterError
from .tensor import Tensor, no_grad

# Maps prefixes ``[K×L]`` (each starting with the language tag) to next-token
# log-probabilities ``[K×V]``; prefixes are rows of the same utterance or of a batch.
Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool

    def normalized(self, exponent: float) -> float:
        return self.score / max(len(self.tokens), 1) ** exponent


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def greedy_search(scorer: Scorer, starts: np.ndarray, max_len: int) -> list[Hypothesis]:
    """Argmax decoding of a batch; the returned tokens exclude the start tag and EOS."""
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    prefix = np.asarray(starts, dtype=np.int64).reshape(-1, 1)
    n = prefix.shape[0]
    done = np.zeros(n, dtype=bool)
    scores = np.zeros(n)
    for _ in range(max_len):
        logp = scorer(prefix)
        nxt = logp.argmax(axis=-1)
        scores += np.where(done, 0.0, logp[np.arange(n), nxt])
        nxt = np.where(done, EOS, nxt)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in range(n):
        generated = prefix[row, 1:].tolist()
        finished = EOS in generated
        tokens = generated[: generated.index(EOS)] if finished else generated
        out.append(Hypothesis(tokens, float(scores[row]), finished))
    return out


def beam_search(scorer: Scorer, start: int, beam_width: int, max_len: int, length_exponent: float = 1.0) -> Hypothesis:
    """Best finished hypothesis by ``log p / length**exponent`` (length counts EOS).

    Candidates are ranked with a stable sort, so width 1 reproduces greedy.
    """
    if beam_width < 1 or max_len < 1:
        raise ParameterError(f"beam_width and max_len must be >= 1, got {beam_width}, {max_len}")
    alive: list[Hypothesis] = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefix = np.array([[start] + h.tokens for h in alive], dtype=np.int64)
        logp = scorer(prefix)
        k = min(beam_width, logp.shape[1])
        candidates: list[tuple[float, int, int]] = []
        for b, h in enumerate(alive):
            top = np.argsort(-logp[b], kind="stable")[:k]
            candidates.extend((h.score + float(logp[b, t]), b, int(t)) for t in top)
        order = sorted(range(len(candidates)), key=lambda i: -candidates[i][0])
        next_alive: list[Hypothesis] = []
        for i in order[: beam_width - len(finished)]:
            score, b, t = candidates[i]
            if t == EOS:
                finished.append(Hypothesis(alive[b].tokens + [EOS], score, True))
            else:
                next_alive.append(Hypothesis(alive[b].tokens + [t], score, False))
        alive = next_alive
        if len(finished) >= beam_width or not alive:
            break
    pool = finished or alive
    best = max(pool, key=lambda h: h.normalized(length_exponent))
    tokens = best.tokens[:-1] if best.finished else best.tokens
    return Hypothesis(tokens, best.score, best.finished)


def recognizer_scorer(model, frames: np.ndarray, lengths: np.ndarray, lang: int) -> Scorer:
    """Scorer for one or more utterances; prefix rows must match the utterance count
    or be any number of hypotheses of a single utterance."""
    model.eval()
    with no_grad():
        memory, valid = model.encode(frames, lengths, lang)

    def score(prefix: np.ndarray) -> np.ndarray:
        mem, val = memory, valid
        if prefix.shape[0] != memory.shape[0]:
            mem = Tensor(np.repeat(memory.data, prefix.shape[0], axis=0))
            val = np.repeat(valid, prefix.shape[0], axis=0)
        with no_grad():
            logits = model.decoder(prefix, mem, val, lang).data[:, -1, :]
        return log_softmax(logits.astype(np.float64))

    return score


def decode(
    model,
    frames: np.ndarray,
    lang: int,
    mode: Literal["greedy", "beam"] = "greedy",
    beam_width: int = 4,
    max_len: int = 96,
    length_exponent: float = 1.0,
    lengths: np.ndarray | None = None,
) -> list[Hypothesis]:
    """Decode a batch ``[B×T×F]`` (or one ``[T×F]`` utterance) of a single language."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if lengths is None:
        lengths = np.full(frames.shape[0], frames.shape[1], dtype=np.int64)
    from .data.vocab import Vocabulary

    tag = Vocabulary(model.config.num_languages).tag_id(lang)
    if mode == "greedy":
        scorer = recognizer_scorer(model, frames, lengths, lang)
        return greedy_search(scorer, np.full(frames.shape[0], tag), max_len)
    if mode != "beam":
        raise ParameterError(f"unknown decoding mode {mode!r}")
    out = []
    for b in range(frames.shape[0]):
        n = int(lengths[b])
        scorer = recognizer_scorer(model, frames[b : b + 1, :n], lengths[b : b + 1], lang)
        out.append(beam_search(scorer, tag, beam_width, max_len, length_exponent))
    return out
