"""Synthetic tiered multilingual transduction corpus.

Every language owns a small alphabet and a lexicon of words without doubled
letters. A cipher maps its characters (and the word separator) injectively
onto a shared inventory of emission symbols; each symbol is rendered as 2-4
copies of a fixed random feature vector plus Gaussian noise. Collapsing
repeated nearest symbols and inverting the cipher recovers the text exactly
when there is no noise.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import orjson

from ..config import DataConfig
from ..errors import ConfigError, DataError
from .manifest import SPLITS, ManifestRecord, manifest_path, write_manifest, write_shard
from .vocab import LETTERS, language_tag

logger = logging.getLogger(__name__)

TIERS = ("very_low", "low", "medium")
SEPARATOR = " "


@dataclass
class LangSpec:
    lang_id: int
    tag: str
    tier: str
    alphabet: tuple[str, ...]
    cipher: dict[str, int]
    lexicon: tuple[str, ...]
    frame_repeat: tuple[int, int] = (2, 4)
    noise_std: float = 0.5
    char_scored: bool = False

    def __post_init__(self) -> None:
        if len(self.alphabet) < 8:
            raise ConfigError(f"language {self.tag}: alphabet of {len(self.alphabet)} letters, need at least 8")
        symbols = list(self.cipher.values())
        if len(set(symbols)) != len(symbols):
            raise ConfigError(f"language {self.tag}: cipher is not injective")

    def to_json(self) -> dict:
        data = asdict(self)
        data["alphabet"] = "".join(self.alphabet)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "LangSpec":
        return cls(
            lang_id=data["lang_id"],
            tag=data["tag"],
            tier=data["tier"],
            alphabet=tuple(data["alphabet"]),
            cipher=dict(data["cipher"]),
            lexicon=tuple(data["lexicon"]),
            frame_repeat=tuple(data["frame_repeat"]),
            noise_std=data["noise_std"],
            char_scored=data["char_scored"],
        )


@dataclass
class TierPlan:
    """Tier and utterance count per language."""

    tiers: dict[int, str]
    sizes: dict[int, int]

    @classmethod
    def from_config(cls, cfg: DataConfig) -> "TierPlan":
        return cls(
            tiers=dict(enumerate(cfg.tiers)),
            sizes={i: cfg.tier_size(t) for i, t in enumerate(cfg.tiers)},
        )

    def check(self) -> None:
        for lang, size in self.sizes.items():
            if size < 10:
                raise ConfigError(f"language {lang}: {size} utterances is too small to split")
        present = {}
        for lang, tier in self.tiers.items():
            present.setdefault(tier, []).append(self.sizes[lang])
        order = [t for t in TIERS if t in present]
        for lower, upper in zip(order, order[1:]):
            if max(present[lower]) >= min(present[upper]):
                raise ConfigError(f"tier {lower} must be strictly smaller than tier {upper}")


@dataclass
class CorpusSummary:
    root: Path
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    tiers: dict[str, str] = field(default_factory=dict)

    def per_tier(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for tag, tier in self.tiers.items():
            bucket = out.setdefault(tier, {})
            for split, n in self.counts[tag].items():
                bucket[split] = bucket.get(split, 0) + n
        return out


def emission_matrix(cfg: DataConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    return rng.normal(0.0, 1.0, size=(cfg.emission_symbols, cfg.feature_dim)).astype(np.float32)


def _word(rng: np.random.Generator, alphabet: Sequence[str]) -> str:
    length = int(rng.integers(2, 8))
    chars = [alphabet[int(rng.integers(len(alphabet)))]]
    while len(chars) < length:
        c = alphabet[int(rng.integers(len(alphabet)))]
        if c != chars[-1]:
            chars.append(c)
    return "".join(chars)


def make_languages(cfg: DataConfig, seed: int | None = None) -> list[LangSpec]:
    """Draw alphabets, ciphers and lexicons; distinct languages get distinct ciphers."""
    seed = cfg.seed if seed is None else seed
    if cfg.alphabet_max + 1 > cfg.emission_symbols:
        raise ConfigError(f"{cfg.emission_symbols} emission symbols cannot encode {cfg.alphabet_max} letters plus a separator")
    char_scored = set(cfg.char_scored)
    langs: list[LangSpec] = []
    seen: set[tuple] = set()
    for i, tier in enumerate(cfg.tiers):
        rng = np.random.default_rng([seed, i, 0])
        while True:
            size = int(rng.integers(cfg.alphabet_min, cfg.alphabet_max + 1))
            alphabet = tuple(sorted(rng.choice(LETTERS, size=size, replace=False).tolist()))
            symbols = rng.choice(cfg.emission_symbols, size=size + 1, replace=False)
            cipher = {c: int(s) for c, s in zip((SEPARATOR,) + alphabet, symbols)}
            key = tuple(sorted(cipher.items()))
            if key not in seen:
                seen.add(key)
                break
        lexicon: list[str] = []
        while len(lexicon) < cfg.lexicon_size:
            w = _word(rng, alphabet)
            if w not in lexicon:
                lexicon.append(w)
        tag = language_tag(i)
        langs.append(
            LangSpec(
                lang_id=i,
                tag=tag,
                tier=tier,
                alphabet=alphabet,
                cipher=cipher,
                lexicon=tuple(lexicon),
                frame_repeat=(cfg.frame_repeat_min, cfg.frame_repeat_max),
                noise_std=cfg.noise_std,
                char_scored=tag in char_scored,
            )
        )
    return langs


def sample_sentence(rng: np.random.Generator, lang: LangSpec, min_words: int, max_words: int) -> str:
    n = int(rng.integers(min_words, max_words + 1))
    return SEPARATOR.join(lang.lexicon[int(rng.integers(len(lang.lexicon)))] for _ in range(n))


def render_frames(rng: np.random.Generator, text: str, lang: LangSpec, emission: np.ndarray) -> np.ndarray:
    """Frames of ``text``: each character's emission row repeated 2-4 times, plus noise."""
    try:
        symbols = [lang.cipher[c] for c in text]
    except KeyError as exc:
        raise DataError(f"character {exc.args[0]!r} is outside the alphabet of {lang.tag}") from None
    lo, hi = lang.frame_repeat
    repeats = rng.integers(lo, hi + 1, size=len(symbols))
    rows = np.repeat(np.asarray(symbols, dtype=np.int64), repeats)
    frames = emission[rows]
    if lang.noise_std > 0:
        frames = frames + rng.normal(0.0, lang.noise_std, size=frames.shape)
    return frames.astype(np.float32)


def decode_frames(frames: np.ndarray, lang: LangSpec, emission: np.ndarray) -> str:
    """Oracle inverse: nearest symbol per frame, collapse repeats, invert the cipher."""
    dist = ((frames[:, None, :] - emission[None, :, :]) ** 2).sum(axis=-1)
    nearest = dist.argmin(axis=1)
    collapsed = [int(s) for i, s in enumerate(nearest) if i == 0 or s != nearest[i - 1]]
    inverse = {s: c for c, s in lang.cipher.items()}
    return "".join(inverse.get(s, "?") for s in collapsed)


def split_sizes(n: int, cfg: DataConfig) -> dict[str, int]:
    train = int(np.floor(n * cfg.train_frac))
    dev = int(np.floor(n * cfg.dev_frac))
    return {"train": train, "dev": dev, "test": n - train - dev}


def generate_corpus(
    langs: Sequence[LangSpec],
    plan: TierPlan,
    cfg: DataConfig,
    out_dir: str | Path,
    seed: int | None = None,
) -> CorpusSummary:
    """Write manifests, frame shards, the unlabeled pool and the text pool under ``out_dir``."""
    seed = cfg.seed if seed is None else seed
    plan.check()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    emission = emission_matrix(cfg, seed)
    records: dict[str, list[ManifestRecord]] = {s: [] for s in (*SPLITS, "unlabeled")}
    text_lines: list[str] = []
    summary = CorpusSummary(root=root)
    for lang in langs:
        n = plan.sizes[lang.lang_id]
        sizes = split_sizes(n, cfg)
        rng = np.random.default_rng([seed, lang.lang_id, 1])
        texts = [sample_sentence(rng, lang, cfg.min_words, cfg.max_words) for _ in range(n)]
        offset = 0
        for split in SPLITS:
            chunk = texts[offset : offset + sizes[split]]
            offset += sizes[split]
            frames = [render_frames(rng, t, lang, emission) for t in chunk]
            paths = write_shard(root, f"frames/{split}/{lang.tag}.bin", frames)
            records[split].extend(ManifestRecord(p, t, lang.tag, f.shape[0]) for p, t, f in zip(paths, chunk, frames))
        unlabeled_rng = np.random.default_rng([seed, lang.lang_id, 2])
        pool = [
            render_frames(unlabeled_rng, sample_sentence(unlabeled_rng, lang, cfg.min_words, cfg.max_words), lang, emission)
            for _ in range(n * cfg.unlabeled_factor)
        ]
        paths = write_shard(root, f"frames/unlabeled/{lang.tag}.bin", pool)
        records["unlabeled"].extend(ManifestRecord(p, "", lang.tag, f.shape[0]) for p, f in zip(paths, pool))
        text_rng = np.random.default_rng([seed, lang.lang_id, 3])
        text_lines.extend(
            f"{sample_sentence(text_rng, lang, cfg.min_words, cfg.max_words)}\t{lang.tag}" for _ in range(n * cfg.text_factor)
        )
        summary.counts[lang.tag] = {**sizes, "unlabeled": len(pool), "text": n * cfg.text_factor}
        summary.tiers[lang.tag] = lang.tier
        logger.info("language generated", extra={"fields": {"lang": lang.tag, "tier": lang.tier, **summary.counts[lang.tag]}})
    for split, recs in records.items():
        write_manifest(manifest_path(root, split), recs)
    (root / "text.tsv").write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    (root / "languages.json").write_bytes(
        orjson.dumps([lang.to_json() for lang in langs], option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    )
    return summary


def load_languages(root: str | Path) -> list[LangSpec]:
    path = Path(root) / "languages.json"
    if not path.is_file():
        raise DataError(f"no corpus at {root} (languages.json missing)")
    return [LangSpec.from_json(d) for d in orjson.loads(path.read_bytes())]


def read_text_pool(root: str | Path) -> list[tuple[str, int]]:
    path = Path(root) / "text.tsv"
    if not path.is_file():
        raise DataError(f"text pool missing: {path}")
    pool = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line:
            text, tag = line.split("\t")
            pool.append((text, int(tag.lstrip("l"))))
    return pool
