"""Configuration management using pydantic.

Two layers: :class:`Settings` holds process-level knobs read from the
environment, and :class:`RunConfig` is the experiment description stored as a
``key = value`` file with one ``[section]`` per concern.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .data.vocab import vocabulary_size
from .errors import ConfigError


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    LOG_DIR: str = "logs"
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    WORKERS: int = 1

    model_config = SettingsConfigDict(env_prefix="POLYADAPT_", env_file=".env", env_file_encoding="utf-8")

    @field_validator("LOG_LEVEL", mode="before")
    def _upper_level(cls, v: str) -> str:  # noqa: D401
        """Normalize level to uppercase."""
        return v.upper()

    @field_validator("WORKERS")
    def _positive_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("WORKERS must be at least 1")
        return v


@lru_cache
def get_settings() -> Settings:
    """Return cached settings instance."""
    return Settings()


class AblationVariant(str, Enum):
    """Rungs of the ablation ladder."""

    TF = "tf"
    W = "w"
    WM = "wm"
    WMA = "wma"
    WMF = "wmf"
    FWMA = "fwma"
    FWMF = "fwmf"

    @property
    def label(self) -> str:
        return self.value.upper()

    @property
    def needs_encoder_checkpoint(self) -> bool:
        return self is not AblationVariant.TF

    @property
    def needs_decoder_checkpoint(self) -> bool:
        return self not in (AblationVariant.TF, AblationVariant.W)

    @property
    def adaptation(self) -> Literal["none", "adapter", "factorized"]:
        if self in (AblationVariant.WMA, AblationVariant.FWMA):
            return "adapter"
        if self in (AblationVariant.WMF, AblationVariant.FWMF):
            return "factorized"
        return "none"

    @property
    def frozen(self) -> bool:
        return self in (AblationVariant.FWMA, AblationVariant.FWMF)


LADDER = tuple(AblationVariant)


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


StrList = Annotated[list[str], BeforeValidator(_split_list)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    """Architecture of the speech recognizer and of both pretraining models."""

    d_model: int = Field(64, gt=0, description="hidden size of every transformer stack")
    n_heads: int = Field(4, gt=0, description="attention heads; must divide d_model")
    enc_layers: int = Field(4, gt=0, description="acoustic encoder layers")
    dec_layers: int = Field(2, gt=0, description="decoder layers")
    text_enc_layers: int = Field(2, gt=0, description="text encoder layers of the denoising pretrainer")
    ffn_dim: int = Field(256, gt=0, description="feed-forward inner size")
    vocab_size: int = Field(vocabulary_size(8), gt=0, description="shared vocabulary size incl. tags")
    num_languages: int = Field(8, gt=0, description="languages with tag tokens and adaptive parameters")
    feature_dim: int = Field(16, gt=0, description="input frame feature dimension")
    adapter_hidden: int = Field(32, gt=0, description="adapter bottleneck size h")
    k_scale: int = Field(1, ge=0, description="rank-1 factors per scale matrix")
    k_bias: int = Field(8, ge=0, description="rank-1 factors per bias matrix")
    rel_pos: bool = Field(False, description="relative-position self-attention in the acoustic encoder")
    rel_window: int = Field(64, gt=0, description="relative distance clipping window D")
    stack_text_encoder: bool = Field(False, description="append pretrained text-encoder layers to the encoder")
    conv_downsample_factor: int = Field(2, gt=0, description="time reduction of the convolutional frontend")
    dropout: float = Field(0.1, ge=0.0, lt=1.0, description="dropout on embeddings and residual branches")
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0, description="label smoothing of the training loss")
    layer_norm_eps: float = Field(1e-5, gt=0.0, description="layer normalization epsilon")

    @model_validator(mode="after")
    def _heads_divide(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def large_scale(cls) -> "ModelConfig":
        """Large configuration: 24 encoder and 8 decoder layers, relative attention."""
        return cls(
            d_model=1024,
            n_heads=16,
            enc_layers=24,
            dec_layers=8,
            text_enc_layers=12,
            ffn_dim=4096,
            adapter_hidden=512,
            k_scale=1,
            k_bias=8,
            rel_pos=True,
        )


class DataConfig(_Section):
    """Synthetic tiered corpus."""

    tiers: StrList = Field(
        ["medium", "medium", "medium", "low", "low", "low", "very_low", "very_low"],
        description="tier of each language, in language order",
    )
    very_low_size: int = Field(100, description="utterances per very_low language")
    low_size: int = Field(1000, description="utterances per low language")
    medium_size: int = Field(10000, description="utterances per medium language")
    train_frac: float = Field(0.8, gt=0.0, lt=1.0, description="train split proportion")
    dev_frac: float = Field(0.1, gt=0.0, lt=1.0, description="dev split proportion")
    test_frac: float = Field(0.1, gt=0.0, lt=1.0, description="test split proportion")
    feature_dim: int = Field(16, gt=0, description="frame feature dimension F")
    emission_symbols: int = Field(48, gt=1, description="size of the shared emission inventory")
    noise_std: float = Field(0.5, ge=0.0, description="Gaussian frame noise")
    frame_repeat_min: int = Field(2, gt=0, description="minimum frames per emitted symbol")
    frame_repeat_max: int = Field(4, gt=0, description="maximum frames per emitted symbol")
    alphabet_min: int = Field(8, ge=8, description="minimum letters per language alphabet")
    alphabet_max: int = Field(16, ge=8, description="maximum letters per language alphabet")
    lexicon_size: int = Field(60, gt=0, description="words per language lexicon")
    min_words: int = Field(1, gt=0, description="minimum words per sentence")
    max_words: int = Field(4, gt=0, description="maximum words per sentence")
    unlabeled_factor: int = Field(10, ge=1, description="unlabeled frame pool size / labeled size")
    text_factor: int = Field(10, ge=1, description="text-only pool size / labeled size")
    char_scored: StrList = Field([], description="language tags scored in character units")
    seed: int = Field(0, description="corpus generation seed")

    @field_validator("tiers")
    def _known_tiers(cls, v: list[str]) -> list[str]:
        unknown = sorted(set(v) - {"very_low", "low", "medium"})
        if unknown:
            raise ValueError(f"unknown tiers {unknown}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "DataConfig":
        total = self.train_frac + self.dev_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if self.frame_repeat_min > self.frame_repeat_max:
            raise ValueError("frame_repeat_min exceeds frame_repeat_max")
        if self.alphabet_min > self.alphabet_max:
            raise ValueError("alphabet_min exceeds alphabet_max")
        if self.min_words > self.max_words:
            raise ValueError("min_words exceeds max_words")
        return self

    @property
    def num_languages(self) -> int:
        return len(self.tiers)

    def tier_size(self, tier: str) -> int:
        return {"very_low": self.very_low_size, "low": self.low_size, "medium": self.medium_size}[tier]


class TrainSchedule(_Section):
    """Supervised fine-tuning schedule."""

    peak_lr: float = Field(1e-3, gt=0.0, description="learning rate reached at warmup_steps")
    warmup_steps: int = Field(500, ge=1, description="linear warmup length in updates")
    total_updates: int = Field(5000, ge=1, description="optimizer updates per run")
    accumulation_factor: int = Field(1, ge=1, description="micro-batches per update")
    clip_norm: float = Field(1.0, gt=0.0, description="global gradient norm clip")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0, description="first-moment decay")
    adam_beta2: float = Field(0.98, ge=0.0, lt=1.0, description="second-moment decay")
    adam_eps: float = Field(1e-9, gt=0.0, description="adaptive-moment epsilon")
    frame_budget: int = Field(2000, gt=0, description="padded frames per micro-batch")
    eval_interval: int = Field(250, ge=1, description="updates between dev evaluations")
    dev_max_utterances: int = Field(0, ge=0, description="cap on dev utterances per evaluation (0 = all)")
    seed: int = Field(0, description="initialization, dropout and shuffling seed")


class PretrainConfig(_Section):
    """Desk-scale pretraining defaults."""

    mask_prob: float = Field(0.15, gt=0.0, lt=1.0, description="span start probability p")
    mask_span: int = Field(3, ge=1, description="masked span length")
    n_negatives: int = Field(10, ge=1, description="contrastive negatives per masked position")
    temperature: float = Field(0.1, gt=0.0, description="cosine similarity temperature")
    codebook_size: int = Field(64, ge=2, description="quantizer codebook entries C")
    code_dim: int = Field(32, gt=0, description="quantizer code dimension")
    commitment_weight: float = Field(0.1, ge=0.0, description="codebook-commitment auxiliary weight")
    deletion_prob: float = Field(0.1, ge=0.0, le=1.0, description="token deletion probability")
    infill_prob: float = Field(0.1, ge=0.0, le=1.0, description="span infilling start probability")
    mean_span: float = Field(3.0, gt=0.0, description="Poisson mean of infilled span lengths")
    encoder_updates: int = Field(2000, ge=1, description="acoustic pretraining updates")
    decoder_updates: int = Field(2000, ge=1, description="denoising pretraining updates")
    peak_lr: float = Field(1e-3, gt=0.0, description="pretraining peak learning rate")
    warmup_steps: int = Field(200, ge=1, description="pretraining warmup")
    clip_norm: float = Field(1.0, gt=0.0, description="global gradient norm clip")
    frame_budget: int = Field(2000, gt=0, description="padded frames per acoustic batch")
    sentences_per_batch: int = Field(32, gt=0, description="sentences per denoising batch")
    seed: int = Field(0, description="pretraining seed")


class EvalConfig(_Section):
    """Decoding and scoring."""

    mode: Literal["greedy", "beam"] = Field("greedy", description="decoding strategy")
    beam_width: int = Field(4, ge=1, description="beam size for beam mode")
    max_len: int = Field(96, ge=1, description="maximum generated tokens")
    length_exponent: float = Field(1.0, ge=0.0, description="length normalization exponent")
    split: str = Field("test", description="manifest split to evaluate")


class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainSchedule = Field(default_factory=TrainSchedule)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _languages_agree(self) -> "RunConfig":
        if self.model.num_languages != self.data.num_languages:
            raise ValueError(
                f"model.num_languages={self.model.num_languages} but data.tiers lists {self.data.num_languages} languages"
            )
        expected = vocabulary_size(self.model.num_languages)
        if self.model.vocab_size != expected:
            raise ValueError(f"model.vocab_size={self.model.vocab_size}, vocabulary has {expected} tokens")
        if self.model.feature_dim != self.data.feature_dim:
            raise ValueError("model.feature_dim and data.feature_dim differ")
        return self


SECTIONS = ("model", "data", "train", "pretrain", "eval")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_run_config(text: str, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Parse ``[section]`` / ``key = value`` text; unknown sections or keys fail."""
    raw: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    section: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in raw:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of a section")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw[section]:
            raise ConfigError(f"line {lineno}: duplicate key {section}.{key}")
        raw[section][key] = value
    for dotted, value in (overrides or {}).items():
        name, _, key = dotted.partition(".")
        if name not in raw or not key:
            raise ConfigError(f"bad override {dotted!r}")
        raw[name][key] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def emit_run_config(cfg: RunConfig) -> str:
    lines: list[str] = []
    for name in SECTIONS:
        section: BaseModel = getattr(cfg, name)
        lines.append(f"[{name}]")
        for key, info in type(section).model_fields.items():
            if info.description:
                lines.append(f"# {info.description}")
            lines.append(f"{key} = {_format_value(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def load_run_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    if path is None:
        return parse_run_config("", overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_run_config(p.read_text(encoding="utf-8"), overrides)


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved.cfg"
    path.write_text(emit_run_config(cfg), encoding="utf-8")
    return path
