"""Encoder-decoder assembly for every rung of the ablation ladder.

Parameter names are the checkpoint contract::

    frontend.layers.<i>.{weight,bias}
    encoder.layers.<i>.{self_attn,ffn}.*      encoder.stacked.<i>.*   encoder.final_norm.*
    decoder.embed   decoder.layers.<i>.{self_attn,cross_attn,ffn}.*   decoder.final_norm.*   decoder.output.*

Language-specific and relative-position parameters carry ``.factors.``,
``.adapter.`` or ``.rel_pos.`` in their names; they never come from a
pretraining checkpoint.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Iterable, Literal

import numpy as np

from .config import AblationVariant, ModelConfig
from .errors import CheckpointError, ConfigError, DataError, UsageError
from .functional import dropout, gelu, pad_edge, sinusoidal_positions, softmax_cross_entropy
from .layers import Adapter, FeedForward, LayerNorm, Linear, MultiHeadAttention, RelativePosition
from .module import Module, assign
from .tensor import Parameter, Tensor, add, constant, gather, reshape, scale

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

logger = logging.getLogger(__name__)

Adaptation = Literal["none", "adapter", "factorized"]
ADDED_MARKERS = (".factors.", ".adapter.", ".rel_pos.")


def is_added(name: str) -> bool:
    """True for parameters that no pretraining checkpoint provides."""
    return any(marker in name for marker in ADDED_MARKERS)


def prime_strides(factor: int) -> list[int]:
    """Prime factorization of ``factor`` in ascending order (``[1]`` for 1)."""
    strides, n, p = [], factor, 2
    while n > 1:
        while n % p == 0:
            strides.append(p)
            n //= p
        p += 1
    return strides or [1]


def downsampled_length(length: int, factor: int) -> int:
    for s in prime_strides(factor):
        length = -(-length // s)
    return length


class ConvDownsampler(Module):
    """Stack of strided 1-D convolutions with kernel size equal to stride.

    Each layer edge-pads time to a multiple of its stride, folds ``stride``
    frames into one and applies a linear map; GELU sits between layers.
    """

    def __init__(self, rng: np.random.Generator, feature_dim: int, d_model: int, factor: int, dtype: Any = np.float32) -> None:
        self.strides = prime_strides(factor)
        self.factor = factor
        dims = [feature_dim] + [d_model] * len(self.strides)
        self.layers = [Linear(rng, s * dims[i], dims[i + 1], dtype=dtype) for i, s in enumerate(self.strides)]

    def __call__(self, frames: Tensor) -> Tensor:
        b, t, _ = frames.shape
        if t < self.factor:
            raise DataError(f"{t} frames cannot be downsampled by a factor of {self.factor}")
        x = frames
        for i, (stride, layer) in enumerate(zip(self.strides, self.layers)):
            if i:
                x = gelu(x)
            t_out = -(-x.shape[1] // stride)
            x = pad_edge(x, t_out * stride)
            x = layer(reshape(x, (b, t_out, stride * x.shape[2])))
        return x


def conv_downsample(frames: Tensor, frontend: ConvDownsampler) -> Tensor:
    return frontend(frames)


class AttentionBlock(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator | None,
        rel: RelativePosition | None = None,
        dtype: Any = np.float32,
    ) -> None:
        self.norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps, dtype)
        self.attn = MultiHeadAttention(cfg, rng, adapt_rng, rel, dtype)

    def __call__(self, x: Tensor, memory: Tensor | None, mask: np.ndarray | None, lang: int | None) -> Tensor:
        return self.attn(self.norm(x), memory, mask, lang)


class FeedForwardBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, adapt_rng: np.random.Generator | None, dtype: Any) -> None:
        self.norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps, dtype)
        self.net = FeedForward(cfg, rng, adapt_rng, dtype)

    def __call__(self, x: Tensor, lang: int | None) -> Tensor:
        return self.net(self.norm(x), lang)


def _adapter(cfg: ModelConfig, adaptation: Adaptation, adapt_rng: np.random.Generator, dtype: Any) -> Adapter | None:
    if adaptation != "adapter":
        return None
    return Adapter(adapt_rng, cfg.d_model, cfg.adapter_hidden, range(cfg.num_languages), eps=cfg.layer_norm_eps, dtype=dtype)


class EncoderLayer(Module):
    """Pre-norm self-attention and feed-forward, then the optional adapter."""

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator,
        adaptation: Adaptation,
        dropout_rng: np.random.Generator,
        rel_pos: bool = False,
        dtype: Any = np.float32,
    ) -> None:
        factor_rng = adapt_rng if adaptation == "factorized" else None
        rel = RelativePosition(adapt_rng, cfg.d_model, cfg.n_heads, cfg.rel_window, dtype) if rel_pos else None
        self.self_attn = AttentionBlock(cfg, rng, factor_rng, rel, dtype)
        self.ffn = FeedForwardBlock(cfg, rng, factor_rng, dtype)
        self.adapter = _adapter(cfg, adaptation, adapt_rng, dtype)
        self.p = cfg.dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x: Tensor, mask: np.ndarray | None, lang: int | None) -> Tensor:
        x = add(x, dropout(self.self_attn(x, None, mask, lang), self.p, self.dropout_rng, self.training))
        x = add(x, dropout(self.ffn(x, lang), self.p, self.dropout_rng, self.training))
        return self.adapter(x, lang) if self.adapter is not None else x


class DecoderLayer(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator,
        adaptation: Adaptation,
        dropout_rng: np.random.Generator,
        dtype: Any = np.float32,
    ) -> None:
        factor_rng = adapt_rng if adaptation == "factorized" else None
        self.self_attn = AttentionBlock(cfg, rng, factor_rng, dtype=dtype)
        self.cross_attn = AttentionBlock(cfg, rng, factor_rng, dtype=dtype)
        self.ffn = FeedForwardBlock(cfg, rng, factor_rng, dtype)
        self.adapter = _adapter(cfg, adaptation, adapt_rng, dtype)
        self.p = cfg.dropout
        self.dropout_rng = dropout_rng

    def __call__(
        self, x: Tensor, memory: Tensor, self_mask: np.ndarray, cross_mask: np.ndarray, lang: int | None
    ) -> Tensor:
        x = add(x, dropout(self.self_attn(x, None, self_mask, lang), self.p, self.dropout_rng, self.training))
        x = add(x, dropout(self.cross_attn(x, memory, cross_mask, lang), self.p, self.dropout_rng, self.training))
        x = add(x, dropout(self.ffn(x, lang), self.p, self.dropout_rng, self.training))
        return self.adapter(x, lang) if self.adapter is not None else x


def key_padding_mask(valid: np.ndarray, t_query: int) -> np.ndarray:
    """``[B×Tq×Tk]`` mask allowing every query to see the valid keys."""
    valid = np.asarray(valid, dtype=bool)
    return np.broadcast_to(valid[:, None, :], (valid.shape[0], t_query, valid.shape[1]))


def causal_mask(batch: int, length: int) -> np.ndarray:
    return np.broadcast_to(np.tril(np.ones((length, length), dtype=bool)), (batch, length, length))


def add_positions(x: Tensor) -> Tensor:
    return add(x, constant(sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)[None].repeat(x.shape[0], axis=0)))


class AcousticEncoder(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator,
        adaptation: Adaptation,
        dropout_rng: np.random.Generator,
        dtype: Any = np.float32,
    ) -> None:
        self.layers = [
            EncoderLayer(cfg, rng, adapt_rng, adaptation, dropout_rng, cfg.rel_pos, dtype) for _ in range(cfg.enc_layers)
        ]
        self.stacked: list[EncoderLayer] = []
        self.final_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps, dtype)
        self.rel_pos = cfg.rel_pos
        self.p = cfg.dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x: Tensor, valid: np.ndarray, lang: int | None, stacked: bool = True) -> Tensor:
        if not self.rel_pos:
            x = add_positions(x)
        x = dropout(x, self.p, self.dropout_rng, self.training)
        mask = key_padding_mask(valid, x.shape[1])
        for layer in self.layers:
            x = layer(x, mask, lang)
        if stacked:
            for layer in self.stacked:
                x = layer(x, mask, lang)
        return self.final_norm(x)


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dropout_rng: np.random.Generator, dtype: Any = np.float32) -> None:
        self.embed = Parameter(rng.normal(0.0, cfg.d_model ** -0.5, size=(cfg.vocab_size, cfg.d_model)), dtype=dtype)
        self.layers = [
            EncoderLayer(cfg, rng, rng, "none", dropout_rng, dtype=dtype) for _ in range(cfg.text_enc_layers)
        ]
        self.final_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps, dtype)
        self.d_model = cfg.d_model
        self.p = cfg.dropout
        self.dropout_rng = dropout_rng

    def __call__(self, tokens: np.ndarray, valid: np.ndarray) -> Tensor:
        x = add_positions(scale(gather(self.embed, tokens), math.sqrt(self.d_model)))
        x = dropout(x, self.p, self.dropout_rng, self.training)
        mask = key_padding_mask(valid, x.shape[1])
        for layer in self.layers:
            x = layer(x, mask, None)
        return self.final_norm(x)


class Decoder(Module):
    """Autoregressive decoder; positions are always sinusoidal."""

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator,
        adaptation: Adaptation,
        dropout_rng: np.random.Generator,
        dtype: Any = np.float32,
    ) -> None:
        self.embed = Parameter(rng.normal(0.0, cfg.d_model ** -0.5, size=(cfg.vocab_size, cfg.d_model)), dtype=dtype)
        self.layers = [DecoderLayer(cfg, rng, adapt_rng, adaptation, dropout_rng, dtype) for _ in range(cfg.dec_layers)]
        self.final_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps, dtype)
        self.output = Linear(rng, cfg.d_model, cfg.vocab_size, dtype=dtype)
        self.d_model = cfg.d_model
        self.p = cfg.dropout
        self.dropout_rng = dropout_rng

    def __call__(self, tokens: np.ndarray, memory: Tensor, memory_valid: np.ndarray, lang: int | None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        b, length = tokens.shape
        x = add_positions(scale(gather(self.embed, tokens), math.sqrt(self.d_model)))
        x = dropout(x, self.p, self.dropout_rng, self.training)
        self_mask = causal_mask(b, length)
        cross_mask = key_padding_mask(memory_valid, length)
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask, lang)
        return self.output(self.final_norm(x))


def sequence_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray, smoothing: float, reduction: str = "mean") -> Tensor:
    b, length, v = logits.shape
    return softmax_cross_entropy(reshape(logits, (b * length, v)), targets.reshape(-1), smoothing, mask.reshape(-1), reduction)


class SpeechRecognizer(Module):
    """Convolutional frontend, acoustic encoder and decoder."""

    kind = "recognizer"

    def __init__(
        self,
        cfg: ModelConfig,
        variant: AblationVariant = AblationVariant.TF,
        seed: int = 0,
        dtype: Any = np.float32,
    ) -> None:
        rng = np.random.default_rng([seed, 0])
        adapt_rng = np.random.default_rng([seed, 1])
        dropout_rng = np.random.default_rng([seed, 2])
        adaptation = variant.adaptation
        self.frontend = ConvDownsampler(rng, cfg.feature_dim, cfg.d_model, cfg.conv_downsample_factor, dtype)
        self.encoder = AcousticEncoder(cfg, rng, adapt_rng, adaptation, dropout_rng, dtype)
        self.decoder = Decoder(cfg, rng, adapt_rng, adaptation, dropout_rng, dtype)
        self.config = cfg
        self.variant = variant
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.dropout_rng = dropout_rng
        self.pretrained: set[str] = set()
        if cfg.stack_text_encoder:
            self.encoder.stacked = _stacked_layers(cfg, seed, adaptation, dropout_rng, dtype)

    def encode(self, frames: np.ndarray | Tensor, lengths: np.ndarray, lang: int | None) -> tuple[Tensor, np.ndarray]:
        x = frames if isinstance(frames, Tensor) else constant(frames, self.dtype)
        h = self.frontend(x)
        out_lengths = np.array([downsampled_length(int(n), self.config.conv_downsample_factor) for n in lengths])
        valid = np.arange(h.shape[1])[None, :] < out_lengths[:, None]
        return self.encoder(h, valid, lang), valid

    def __call__(self, frames: np.ndarray | Tensor, lengths: np.ndarray, dec_input: np.ndarray, lang: int | None) -> Tensor:
        memory, valid = self.encode(frames, lengths, lang)
        return self.decoder(dec_input, memory, valid, lang)

    def loss(self, batch: Any, smoothing: float | None = None, reduction: str = "mean") -> Tensor:
        """Label-smoothed cross-entropy of a collated batch."""
        smoothing = self.config.label_smoothing if smoothing is None else smoothing
        logits = self(batch.frames, batch.frame_lengths, batch.dec_input, batch.lang)
        return sequence_loss(logits, batch.targets, batch.target_mask, smoothing, reduction)


class TextSeq2Seq(Module):
    """Denoising text encoder-decoder whose decoder matches the recognizer's."""

    kind = "text"

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: Any = np.float32) -> None:
        rng = np.random.default_rng([seed, 10])
        dropout_rng = np.random.default_rng([seed, 12])
        self.text_encoder = TextEncoder(cfg, rng, dropout_rng, dtype)
        self.decoder = Decoder(cfg, rng, rng, "none", dropout_rng, dtype)
        self.config = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def __call__(self, source: np.ndarray, source_valid: np.ndarray, dec_input: np.ndarray) -> Tensor:
        memory = self.text_encoder(source, source_valid)
        return self.decoder(dec_input, memory, source_valid, None)


# ---------------------------------------------------------------------------
# Composition from pretraining checkpoints
# ---------------------------------------------------------------------------

def _check_compatible(cfg: ModelConfig, ckpt_cfg: ModelConfig, keys: Iterable[str], what: str) -> None:
    for key in keys:
        if getattr(cfg, key) != getattr(ckpt_cfg, key):
            raise ConfigError(f"{what} checkpoint has {key}={getattr(ckpt_cfg, key)}, model has {getattr(cfg, key)}")


def _load_prefixed(
    model: Module,
    tensors: dict[str, np.ndarray],
    mapping: dict[str, str],
    skip: tuple[str, ...] = (),
) -> set[str]:
    """Copy checkpoint tensors onto model names; ``mapping`` maps checkpoint prefix to model prefix."""
    params = dict(model.named_parameters())
    loaded: set[str] = set()
    for src_prefix, dst_prefix in mapping.items():
        wanted = {n for n in params if n.startswith(dst_prefix) and not is_added(n) and not any(s in n for s in skip)}
        available = {
            dst_prefix + n[len(src_prefix):]: n
            for n in tensors
            if n.startswith(src_prefix) and not any(s in n for s in skip)
        }
        missing = sorted(wanted - set(available))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor for {missing[0]} ({len(missing)} missing)")
        unexpected = sorted(set(available) - wanted)
        if unexpected:
            raise CheckpointError(f"checkpoint tensor {available[unexpected[0]]} has no counterpart in the model")
        for name, src in available.items():
            assign(params[name], tensors[src], src)
            loaded.add(name)
    return loaded


def _stacked_layers(
    cfg: ModelConfig, seed: int, adaptation: Adaptation, dropout_rng: np.random.Generator, dtype: Any
) -> list[EncoderLayer]:
    rng = np.random.default_rng([seed, 3])
    adapt_rng = np.random.default_rng([seed, 4])
    return [EncoderLayer(cfg, rng, adapt_rng, adaptation, dropout_rng, False, dtype) for _ in range(cfg.text_enc_layers)]


def _as_checkpoint(ckpt: "Checkpoint | str | Any") -> "Checkpoint":
    from .checkpoint import Checkpoint, read_checkpoint

    return ckpt if isinstance(ckpt, Checkpoint) else read_checkpoint(ckpt)


def stack_encoders(model: SpeechRecognizer, dec_ckpt: "Checkpoint") -> SpeechRecognizer:
    """Append the text-encoder layers of ``dec_ckpt`` after the acoustic encoder."""
    from .checkpoint import checkpoint_model_config

    ckpt_cfg = checkpoint_model_config(dec_ckpt)
    if ckpt_cfg.d_model != model.config.d_model:
        raise ConfigError(f"cannot stack a d_model={ckpt_cfg.d_model} text encoder on a d_model={model.config.d_model} encoder")
    stacked_cfg = model.config.model_copy(update={"text_enc_layers": ckpt_cfg.text_enc_layers, "stack_text_encoder": True})
    model.encoder.stacked = _stacked_layers(stacked_cfg, model.seed, model.variant.adaptation, model.dropout_rng, model.dtype)
    model.config = stacked_cfg
    model.pretrained |= _load_prefixed(model, dec_ckpt.tensors, {"text_encoder.layers.": "encoder.stacked."})
    logger.info("stacked text encoder", extra={"fields": {"layers": ckpt_cfg.text_enc_layers}})
    return model


def freeze_pretrained(model: SpeechRecognizer, variant: AblationVariant) -> SpeechRecognizer:
    if not variant.frozen:
        raise UsageError(f"variant {variant.label} does not freeze pretrained parameters")
    for name, param in model.named_parameters():
        if name in model.pretrained:
            param.requires_grad = False
    return model


def trainable_names(model: Module) -> list[str]:
    return [name for name, p in model.named_parameters() if p.requires_grad]


def build_model(
    cfg: ModelConfig,
    variant: AblationVariant | str,
    enc_ckpt: "Checkpoint | str | None" = None,
    dec_ckpt: "Checkpoint | str | None" = None,
    seed: int = 0,
    dtype: Any = np.float32,
) -> SpeechRecognizer:
    """Build the recognizer for one ladder rung, loading pretrained parts."""
    from .checkpoint import checkpoint_model_config

    variant = AblationVariant(variant)
    if variant.needs_encoder_checkpoint and enc_ckpt is None:
        raise ConfigError(f"variant {variant.label} requires an encoder checkpoint (--enc-ckpt)")
    if (variant.needs_decoder_checkpoint or cfg.stack_text_encoder) and dec_ckpt is None:
        raise ConfigError(f"variant {variant.label} requires a decoder checkpoint (--dec-ckpt)")
    base_cfg = cfg.model_copy(update={"stack_text_encoder": False})
    model = SpeechRecognizer(base_cfg, variant, seed, dtype)
    if variant.needs_encoder_checkpoint:
        enc = _as_checkpoint(enc_ckpt)
        _check_compatible(cfg, checkpoint_model_config(enc), ("d_model", "feature_dim", "conv_downsample_factor"), "encoder")
        model.pretrained |= _load_prefixed(model, enc.tensors, {"frontend.": "frontend.", "encoder.": "encoder."})
    dec = None
    if dec_ckpt is not None and (variant.needs_decoder_checkpoint or cfg.stack_text_encoder):
        dec = _as_checkpoint(dec_ckpt)
        _check_compatible(cfg, checkpoint_model_config(dec), ("d_model", "vocab_size"), "decoder")
    if variant.needs_decoder_checkpoint:
        model.pretrained |= _load_prefixed(model, dec.tensors, {"decoder.": "decoder."}, skip=(".cross_attn.",))
    if cfg.stack_text_encoder:
        stack_encoders(model, dec)
    if variant.frozen:
        freeze_pretrained(model, variant)
    logger.info(
        "model built",
        extra={
            "fields": {
                "variant": variant.label,
                "parameters": model.num_parameters(),
                "trainable": model.num_parameters(trainable_only=True),
                "pretrained_tensors": len(model.pretrained),
            }
        },
    )
    return model


@dataclass(frozen=True)
class ParameterInventory:
    variant: str
    total: int
    shared: int
    adapter_per_lang: int
    factorized_per_lang: int
    pretrained: int
    trainable: int


def _would_load(name: str, variant: AblationVariant, stacked: bool) -> bool:
    if is_added(name):
        return False
    if name.startswith("encoder.stacked."):
        return stacked
    if name.startswith(("frontend.", "encoder.")):
        return variant.needs_encoder_checkpoint
    if name.startswith("decoder."):
        return variant.needs_decoder_checkpoint and ".cross_attn." not in name
    return False


def parameter_inventory(cfg: ModelConfig, variant: AblationVariant | str, seed: int = 0) -> ParameterInventory:
    """Counts for a built model of ``variant`` without reading checkpoints.

    Pretrained counts follow what :func:`build_model` would load.
    """
    variant = AblationVariant(variant)
    model = SpeechRecognizer(cfg, variant, seed)
    params = dict(model.named_parameters())
    total = sum(p.data.size for p in params.values())
    adapters = sum(p.data.size for n, p in params.items() if ".adapter." in n)
    factors = sum(p.data.size for n, p in params.items() if ".factors." in n)
    pretrained = sum(p.data.size for n, p in params.items() if _would_load(n, variant, cfg.stack_text_encoder))
    return ParameterInventory(
        variant=variant.label,
        total=total,
        shared=total - adapters - factors,
        adapter_per_lang=adapters // cfg.num_languages,
        factorized_per_lang=factors // cfg.num_languages,
        pretrained=pretrained,
        trainable=total - pretrained if variant.frozen else total,
    )
