"""Layers shared by every model: linear maps with per-language adaptation,
serial adapters, multi-head attention (absolute or relative) and the
feed-forward block.

Language-specific parameters live in ``dict``s keyed by ``str(lang)`` so that
their names read ``<owner>.factors.<lang>.*`` or ``<owner>.adapter.languages.<lang>.*``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Literal, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DimensionError, LanguageError
from .functional import factor_sum, gelu, head_bias_add, layer_norm, masked_softmax, outer
from .module import Module, init_weight, ones, zeros
from .tensor import Parameter, Tensor, add, gather, matmul, mul, reshape, scale, transpose

logger = logging.getLogger(__name__)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype: Any = np.float32) -> None:
        self.gamma = ones(d, dtype)
        self.beta = zeros(d, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """``y = x·W + b`` with ``W`` stored input-major (``m×n``)."""

    def __init__(self, rng: np.random.Generator, m: int, n: int, bias: bool = True, dtype: Any = np.float32) -> None:
        self.weight = init_weight(rng, m, n, dtype)
        self.bias = zeros(n, dtype) if bias else None
        self.in_features = m
        self.out_features = n

    def effective_weight(self, lang: int | None = None) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor, lang: int | None = None) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear expects last dim {self.in_features}, got {x.shape}")
        y = matmul(x, self.effective_weight(lang))
        return y if self.bias is None else add(y, self.bias)


class LanguageFactors(Module):
    """Stacked rank-1 factors of one language: scale ``R_s·S_sᵀ`` and bias ``R_b·S_bᵀ``.

    The first scale pair is all ones, so the scale matrix starts as all ones.
    Every other pair has a random ``r`` and a zero ``s``: its outer product is
    exactly zero at initialization while ``s`` still receives gradient.
    """

    def __init__(self, rng: np.random.Generator, m: int, n: int, k_scale: int, k_bias: int, dtype: Any = np.float32) -> None:
        scale_r = np.zeros((k_scale, m))
        scale_s = np.zeros((k_scale, n))
        if k_scale:
            scale_r[0], scale_s[0] = 1.0, 1.0
            if k_scale > 1:
                scale_r[1:] = rng.normal(0.0, 1.0 / math.sqrt(k_scale), size=(k_scale - 1, m))
        self.scale_r = Parameter(scale_r, dtype=dtype)
        self.scale_s = Parameter(scale_s, dtype=dtype)
        self.bias_r = Parameter(rng.normal(0.0, 1.0 / math.sqrt(max(k_bias, 1)), size=(k_bias, m)), dtype=dtype)
        self.bias_s = zeros((k_bias, n), dtype)

    def scale_matrix(self) -> Tensor | None:
        return factor_sum(self.scale_r, self.scale_s) if self.scale_r.shape[0] else None

    def bias_matrix(self) -> Tensor | None:
        return factor_sum(self.bias_r, self.bias_s) if self.bias_r.shape[0] else None


class FactorizedAdaptiveLinear(Linear):
    """Shared linear map whose weight is rescaled and shifted per language.

    ``W(L) = W_S ∘ (Σ r sᵀ)_scale + (Σ r sᵀ)_bias`` and ``y = x·W(L) + b_S``.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator,
        m: int,
        n: int,
        languages: Sequence[int],
        k_scale: int,
        k_bias: int,
        bias: bool = True,
        dtype: Any = np.float32,
    ) -> None:
        super().__init__(rng, m, n, bias=bias, dtype=dtype)
        self.factors = {str(lang): LanguageFactors(adapt_rng, m, n, k_scale, k_bias, dtype) for lang in languages}

    def language(self, lang: int | None) -> LanguageFactors:
        try:
            return self.factors[str(lang)]
        except KeyError:
            raise LanguageError(f"language {lang} has no factors in this layer (registered: {sorted(self.factors)})") from None

    def effective_weight(self, lang: int | None = None) -> Tensor:
        factors = self.language(lang)
        weight: Tensor = self.weight
        scale_matrix = factors.scale_matrix()
        if scale_matrix is not None:
            weight = mul(weight, scale_matrix)
        bias_matrix = factors.bias_matrix()
        if bias_matrix is not None:
            weight = add(weight, bias_matrix)
        return weight


def materialize_factorized(factors: Sequence[tuple[Tensor, Tensor]], k: int) -> Tensor:
    """``Σᵢ rᵢ sᵢᵀ`` over ``k`` factor pairs, summed in index order."""
    if len(factors) != k or k < 1:
        raise DimensionError(f"expected {k} factor pairs, got {len(factors)}")
    m, n = factors[0][0].shape, factors[0][1].shape
    total: Tensor | None = None
    for i, (r, s) in enumerate(factors):
        if r.shape != m or s.shape != n:
            raise DimensionError(f"factor {i} has shapes {r.shape}/{s.shape}, expected {m}/{n}")
        term = outer(r, s)
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def adaptive_linear_forward(x: Tensor, layer: FactorizedAdaptiveLinear, lang: int) -> Tensor:
    return layer(x, lang)


def projection(
    cfg: ModelConfig,
    rng: np.random.Generator,
    adapt_rng: np.random.Generator | None,
    m: int,
    n: int,
    bias: bool = True,
    dtype: Any = np.float32,
) -> Linear:
    """Plain linear map, or a factorized adaptive one when ``adapt_rng`` is given."""
    if adapt_rng is None:
        return Linear(rng, m, n, bias=bias, dtype=dtype)
    return FactorizedAdaptiveLinear(
        rng, adapt_rng, m, n, range(cfg.num_languages), cfg.k_scale, cfg.k_bias, bias=bias, dtype=dtype
    )


class LanguageAdapter(Module):
    def __init__(self, rng: np.random.Generator, d: int, h: int, layer_norm: bool, eps: float, dtype: Any) -> None:
        self.norm = LayerNorm(d, eps, dtype) if layer_norm else None
        self.down = Linear(rng, d, h, dtype=dtype)
        self.up = Linear(rng, h, d, dtype=dtype)
        self.up.weight.data[...] = 0.0


class Adapter(Module):
    """Per-language bottleneck MLP with residual: ``x + up(act(down(LN(x))))``.

    ``up`` starts at zero so an inserted adapter leaves the layer output unchanged.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        d: int,
        h: int,
        languages: Sequence[int],
        activation: Literal["gelu", "identity"] = "gelu",
        layer_norm: bool = True,
        eps: float = 1e-5,
        dtype: Any = np.float32,
    ) -> None:
        self.languages = {str(lang): LanguageAdapter(rng, d, h, layer_norm, eps, dtype) for lang in languages}
        self.activation = activation
        self.d = d

    def __call__(self, x: Tensor, lang: int) -> Tensor:
        try:
            params = self.languages[str(lang)]
        except KeyError:
            raise LanguageError(f"language {lang} has no adapter (registered: {sorted(self.languages)})") from None
        if x.shape[-1] != self.d:
            raise DimensionError(f"adapter expects last dim {self.d}, got {x.shape}")
        h = params.norm(x) if params.norm is not None else x
        h = params.down(h)
        if self.activation == "gelu":
            h = gelu(h)
        return add(x, params.up(h))


def adapter_forward(x: Tensor, adapter: Adapter, lang: int) -> Tensor:
    return adapter(x, lang)


class RelativePosition(Module):
    """Clipped relative-distance embeddings plus content and position biases."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, window: int, dtype: Any = np.float32) -> None:
        self.embeddings = Parameter(rng.normal(0.0, 0.02, size=(2 * window + 1, d)), dtype=dtype)
        self.content_bias = zeros((n_heads, d // n_heads), dtype)
        self.position_bias = zeros((n_heads, d // n_heads), dtype)
        self.window = window

    def distance_index(self, t_q: int, t_k: int) -> np.ndarray:
        """Row into ``embeddings`` for every (query, key) pair: ``clip(j - i, -D, D) + D``."""
        rel = np.arange(t_k)[None, :] - np.arange(t_q)[:, None]
        return np.clip(rel, -self.window, self.window) + self.window


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention_logits(q: Tensor, k: Tensor, n_heads: int, rel: RelativePosition | None = None) -> Tensor:
    """Scaled logits ``[B×H×Tq×Tk]``.

    Relative form: ``((q+u)·kᵀ + (q+v)·R(j-i)ᵀ) / √dh`` where ``R`` is the
    clipped distance embedding split into heads.
    """
    d = q.shape[-1]
    if d % n_heads:
        raise ConfigError(f"model dim {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    qh = _split_heads(q, n_heads)
    kt = transpose(_split_heads(k, n_heads), (0, 1, 3, 2))
    if rel is None:
        return scale(matmul(qh, kt), 1.0 / math.sqrt(dh))
    b, t_q, t_k = q.shape[0], q.shape[1], k.shape[1]
    content = matmul(head_bias_add(qh, rel.content_bias), kt)
    qv = transpose(head_bias_add(qh, rel.position_bias), (1, 2, 0, 3))  # H×Tq×B×dh
    r = gather(rel.embeddings, rel.distance_index(t_q, t_k))  # Tq×Tk×d
    r = transpose(reshape(r, (t_q, t_k, n_heads, dh)), (2, 0, 3, 1))  # H×Tq×dh×Tk
    position = transpose(matmul(qv, r), (2, 0, 1, 3))
    return scale(add(content, position), 1.0 / math.sqrt(dh))


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    n_heads: int,
    rel: RelativePosition | None = None,
) -> Tensor:
    """Multi-head attention over already projected ``[B×T×d]`` inputs.

    ``mask`` is boolean, ``True`` where attention is allowed, shaped
    ``[B×Tq×Tk]`` or broadcastable to it. Rows with nothing allowed give zeros.
    """
    logits = attention_logits(q, k, n_heads, rel)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            mask = mask[:, None, :, :]
    probs = masked_softmax(logits, mask)
    return _merge_heads(matmul(probs, _split_heads(v, n_heads)))


class MultiHeadAttention(Module):
    """Q/K/V/O projections around :func:`scaled_dot_product_attention`.

    The key projection has no bias: a key bias shifts every logit of a row
    equally and cannot change the softmax.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        adapt_rng: np.random.Generator | None = None,
        rel: RelativePosition | None = None,
        dtype: Any = np.float32,
    ) -> None:
        d = cfg.d_model
        self.q = projection(cfg, rng, adapt_rng, d, d, dtype=dtype)
        self.k = projection(cfg, rng, adapt_rng, d, d, bias=False, dtype=dtype)
        self.v = projection(cfg, rng, adapt_rng, d, d, dtype=dtype)
        self.o = projection(cfg, rng, adapt_rng, d, d, dtype=dtype)
        self.rel_pos = rel
        self.n_heads = cfg.n_heads

    def __call__(self, x: Tensor, memory: Tensor | None, mask: np.ndarray | None, lang: int | None = None) -> Tensor:
        source = x if memory is None else memory
        out = scaled_dot_product_attention(
            self.q(x, lang), self.k(source, lang), self.v(source, lang), mask, self.n_heads, self.rel_pos
        )
        return self.o(out, lang)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    params: MultiHeadAttention,
    mode: Literal["absolute", "relative"] = "absolute",
    rel: RelativePosition | None = None,
    lang: int | None = None,
) -> Tensor:
    """Functional form taking separate query, key and value inputs."""
    if mode == "relative" and rel is None:
        rel = params.rel_pos
        if rel is None:
            raise ConfigError("relative attention requested without relative-position parameters")
    out = scaled_dot_product_attention(
        params.q(q, lang), params.k(k, lang), params.v(v, lang), mask, params.n_heads, rel if mode == "relative" else None
    )
    return params.o(out, lang)


class FeedForward(Module):
    def __init__(
        self, cfg: ModelConfig, rng: np.random.Generator, adapt_rng: np.random.Generator | None = None, dtype: Any = np.float32
    ) -> None:
        self.inner = projection(cfg, rng, adapt_rng, cfg.d_model, cfg.ffn_dim, dtype=dtype)
        self.outer = projection(cfg, rng, adapt_rng, cfg.ffn_dim, cfg.d_model, dtype=dtype)

    def __call__(self, x: Tensor, lang: int | None = None) -> Tensor:
        return self.outer(gelu(self.inner(x, lang)), lang)


# ---------------------------------------------------------------------------
# Per-language parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LanguageParamCounts:
    adapter_per_lang: int
    factorized_per_lang: int


def adapter_param_count(d: int, h: int, layer_norm: bool = True) -> int:
    return d * h + h * d + h + d + (2 * d if layer_norm else 0)


def factorized_param_count(shapes: Sequence[tuple[int, int]], k_scale: int, k_bias: int) -> int:
    return sum((k_scale + k_bias) * (m + n) for m, n in shapes)


def adapted_matrix_shapes(cfg: ModelConfig) -> list[tuple[int, int]]:
    """Every weight matrix wrapped by factorized adaptation in a built model."""
    d, f = cfg.d_model, cfg.ffn_dim
    attention = [(d, d)] * 4
    ffn = [(d, f), (f, d)]
    enc_layers = cfg.enc_layers + (cfg.text_enc_layers if cfg.stack_text_encoder else 0)
    return (attention + ffn) * enc_layers + (attention * 2 + ffn) * cfg.dec_layers


def count_language_params(cfg: ModelConfig) -> LanguageParamCounts:
    """Closed-form per-language parameter counts of both adaptation kinds."""
    layers = cfg.enc_layers + cfg.dec_layers + (cfg.text_enc_layers if cfg.stack_text_encoder else 0)
    return LanguageParamCounts(
        adapter_per_lang=layers * adapter_param_count(cfg.d_model, cfg.adapter_hidden),
        factorized_per_lang=factorized_param_count(adapted_matrix_shapes(cfg), cfg.k_scale, cfg.k_bias),
    )
