"""Numeric helpers shared by the tests: finite differences and toy configs."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from polyadapt.config import DataConfig, EvalConfig, ModelConfig, PretrainConfig, RunConfig, TrainSchedule
from polyadapt.data.vocab import vocabulary_size
from polyadapt.tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences over ``leaves``.

    ``loss_fn`` rebuilds the graph from the current leaf values on every call.
    """
    for leaf in leaves:
        leaf.grad = None
    backward(loss_fn(), leaves)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad
        numeric = np.zeros_like(leaf.data)
        for idx in np.ndindex(leaf.data.shape):
            orig = leaf.data[idx]
            leaf.data[idx] = orig + eps
            plus = float(loss_fn().data)
            leaf.data[idx] = orig - eps
            minus = float(loss_fn().data)
            leaf.data[idx] = orig
            numeric[idx] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def projected(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar ``Σ out ∘ w`` for a fixed random ``w``, so every output element matters."""
    from polyadapt.tensor import constant, mul, tensor_sum

    w = np.random.default_rng(seed).normal(size=out.shape)
    return tensor_sum(mul(out, constant(w, out.dtype)))


def toy_model_config(**overrides) -> ModelConfig:
    values = dict(
        d_model=8,
        n_heads=2,
        enc_layers=1,
        dec_layers=1,
        text_enc_layers=1,
        ffn_dim=16,
        vocab_size=vocabulary_size(2),
        num_languages=2,
        feature_dim=4,
        adapter_hidden=4,
        k_scale=1,
        k_bias=2,
        rel_window=4,
        dropout=0.0,
        label_smoothing=0.0,
    )
    values.update(overrides)
    return ModelConfig(**values)


def toy_data_config(**overrides) -> DataConfig:
    values = dict(
        tiers=["low", "very_low"],
        very_low_size=10,
        low_size=20,
        medium_size=40,
        feature_dim=4,
        emission_symbols=24,
        noise_std=0.0,
        lexicon_size=6,
        min_words=1,
        max_words=2,
        unlabeled_factor=1,
        text_factor=1,
        alphabet_max=10,
    )
    values.update(overrides)
    return DataConfig(**values)


def toy_run_config(**sections) -> RunConfig:
    return RunConfig(
        model=sections.get("model", toy_model_config()),
        data=sections.get("data", toy_data_config()),
        train=sections.get(
            "train",
            TrainSchedule(warmup_steps=5, total_updates=4, eval_interval=2, frame_budget=400, dev_max_utterances=2),
        ),
        pretrain=sections.get(
            "pretrain",
            PretrainConfig(
                codebook_size=8,
                code_dim=4,
                n_negatives=3,
                encoder_updates=2,
                decoder_updates=2,
                warmup_steps=2,
                frame_budget=400,
                sentences_per_batch=8,
            ),
        ),
        eval=sections.get("eval", EvalConfig(max_len=24)),
    )
