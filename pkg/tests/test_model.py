import re

import numpy as np
import pytest
from helpers import toy_model_config, toy_run_config

from polyadapt.checkpoint import Checkpoint
from polyadapt.config import AblationVariant, TrainSchedule
from polyadapt.data.batching import collate
from polyadapt.data.vocab import Vocabulary
from polyadapt.errors import CheckpointError, ConfigError, DataError, LanguageError
from polyadapt.layers import count_language_params
from polyadapt.model import (
    ConvDownsampler,
    SpeechRecognizer,
    TextSeq2Seq,
    build_model,
    conv_downsample,
    downsampled_length,
    is_added,
    parameter_inventory,
    prime_strides,
    trainable_names,
)
from polyadapt.pretrain import AcousticPretrainer
from polyadapt.tensor import backward, constant
from polyadapt.train import Adam, train_step

F64 = np.float64


def _checkpoints(cfg):
    enc = AcousticPretrainer(cfg, toy_run_config().pretrain, seed=5)
    dec = TextSeq2Seq(cfg, seed=6)
    dump = cfg.model_dump(mode="json")
    return (
        Checkpoint("acoustic", enc.state_dict(), dump, None, {}),
        Checkpoint("text", dec.state_dict(), dump, None, {}),
    )


def _batch(lang=1, seed=0):
    rng = np.random.default_rng(seed)
    frames = [rng.normal(size=(n, 4)) for n in (6, 9)]
    return collate(frames, ["ab", "a b"], lang, Vocabulary(2), dtype=F64)


def test_prime_strides_and_lengths():
    assert prime_strides(1) == [1]
    assert prime_strides(12) == [2, 2, 3]
    assert downsampled_length(7, 4) == 2
    assert downsampled_length(9, 2) == 5


def test_conv_frontend_shapes():
    frontend = ConvDownsampler(np.random.default_rng(0), 4, 8, 4, dtype=F64)
    out = conv_downsample(constant(np.ones((2, 7, 4)), F64), frontend)
    assert out.shape == (2, 2, 8)
    with pytest.raises(DataError):
        frontend(constant(np.ones((1, 3, 4)), F64))


@pytest.mark.parametrize("variant", list(AblationVariant))
def test_every_variant_computes_a_finite_loss(variant):
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, variant, enc, dec, seed=1, dtype=F64)
    loss = model.loss(_batch())
    assert loss.shape == () and np.isfinite(loss.data)


def test_same_seed_builds_identical_models():
    cfg = toy_model_config()
    a = build_model(cfg, "tf", seed=3).state_dict()
    b = build_model(cfg, "tf", seed=3).state_dict()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_loaded_tensors_match_checkpoints():
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, "wm", enc, dec, seed=1)
    params = dict(model.named_parameters())
    np.testing.assert_array_equal(params["frontend.layers.0.weight"].data, enc.tensors["frontend.layers.0.weight"])
    np.testing.assert_array_equal(params["encoder.final_norm.gamma"].data, enc.tensors["encoder.final_norm.gamma"])
    np.testing.assert_array_equal(params["decoder.embed"].data, dec.tensors["decoder.embed"])
    assert not any(".cross_attn." in name for name in model.pretrained)
    fresh = SpeechRecognizer(cfg, AblationVariant.WM, seed=1)
    np.testing.assert_array_equal(
        params["decoder.layers.0.cross_attn.attn.q.weight"].data,
        dict(fresh.named_parameters())["decoder.layers.0.cross_attn.attn.q.weight"].data,
    )


@pytest.mark.parametrize("adapted", ["wmf", "wma"])
def test_adapted_variants_start_equal_to_wm(adapted):
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    batch = _batch()
    base = build_model(cfg, "wm", enc, dec, seed=3, dtype=F64).loss(batch)
    other = build_model(cfg, adapted, enc, dec, seed=3, dtype=F64).loss(batch)
    assert float(other.data) == pytest.approx(float(base.data), abs=1e-6)


def test_missing_checkpoints_name_the_flag():
    cfg = toy_model_config()
    enc, _ = _checkpoints(cfg)
    with pytest.raises(ConfigError, match="--enc-ckpt"):
        build_model(cfg, "w")
    with pytest.raises(ConfigError, match="--dec-ckpt"):
        build_model(cfg, "wm", enc)
    with pytest.raises(ConfigError, match="--dec-ckpt"):
        build_model(cfg.model_copy(update={"stack_text_encoder": True}), "w", enc)
    with pytest.raises(CheckpointError):
        build_model(cfg, "w", "/nonexistent/encoder.ckpt")
    assert build_model(cfg, "tf").variant is AblationVariant.TF


def test_incompatible_checkpoint_is_rejected():
    enc, _ = _checkpoints(toy_model_config(feature_dim=6))
    with pytest.raises(ConfigError, match="feature_dim"):
        build_model(toy_model_config(), "w", enc)


def test_frozen_variants_train_only_added_parameters():
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, "fwmf", enc, dec)
    names = trainable_names(model)
    assert names and all(".factors." in n or ".cross_attn." in n for n in names)
    assert model.num_parameters(trainable_only=True) == 2024
    fwma = build_model(cfg, "fwma", enc, dec)
    assert all(is_added(n) or ".cross_attn." in n for n in trainable_names(fwma))


def test_relative_positions_only_in_acoustic_encoder():
    cfg = toy_model_config(rel_pos=True)
    enc, dec = _checkpoints(toy_model_config())
    model = build_model(cfg, "wm", enc, dec, dtype=F64)
    rel = [n for n, _ in model.named_parameters() if ".rel_pos." in n]
    assert rel and all(n.startswith("encoder.layers.") for n in rel)
    assert not any(n in model.pretrained for n in rel)
    assert np.isfinite(model.loss(_batch()).data)


def test_stacked_text_encoder_comes_from_decoder_checkpoint():
    cfg = toy_model_config(stack_text_encoder=True)
    enc, dec = _checkpoints(toy_model_config())
    model = build_model(cfg, "wm", enc, dec)
    params = dict(model.named_parameters())
    np.testing.assert_array_equal(
        params["encoder.stacked.0.ffn.net.inner.weight"].data, dec.tensors["text_encoder.layers.0.ffn.net.inner.weight"]
    )
    assert model.config.stack_text_encoder
    assert np.isfinite(model.loss(_batch()).data)


def test_unknown_language_fails_in_adapted_model():
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, "wmf", enc, dec)
    batch = _batch()
    batch.lang = 2
    with pytest.raises(LanguageError):
        model.loss(batch)


def test_parameter_inventory():
    cfg = toy_model_config()
    tf = parameter_inventory(cfg, "tf")
    assert tf.adapter_per_lang == tf.factorized_per_lang == tf.pretrained == 0
    assert tf.trainable == tf.total
    per_lang = count_language_params(cfg)
    assert parameter_inventory(cfg, "wma").adapter_per_lang == per_lang.adapter_per_lang == 184
    wmf = parameter_inventory(cfg, "wmf")
    assert wmf.factorized_per_lang == per_lang.factorized_per_lang == 864
    fwmf = parameter_inventory(cfg, "fwmf")
    assert fwmf.trainable == 2024 < wmf.trainable
    assert fwmf.shared == tf.total


def _owner_language(name):
    match = re.search(r"\.(?:factors|languages)\.(\d+)\.", name)
    return int(match.group(1)) if match else None


@pytest.mark.parametrize("variant", ["wma", "wmf"])
def test_language_parameters_only_see_their_own_batches(variant):
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, variant, enc, dec, seed=2, dtype=F64)
    params = dict(model.named_parameters())
    for seed in range(10):
        lang = seed % 2
        model.zero_grad()
        backward(model.loss(_batch(lang, seed)), list(params.values()))
        own = [p for n, p in params.items() if _owner_language(n) == lang]
        others = {n: p for n, p in params.items() if _owner_language(n) not in (None, lang)}
        assert others and own
        for name, p in others.items():
            assert not p.grad.any(), name
        assert any(p.grad.any() for p in own)


@pytest.mark.parametrize("variant", ["fwma", "fwmf"])
def test_frozen_tensors_unchanged_after_an_update(variant):
    cfg = toy_model_config()
    enc, dec = _checkpoints(cfg)
    model = build_model(cfg, variant, enc, dec, seed=2, dtype=F64)
    before = model.state_dict()
    schedule = TrainSchedule(warmup_steps=1, peak_lr=1e-2)
    train_step(model, _batch(), Adam.for_model(model, schedule), schedule)
    after = model.state_dict()
    frozen = [n for n, p in model.named_parameters() if not p.requires_grad]
    assert frozen
    for name in frozen:
        np.testing.assert_array_equal(after[name], before[name], err_msg=name)
    for name in frozen:
        if name.startswith("frontend."):
            np.testing.assert_array_equal(after[name], enc.tensors[name].astype(F64))
    assert any(not np.array_equal(after[n], before[n]) for n in trainable_names(model))


def test_stacked_layers_with_silent_branches_leave_the_encoder_unchanged():
    enc, dec = _checkpoints(toy_model_config())
    plain = build_model(toy_model_config(), "wm", enc, dec, seed=4, dtype=F64)
    stacked = build_model(toy_model_config(stack_text_encoder=True), "wm", enc, dec, seed=4, dtype=F64)
    for name, p in stacked.named_parameters():
        if name.startswith("encoder.stacked.") and (".attn.o." in name or ".net.outer." in name):
            p.data = np.zeros_like(p.data)
    batch = _batch()
    a, _ = plain.encode(batch.frames, batch.frame_lengths, batch.lang)
    b, _ = stacked.encode(batch.frames, batch.frame_lengths, batch.lang)
    np.testing.assert_allclose(b.data, a.data, atol=1e-6)
    assert float(stacked.loss(batch).data) == pytest.approx(float(plain.loss(batch).data), abs=1e-6)
