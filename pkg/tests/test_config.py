from pathlib import Path

import pytest
from pydantic import ValidationError

from polyadapt.config import (
    LADDER,
    AblationVariant,
    ModelConfig,
    RunConfig,
    Settings,
    emit_run_config,
    load_run_config,
    parse_run_config,
    write_resolved_config,
)
from polyadapt.data.vocab import vocabulary_size
from polyadapt.errors import ConfigError


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    text = emit_run_config(cfg)
    assert "[model]" in text and "# attention heads; must divide d_model" in text
    assert parse_run_config(text) == cfg


def test_resolved_config_reloads(tmp_path):
    cfg = parse_run_config("", {"train.peak_lr": "0.004", "model.rel_pos": "true", "data.char_scored": "l6,l7"})
    path = write_resolved_config(cfg, tmp_path)
    again = load_run_config(path)
    assert again == cfg
    assert again.train.peak_lr == 0.004 and again.model.rel_pos
    assert again.data.char_scored == ["l6", "l7"]


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_run_config("# header\n\n[train]\nseed = 7  # trailing\n[eval]\nmode = beam\n")
    assert cfg.train.seed == 7 and cfg.eval.mode == "beam"


@pytest.mark.parametrize(
    "text,message",
    [
        ("[optim]\nlr = 1", "unknown section"),
        ("[train]\nlearning_rate = 1", "learning_rate"),
        ("[train]\nseed = 1\nseed = 2", "duplicate key"),
        ("seed = 1", "outside of a section"),
        ("[train]\nseed", "expected key = value"),
        ("[model]\nd_model = 30\nn_heads = 4", "divisible"),
        ("[data]\ntiers = low,low", "num_languages"),
        ("[data]\ntiers = low,tiny,low,low,low,low,low,low", "unknown tiers"),
        ("[data]\ntrain_frac = 0.5", "split fractions"),
    ],
)
def test_invalid_config_text(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_run_config(text)


def test_overrides():
    cfg = parse_run_config("[train]\nseed = 1\n", {"train.seed": 5})
    assert cfg.train.seed == 5
    with pytest.raises(ConfigError, match="bad override"):
        parse_run_config("", {"seed": 1})
    with pytest.raises(ConfigError, match="bad override"):
        parse_run_config("", {"optim.lr": 1})


def test_language_count_drives_vocabulary():
    cfg = parse_run_config("", {"data.tiers": "low,very_low", "model.num_languages": 2, "model.vocab_size": vocabulary_size(2)})
    assert cfg.data.num_languages == 2
    with pytest.raises(ConfigError, match="vocab_size"):
        parse_run_config("", {"data.tiers": "low,very_low", "model.num_languages": 2})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.cfg")
    assert load_run_config(None) == RunConfig()


def test_large_scale_model():
    cfg = ModelConfig.large_scale()
    assert (cfg.d_model, cfg.enc_layers, cfg.dec_layers, cfg.rel_pos) == (1024, 24, 8, True)
    assert cfg.head_dim == 64
    with pytest.raises(ValidationError):
        ModelConfig(d_model=10, n_heads=4)


def test_ladder_properties():
    assert [v.label for v in LADDER] == ["TF", "W", "WM", "WMA", "WMF", "FWMA", "FWMF"]
    assert not AblationVariant.TF.needs_encoder_checkpoint
    assert AblationVariant.W.needs_encoder_checkpoint and not AblationVariant.W.needs_decoder_checkpoint
    assert AblationVariant("fwma").adaptation == "adapter" and AblationVariant.FWMA.frozen
    assert AblationVariant.WMF.adaptation == "factorized" and not AblationVariant.WMF.frozen
    assert AblationVariant.WM.adaptation == "none"


def test_settings_from_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("POLYADAPT_LOG_LEVEL", "debug")
    monkeypatch.setenv("POLYADAPT_WORKERS", "3")
    settings = Settings()
    assert settings.LOG_LEVEL == "DEBUG" and settings.WORKERS == 3 and settings.LOG_DIR == "logs"
    monkeypatch.setenv("POLYADAPT_WORKERS", "0")
    with pytest.raises(ValidationError):
        Settings()


def test_shipped_desk_config_parses():
    cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / "desk.cfg")
    assert cfg.eval.mode == "beam" and cfg.data.num_languages == cfg.model.num_languages == 8
