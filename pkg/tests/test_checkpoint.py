import numpy as np
import pytest
from helpers import toy_model_config, toy_run_config

from polyadapt.checkpoint import (
    MAGIC,
    file_sha256,
    load_checkpoint,
    read_checkpoint,
    read_frames,
    save_checkpoint,
    write_container,
    write_frames,
)
from polyadapt.config import AblationVariant
from polyadapt.errors import CheckpointError, TruncatedFileError
from polyadapt.model import SpeechRecognizer, TextSeq2Seq, build_model
from polyadapt.pretrain import AcousticPretrainer


def test_recognizer_round_trip(tmp_path):
    model = SpeechRecognizer(toy_model_config(), AblationVariant.WMF, seed=4)
    path = save_checkpoint(model, tmp_path / "model.ckpt", {"update": 7})
    loaded = load_checkpoint(path)
    assert isinstance(loaded, SpeechRecognizer)
    assert loaded.variant is AblationVariant.WMF
    assert loaded.seed == 4
    assert loaded.config == model.config
    for (name, a), (other, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name == other
        np.testing.assert_array_equal(a.data, b.data)
    assert read_checkpoint(path).metadata["update"] == 7


def test_frozen_flags_survive_reload(tmp_path):
    cfg = toy_model_config()
    enc = AcousticPretrainer(cfg, toy_run_config().pretrain)
    dec = TextSeq2Seq(cfg)
    enc_path = save_checkpoint(enc, tmp_path / "encoder.ckpt", {"codebook_size": 8, "code_dim": 4})
    dec_path = save_checkpoint(dec, tmp_path / "decoder.ckpt")
    model = build_model(cfg, "fwma", str(enc_path), str(dec_path))
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "fwma.ckpt"))
    assert loaded.num_parameters(trainable_only=True) == model.num_parameters(trainable_only=True)
    assert loaded.pretrained == model.pretrained
    assert isinstance(load_checkpoint(enc_path), AcousticPretrainer)


def test_payload_is_float32_little_endian(tmp_path):
    path = write_container(tmp_path / "x.ckpt", "frames", {"a": np.arange(3, dtype=np.float64)})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    assert raw[-12:] == np.array([0.0, 1.0, 2.0], dtype="<f4").tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(path)


@pytest.mark.parametrize("keep", [len(MAGIC) + 4, len(MAGIC) + 20, -4])
def test_truncated_file(tmp_path, keep):
    path = write_frames(tmp_path / "f.bin", np.ones((3, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:keep])
    with pytest.raises(TruncatedFileError):
        read_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "nope.ckpt")


def test_frames_container(tmp_path):
    frames = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    path = write_frames(tmp_path / "f.bin", frames)
    np.testing.assert_array_equal(read_frames(path), frames)
    with pytest.raises(CheckpointError):
        read_frames(write_container(tmp_path / "c.ckpt", "text", {"x": frames}))


def test_loading_into_wrong_shape_names_the_tensor(tmp_path):
    path = save_checkpoint(SpeechRecognizer(toy_model_config(), seed=0), tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="frontend.layers.0.weight"):
        load_checkpoint(path, config=toy_model_config(feature_dim=6))


def test_sha256_is_stable(tmp_path):
    a = write_frames(tmp_path / "a.bin", np.ones((2, 2)))
    b = write_frames(tmp_path / "b.bin", np.ones((2, 2)))
    assert file_sha256(a) == file_sha256(b)
    assert len(file_sha256(a)) == 64
