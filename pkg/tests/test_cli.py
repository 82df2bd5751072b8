import pytest
from helpers import toy_run_config
from rich.console import Console

import polyadapt.main as cli
from polyadapt.checkpoint import save_checkpoint
from polyadapt.config import AblationVariant, emit_run_config, get_settings
from polyadapt.data.manifest import manifest_path, read_manifest
from polyadapt.errors import NumericalAbort
from polyadapt.model import SpeechRecognizer, TextSeq2Seq


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("POLYADAPT_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(cli, "console", Console(width=200, color_system=None))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def toy_config_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(emit_run_config(toy_run_config()), encoding="utf-8")
    return str(path)


def test_bad_arguments_exit_with_usage_code():
    assert cli.main(["train"]) == cli.EXIT_USAGE
    assert cli.main(["shuffle"]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_missing_decoder_checkpoint_names_the_flag(tmp_path, capsys):
    code = cli.main(["train", "--variant", "wm", "--data", str(tmp_path), "--enc-ckpt", "enc.ckpt", "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_USAGE
    assert "--dec-ckpt" in capsys.readouterr().out


def test_bad_override_and_missing_config(tmp_path):
    assert cli.main(["count-params", "--set", "model.d_model"]) == cli.EXIT_USAGE
    assert cli.main(["count-params", "--config", str(tmp_path / "nope.cfg")]) == cli.EXIT_USAGE
    assert cli.main(["count-params", "--set", "model.n_heads=5"]) == cli.EXIT_USAGE


def test_count_params(capsys):
    assert cli.main(["count-params"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "FWMF" in out and "per language" in out
    assert cli.main(["count-params", "--large-scale"]) == cli.EXIT_OK
    assert "adapters" in capsys.readouterr().out


def test_unwritable_output_directory(tmp_path, toy_config_file):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--config", toy_config_file, "--out", str(blocker / "corpus")]) == cli.EXIT_USAGE


def test_generate_then_evaluate(tmp_path, toy_config_file):
    corpus = tmp_path / "corpus"
    assert cli.main(["gen-data", "--config", toy_config_file, "--out", str(corpus)]) == cli.EXIT_OK
    assert len(read_manifest(manifest_path(corpus, "test"))) == 3
    assert (corpus / "resolved.cfg").is_file()

    cfg = toy_run_config()
    ckpt = save_checkpoint(SpeechRecognizer(cfg.model, AblationVariant.TF, seed=0), tmp_path / "tf.ckpt")
    out = tmp_path / "eval"
    args = ["evaluate", "--config", toy_config_file, "--ckpt", str(ckpt), "--data", str(corpus), "--out", str(out)]
    assert cli.main(args + ["--split", "dev"]) == cli.EXIT_OK
    assert {"report.tsv", "report.txt", "report.jsonl", "resolved.cfg"} <= {p.name for p in out.iterdir()}

    text_ckpt = save_checkpoint(TextSeq2Seq(cfg.model), tmp_path / "text.ckpt")
    args[args.index(str(ckpt))] = str(text_ckpt)
    assert cli.main(args) == cli.EXIT_USAGE
    missing = ["evaluate", "--ckpt", str(ckpt), "--data", str(tmp_path / "missing"), "--out", str(out)]
    assert cli.main(missing) == cli.EXIT_USAGE


def test_numerical_abort_exit_code(monkeypatch, tmp_path, toy_config_file, capsys):
    def diverge(*args, **kwargs):
        raise NumericalAbort(7)

    monkeypatch.setattr(cli, "fit", diverge)
    code = cli.main(["train", "--config", toy_config_file, "--variant", "tf", "--data", str(tmp_path), "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_NUMERICAL
    assert "step 7" in capsys.readouterr().out
    assert (tmp_path / "logs" / "polyadapt.log").read_text(encoding="utf-8").count("numerical abort") == 1
