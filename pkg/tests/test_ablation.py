import pandas as pd
import pytest
from helpers import toy_run_config
from sqlalchemy import func, select

import polyadapt.ablation as ablation
from polyadapt.ablation import (
    RunOutcome,
    RunTask,
    ablate,
    check_criteria,
    convergence_updates,
    criteria_frame,
    run_one,
    store_outcomes,
    stored_frame,
)
from polyadapt.config import AblationVariant
from polyadapt.storage import PretrainArtifact, Run, init_db, session_factory


def _matrix(overall, very_low=None):
    rows = {"overall": overall}
    if very_low:
        rows["avg_very_low"] = very_low
    return pd.DataFrame(rows).T


def test_criteria_all_pass():
    matrix = _matrix(
        {"TF": 40.0, "W": 30.0, "WM": 25.0, "FWMA": 28.0, "FWMF": 27.0},
        {"WM": 60.0, "WMF": 50.0},
    )
    criteria = check_criteria(matrix, {"W": 100.0, "TF": 300.0})
    assert [c.verdict for c in criteria] == ["pass"] * 4
    assert criteria[1].detail["relative_gain"] == pytest.approx(100 / 6)


def test_criteria_fail_and_unevaluable():
    matrix = _matrix({"TF": 40.0, "W": 45.0, "WM": 25.0, "FWMA": 28.0}, {"WM": 60.0, "WMF": 58.0})
    criteria = check_criteria(matrix, {"TF": 300.0})
    assert [c.verdict for c in criteria] == ["fail", "fail", "unevaluable", "unevaluable"]
    frame = criteria_frame(criteria)
    assert frame.at["frozen_factorized_beats_adapters", "result"] == "unevaluable"
    nan_cell = _matrix({"TF": 40.0, "W": float("nan"), "WM": 25.0})
    assert check_criteria(nan_cell, {})[0].passed is None


def test_failed_runs_are_left_out_of_summaries(tmp_path):
    outcomes = [
        RunOutcome("TF", 0, per_lang={"l0": 10.0}, tiers={"l0": "low"}, best_dev_loss_update=8),
        RunOutcome("TF", 1, per_lang={"l0": 12.0}, tiers={"l0": "low"}, best_dev_loss_update=4),
        RunOutcome("TF", 2, status="failed", error="boom", best_dev_loss_update=1),
    ]
    assert convergence_updates(outcomes) == {"TF": 6.0}
    store_outcomes(tmp_path / "runs.sqlite", outcomes, {})
    assert stored_frame(tmp_path / "runs.sqlite", ["TF"], [0, 1, 2])["wer"].tolist() == [10.0, 12.0]
    assert stored_frame(tmp_path / "runs.sqlite", ["TF"], [1])["wer"].tolist() == [12.0]


def test_run_failure_is_recorded(tmp_path, toy_corpus):
    task = RunTask(AblationVariant.W, 0, toy_run_config(), toy_corpus, tmp_path / "enc.ckpt", tmp_path / "dec.ckpt", tmp_path / "run")
    outcome = run_one(task)
    assert outcome.status == "failed" and "not found" in outcome.error
    assert outcome.per_lang == {}


def test_unexpected_errors_are_recorded_not_raised(tmp_path, toy_corpus, monkeypatch):
    def disk_full(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(ablation, "fit", disk_full)
    task = RunTask(AblationVariant.TF, 0, toy_run_config(), toy_corpus, None, None, tmp_path / "run")
    outcome = run_one(task)
    assert outcome.status == "failed"
    assert outcome.error == "OSError: disk full"
    assert outcome.trainable > 0


def test_ablation_end_to_end(tmp_path, toy_corpus):
    cfg = toy_run_config()
    out = tmp_path / "ablation"
    variants = [AblationVariant.TF, AblationVariant.W]
    result = ablate(cfg, toy_corpus, out, seeds=1, escalate_to=1, variants=variants)
    assert result.seeds == [0]
    assert [(o.variant, o.status) for o in result.outcomes] == [("TF", "ok"), ("W", "ok")]
    assert list(result.matrix.columns) == ["TF", "W"]
    assert list(result.matrix.index) == ["l0", "l1", "avg_very_low", "avg_low", "overall"]
    assert result.matrix.notna().all().all()
    # WM, FWMA and FWMF columns are absent, so checks on them cannot pass
    assert result.exit_code == 1
    for name in ("report.tsv", "report.txt", "report.jsonl", "resolved.cfg", "ablation.sqlite"):
        assert (out / name).is_file()
    assert (out / "runs" / "w-s0" / "best.ckpt").is_file()

    Session = session_factory(init_db(out / "ablation.sqlite"))
    with Session() as session:
        assert session.scalar(select(func.count()).select_from(Run)) == 2
        assert {a.kind for a in session.scalars(select(PretrainArtifact))} == {"encoder", "decoder"}

    again = ablate(cfg, toy_corpus, out, seeds=1, escalate_to=1, variants=[AblationVariant.TF])
    assert again.artifacts["encoder"].sha256 == result.artifacts["encoder"].sha256
