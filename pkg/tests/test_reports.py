import math

import numpy as np
import orjson
import pandas as pd
import pytest
from sqlalchemy import select

from polyadapt.ablation import RunOutcome, store_outcomes
from polyadapt.evaluation import EditCounts, tier_report
from polyadapt.reports import (
    average_rows,
    delta_frame,
    eval_frame,
    long_frame,
    median_matrix,
    relative_improvement,
    runs_frame,
    write_eval_report,
    write_report,
)
from polyadapt.storage import Run, init_db, session_factory

TIERS = {"l0": "medium", "l1": "low", "l2": "very_low", "l3": "very_low"}


def _long(values):
    """``values`` maps (variant, lang) to a list of per-seed WERs."""
    return long_frame(
        {"variant": v, "seed": s, "lang": lang, "tier": TIERS[lang], "wer": wer}
        for (v, lang), wers in values.items()
        for s, wer in enumerate(wers)
    )


def test_median_matrix_takes_medians_and_averages():
    values = {}
    for lang, base in zip(TIERS, (10.0, 20.0, 40.0, 60.0)):
        values[("TF", lang)] = [base + 5, base, base + 100]
        values[("W", lang)] = [base / 2, base / 2, 0.0]
    matrix = median_matrix(_long(values), TIERS, ["TF", "W"])
    assert list(matrix.index) == ["l0", "l1", "l2", "l3", "avg_very_low", "avg_low", "avg_medium", "overall"]
    assert matrix.at["l2", "TF"] == 45.0
    assert matrix.at["avg_very_low", "TF"] == 55.0
    assert matrix.at["avg_medium", "W"] == 5.0
    assert matrix.at["overall", "TF"] == pytest.approx(np.mean([15.0, 25.0, 45.0, 65.0]))


def test_missing_cells_give_nan_averages():
    values = {("TF", lang): [10.0] for lang in TIERS}
    values.update({("W", lang): [5.0] for lang in ("l0", "l1", "l2")})
    matrix = median_matrix(_long(values), TIERS, ["TF", "W", "WM"])
    assert math.isnan(matrix.at["l3", "W"])
    assert math.isnan(matrix.at["avg_very_low", "W"]) and math.isnan(matrix.at["overall", "W"])
    assert matrix.at["avg_low", "W"] == 5.0
    assert matrix["WM"].isna().all()
    assert median_matrix(long_frame([]), TIERS, ["TF"]).isna().all().all()


def test_average_rows_order():
    assert average_rows({"l0": "low", "l1": "medium"}) == ["avg_low", "avg_medium", "overall"]


def test_relative_improvement():
    assert relative_improvement(20.0, 15.0) == pytest.approx(25.0)
    assert relative_improvement(10.0, 12.0) == pytest.approx(-20.0)
    assert math.isnan(relative_improvement(0.0, 1.0))
    assert math.isnan(relative_improvement(math.nan, 1.0))


def test_delta_frame_uses_adjacent_rungs():
    values = {(v, lang): [w] for lang in TIERS for v, w in (("TF", 40.0), ("W", 30.0), ("WM", 24.0))}
    deltas = delta_frame(median_matrix(_long(values), TIERS, ["TF", "W", "WM"]))
    assert list(deltas.columns) == ["W vs TF", "WM vs W"]
    assert deltas.at["overall", "W vs TF"] == pytest.approx(25.0)
    assert deltas.at["avg_low", "WM vs W"] == pytest.approx(20.0)


def test_report_formats_agree(tmp_path):
    values = {("TF", lang): [12.345] for lang in TIERS}
    values.update({("W", lang): [7.0] for lang in ("l0", "l1", "l2")})
    matrix = median_matrix(_long(values), TIERS, ["TF", "W"])
    paths = write_report(matrix, tmp_path, title="median WER", summary=[{"table": "note", "value": np.float64(1.5)}])
    tsv = pd.read_csv(paths["tsv"], sep="\t", index_col=0, dtype=str, keep_default_na=False)
    lines = [orjson.loads(line) for line in paths["jsonl"].read_bytes().splitlines()]
    text = paths["txt"].read_text(encoding="utf-8")
    rows = {rec["row"]: rec for rec in lines if rec["table"] == "report"}
    assert tsv.at["l0", "TF"] == "12.3" and rows["l0"]["TF"] == 12.3
    assert tsv.at["l3", "W"] == "failed" and rows["l3"]["W"] is None
    assert tsv.at["overall", "W"] == "failed" and rows["overall"]["W"] is None
    assert "12.3" in text and "failed" in text and "median WER" in text
    assert lines[-1] == {"table": "note", "value": 1.5}


def test_eval_report_lists_operations(tmp_path):
    report = tier_report({"l0": 25.0, "l1": 50.0}, {"l0": "low", "l1": "very_low"}, variant="WM", seed=2)
    report.edits = {"l0": EditCounts(1, 1, 0, 0, 4), "l1": EditCounts(2, 0, 1, 1, 4)}
    report.truncated = {"l0": 0, "l1": 1}
    frame = eval_frame(report)
    assert list(frame.index) == ["l0", "l1", "avg_very_low", "avg_low", "overall"]
    assert frame.at["l1", "I"] == 1 and frame.at["l1", "truncated"] == 1
    assert frame.at["overall", "WM"] == pytest.approx(37.5)
    paths = write_eval_report(report, tmp_path)
    assert "WM (seed 2)" in paths["txt"].read_text(encoding="utf-8")


def test_store_outcomes_replaces_reruns(tmp_path):
    db = tmp_path / "runs.sqlite"
    ok = RunOutcome("TF", 0, per_lang={"l0": 10.0}, tiers={"l0": "low"}, edits={"l0": (1, 0, 0, 10)}, overall=10.0)
    failed = RunOutcome("W", 0, status="failed", error="diverged")
    store_outcomes(db, [ok, failed], {})
    store_outcomes(db, [RunOutcome("TF", 0, per_lang={"l0": 8.0}, tiers={"l0": "low"}, overall=8.0)], {})
    Session = session_factory(init_db(db))
    with Session() as session:
        runs = session.scalars(select(Run).order_by(Run.variant)).all()
        assert [(r.variant, r.status) for r in runs] == [("TF", "ok"), ("W", "failed")]
        assert runs[1].error == "diverged"
        frame = runs_frame(session)
    assert frame.to_dict("records") == [{"variant": "TF", "seed": 0, "lang": "l0", "tier": "low", "wer": 8.0}]
