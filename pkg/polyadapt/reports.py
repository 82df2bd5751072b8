"""Report tables: per-language rows, variant columns, tier and overall averages.

Every report is written three ways under one directory: ``report.tsv``
(pandas), ``report.txt`` (rich table rendered to text) and ``report.jsonl``
(one JSON object per row, then any summary records). All three carry the
same values rounded to one decimal.
"""
from __future__ import annotations

import io
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import orjson
import pandas as pd
from rich.console import Console
from rich.table import Table
from sqlalchemy import select
from sqlalchemy.orm import Session

from .config import LADDER
from .data.corpus import TIERS
from .evaluation import EvalReport
from .storage import LanguageResult, Run

LONG_COLUMNS = ("variant", "seed", "lang", "tier", "wer")
FAILED = "failed"
OPERATION_COLUMNS = ("S", "D", "I", "ref_len", "truncated")

# (improved, baseline) pairs of adjacent ladder rungs
ADJACENT_RUNGS = (("W", "TF"), ("WM", "W"), ("WMA", "WM"), ("WMF", "WM"), ("FWMA", "WMA"), ("FWMF", "WMF"))


def _lang_order(tag: str) -> int:
    return int(tag.lstrip("l"))


def average_rows(tiers: Mapping[str, str]) -> list[str]:
    present = set(tiers.values())
    return [f"avg_{t}" for t in TIERS if t in present] + [f"avg_{t}" for t in sorted(present - set(TIERS))] + ["overall"]


def long_frame(rows: Iterable[Mapping]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=list(LONG_COLUMNS))


def runs_frame(session: Session, variants: Sequence[str] | None = None, seeds: Sequence[int] | None = None) -> pd.DataFrame:
    """Per-language results of successful stored runs, in long form, optionally narrowed to some variants and seeds."""
    stmt = (
        select(Run.variant, Run.seed, LanguageResult.lang, LanguageResult.tier, LanguageResult.wer)
        .join(LanguageResult, LanguageResult.run_id == Run.id)
        .where(Run.status == "ok")
        .order_by(Run.variant, Run.seed, LanguageResult.lang)
    )
    if variants is not None:
        stmt = stmt.where(Run.variant.in_(list(variants)))
    if seeds is not None:
        stmt = stmt.where(Run.seed.in_(list(seeds)))
    return long_frame(dict(zip(LONG_COLUMNS, row)) for row in session.execute(stmt))


def median_matrix(long: pd.DataFrame, tiers: Mapping[str, str], variants: Sequence[str] | None = None) -> pd.DataFrame:
    """Languages x variants of median-over-seed WERs, followed by average rows.

    Averages are unweighted means of the language rows above them; a variant
    with a missing language gets NaN averages.
    """
    labels = list(variants) if variants is not None else [v.label for v in LADDER]
    langs = sorted(tiers, key=_lang_order)
    if long.empty:
        pivot = pd.DataFrame(index=langs, columns=labels, dtype=float)
    else:
        pivot = long.pivot_table(index="lang", columns="variant", values="wer", aggfunc="median")
        pivot = pivot.reindex(index=langs, columns=labels).astype(float)
    rows = {}
    for tier in dict.fromkeys(tiers[lang] for lang in langs):
        members = [lang for lang in langs if tiers[lang] == tier]
        rows[f"avg_{tier}"] = pivot.loc[members].mean(axis=0, skipna=False)
    rows["overall"] = pivot.mean(axis=0, skipna=False)
    averages = pd.DataFrame(rows).T.reindex(average_rows(tiers))
    matrix = pd.concat([pivot, averages])
    matrix.index.name = "row"
    return matrix


def relative_improvement(baseline: float, improved: float) -> float:
    """Percent reduction from ``baseline`` to ``improved``; NaN when undefined."""
    if not (math.isfinite(baseline) and math.isfinite(improved)) or baseline == 0:
        return math.nan
    return 100.0 * (baseline - improved) / baseline


def delta_frame(matrix: pd.DataFrame, pairs: Sequence[tuple[str, str]] = ADJACENT_RUNGS) -> pd.DataFrame:
    """Relative improvements per average row for each (improved, baseline) pair."""
    rows = [r for r in matrix.index if r.startswith("avg_") or r == "overall"]
    data = {
        f"{new} vs {base}": [relative_improvement(float(matrix.at[r, base]), float(matrix.at[r, new])) for r in rows]
        for new, base in pairs
        if new in matrix.columns and base in matrix.columns
    }
    frame = pd.DataFrame(data, index=rows)
    frame.index.name = "row"
    return frame


def eval_frame(report: EvalReport) -> pd.DataFrame:
    """Single-run table: WER plus edit-operation totals and truncated decodes."""
    label = report.variant or "wer"
    records = {}
    for lang in sorted(report.per_lang, key=_lang_order):
        counts = report.edits.get(lang)
        records[lang] = {
            "tier": report.tiers[lang],
            label: report.per_lang[lang],
            "S": counts.substitutions if counts else "",
            "D": counts.deletions if counts else "",
            "I": counts.insertions if counts else "",
            "ref_len": counts.ref_len if counts else "",
            "truncated": report.truncated.get(lang, 0),
        }
    for tier, value in report.tier_avg.items():
        records[f"avg_{tier}"] = {"tier": tier, label: value, **dict.fromkeys(OPERATION_COLUMNS, "")}
    records["overall"] = {"tier": "", label: report.overall, **dict.fromkeys(OPERATION_COLUMNS, "")}
    frame = pd.DataFrame.from_dict(records, orient="index")
    frame.index.name = "row"
    return frame


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FAILED if math.isnan(value) else f"{value:.1f}"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _json_value(value):
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else round(float(value), 1)
    if isinstance(value, np.integer):
        return int(value)
    return value


def render_text(frame: pd.DataFrame, title: str | None = None) -> str:
    table = Table(title=title, show_lines=False)
    table.add_column(frame.index.name or "row")
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    in_averages = False
    for row, values in frame.iterrows():
        if not in_averages and (str(row).startswith("avg_") or row == "overall"):
            table.add_section()
            in_averages = True
        table.add_row(str(row), *(_cell(v) for v in values))
    console = Console(record=True, width=max(80, 14 * (len(frame.columns) + 1)), file=io.StringIO(), color_system=None)
    console.print(table)
    return console.export_text()


def write_report(
    frame: pd.DataFrame,
    out_dir: str | Path,
    title: str | None = None,
    extra: Sequence[tuple[str, pd.DataFrame]] = (),
    summary: Sequence[dict] = (),
) -> dict[str, Path]:
    """Write ``report.tsv``, ``report.txt`` and ``report.jsonl``.

    ``extra`` tables (name, frame) are appended to the text report and to the
    JSON lines with a ``table`` field; ``summary`` records go last.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"tsv": out / "report.tsv", "txt": out / "report.txt", "jsonl": out / "report.jsonl"}

    frame.to_csv(paths["tsv"], sep="\t", na_rep=FAILED, float_format="%.1f", lineterminator="\n")

    text = [render_text(frame, title)]
    text.extend(render_text(table, name) for name, table in extra)
    paths["txt"].write_text("\n".join(text), encoding="utf-8")

    with paths["jsonl"].open("wb") as fh:
        for name, table in [("report", frame), *extra]:
            for row, values in table.iterrows():
                record = {"table": name, "row": row}
                record.update({str(k): _json_value(v) for k, v in values.items()})
                fh.write(orjson.dumps(record) + b"\n")
        for record in summary:
            fh.write(orjson.dumps(record, default=str, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")
    return paths


def write_eval_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    title = f"{report.variant or 'model'} (seed {report.seed})"
    return write_report(eval_frame(report), out_dir, title=title)
