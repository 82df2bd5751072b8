"""The seven-rung ablation ladder: pretraining, per-seed runs and directional checks."""
from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import pandas as pd
from sqlalchemy import delete, select

from .checkpoint import file_sha256, read_checkpoint
from .config import LADDER, AblationVariant, RunConfig, write_resolved_config
from .data.corpus import load_languages
from .errors import DataError, PolyadaptError
from .evaluation import evaluate_split
from .model import build_model
from .pretrain import PRETRAIN_KINDS, run_pretraining
from .reports import delta_frame, median_matrix, relative_improvement, runs_frame, write_eval_report, write_report
from .storage import LanguageResult, PretrainArtifact, Run, init_db, session_factory
from .train import fit

logger = logging.getLogger(__name__)

MIN_VERY_LOW_GAIN = 5.0


@dataclass(frozen=True)
class Artifact:
    kind: str
    path: Path
    sha256: str
    final_loss: float | None


@dataclass(frozen=True)
class RunTask:
    variant: AblationVariant
    seed: int
    cfg: RunConfig
    corpus: Path
    enc_ckpt: Path
    dec_ckpt: Path
    out_dir: Path


@dataclass
class RunOutcome:
    variant: str
    seed: int
    status: str = "ok"
    error: str | None = None
    per_lang: dict[str, float] = field(default_factory=dict)
    tiers: dict[str, str] = field(default_factory=dict)
    edits: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)
    truncated: dict[str, int] = field(default_factory=dict)
    overall: float | None = None
    best_update: int = 0
    best_dev_loss_update: int = 0
    trainable: int = 0
    checkpoint: str | None = None


@dataclass
class Criterion:
    name: str
    description: str
    passed: bool | None
    detail: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return {True: "pass", False: "fail", None: "unevaluable"}[self.passed]


@dataclass
class AblationResult:
    matrix: pd.DataFrame
    deltas: pd.DataFrame
    criteria: list[Criterion]
    outcomes: list[RunOutcome]
    artifacts: dict[str, Artifact]
    seeds: list[int]

    @property
    def exit_code(self) -> int:
        return 0 if all(c.passed for c in self.criteria) else 1


def ensure_pretrained(
    cfg: RunConfig,
    corpus: str | Path,
    out_dir: str | Path,
    enc_ckpt: str | Path | None = None,
    dec_ckpt: str | Path | None = None,
) -> dict[str, Artifact]:
    """Use the given checkpoints, reuse earlier ones under ``out_dir``, or pretrain what is missing."""
    given = {"encoder": enc_ckpt, "decoder": dec_ckpt}
    artifacts: dict[str, Artifact] = {}
    for kind in PRETRAIN_KINDS:
        path = Path(given[kind]) if given[kind] is not None else Path(out_dir) / f"{kind}.ckpt"
        if not path.is_file():
            if given[kind] is not None:
                raise DataError(f"{kind} checkpoint not found: {path}")
            path = run_pretraining(kind, cfg, corpus, out_dir).path
        final_loss = read_checkpoint(path).metadata.get("final_loss")
        artifacts[kind] = Artifact(kind, path, file_sha256(path), final_loss)
        logger.info("pretrained checkpoint ready", extra={"fields": {"kind": kind, "path": str(path), "sha256": artifacts[kind].sha256}})
    return artifacts


def run_one(task: RunTask) -> RunOutcome:
    """Train one (variant, seed) and score it on the evaluation split; failures are returned, not raised."""
    label = task.variant.label
    cfg = task.cfg.model_copy(update={"train": task.cfg.train.model_copy(update={"seed": task.seed})})
    outcome = RunOutcome(label, task.seed)
    try:
        task.out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, task.out_dir)
        model = build_model(cfg.model, task.variant, task.enc_ckpt, task.dec_ckpt, seed=task.seed)
        outcome.trainable = model.num_parameters(trainable_only=True)
        fitted = fit(model, task.corpus, cfg, task.out_dir)
        split = evaluate_split(model, task.corpus, cfg.eval, cfg.train.frame_budget, label, task.seed)
        write_eval_report(split.report, task.out_dir)
    except Exception as exc:
        error = str(exc) if isinstance(exc, PolyadaptError) else f"{type(exc).__name__}: {exc}"
        logger.warning("run failed", extra={"fields": {"variant": label, "seed": task.seed, "error": error}})
        outcome.status, outcome.error = "failed", error
        return outcome
    report = split.report
    outcome.per_lang = report.per_lang
    outcome.tiers = report.tiers
    outcome.edits = {k: (e.substitutions, e.deletions, e.insertions, e.ref_len) for k, e in report.edits.items()}
    outcome.truncated = report.truncated
    outcome.overall = report.overall
    outcome.best_update = fitted.best_update
    outcome.best_dev_loss_update = fitted.best_dev_loss_update
    outcome.checkpoint = str(fitted.checkpoint) if fitted.checkpoint else None
    return outcome


def run_tasks(tasks: Sequence[RunTask], workers: int = 1) -> list[RunOutcome]:
    """Results come back in task order whether or not processes are used."""
    if workers <= 1 or len(tasks) <= 1:
        return [run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, tasks))


def store_outcomes(db_path: str | Path, outcomes: Sequence[RunOutcome], artifacts: dict[str, Artifact]) -> None:
    Session = session_factory(init_db(db_path))
    with Session() as session:
        for art in artifacts.values():
            session.merge(PretrainArtifact(kind=art.kind, path=str(art.path), sha256=art.sha256, final_loss=art.final_loss))
        for o in outcomes:
            old = session.scalars(select(Run.id).where(Run.variant == o.variant, Run.seed == o.seed)).all()
            if old:
                session.execute(delete(LanguageResult).where(LanguageResult.run_id.in_(old)))
                session.execute(delete(Run).where(Run.id.in_(old)))
            run = Run(
                variant=o.variant,
                seed=o.seed,
                status=o.status,
                error=o.error,
                overall_wer=o.overall,
                best_update=o.best_update,
                best_dev_loss_update=o.best_dev_loss_update,
                trainable_params=o.trainable,
                checkpoint=o.checkpoint,
            )
            for lang, value in o.per_lang.items():
                s, d, i, n = o.edits.get(lang, (None, None, None, None))
                run.results.append(
                    LanguageResult(
                        lang=lang,
                        tier=o.tiers[lang],
                        wer=value,
                        substitutions=s,
                        deletions=d,
                        insertions=i,
                        ref_len=n,
                        truncated=o.truncated.get(lang, 0),
                    )
                )
            session.add(run)
        session.commit()


def stored_frame(db_path: str | Path, variants: Sequence[str], seeds: Sequence[int]) -> pd.DataFrame:
    """Long-form results read back from the run store for the given variants and seeds."""
    Session = session_factory(init_db(db_path))
    with Session() as session:
        return runs_frame(session, variants, seeds)


def convergence_updates(outcomes: Sequence[RunOutcome]) -> dict[str, float]:
    """Median over seeds of the update index with the lowest dev loss, per variant."""
    by_variant: dict[str, list[int]] = {}
    for o in outcomes:
        if o.status == "ok":
            by_variant.setdefault(o.variant, []).append(o.best_dev_loss_update)
    return {v: float(statistics.median(u)) for v, u in by_variant.items()}


def _value(matrix: pd.DataFrame, row: str, column: str) -> float | None:
    if row not in matrix.index or column not in matrix.columns:
        return None
    value = float(matrix.at[row, column])
    return None if pd.isna(value) else value


def check_criteria(matrix: pd.DataFrame, convergence: dict[str, float]) -> list[Criterion]:
    """Directional checks on the median matrix; any missing cell makes a check unevaluable."""
    tf, w, wm = (_value(matrix, "overall", c) for c in ("TF", "W", "WM"))
    a = Criterion(
        "overall_ordering",
        "overall WER: WM <= W <= TF",
        None if None in (tf, w, wm) else wm <= w <= tf,
        {"TF": tf, "W": w, "WM": wm},
    )

    wm_low, wmf_low = _value(matrix, "avg_very_low", "WM"), _value(matrix, "avg_very_low", "WMF")
    gain = None if None in (wm_low, wmf_low) else relative_improvement(wm_low, wmf_low)
    gain = None if gain is None or pd.isna(gain) else gain
    b = Criterion(
        "very_low_factorized_gain",
        f"very-low tier: WMF improves over WM by >= {MIN_VERY_LOW_GAIN:g}% relative",
        None if gain is None else gain >= MIN_VERY_LOW_GAIN,
        {"WM": wm_low, "WMF": wmf_low, "relative_gain": gain},
    )

    fwma, fwmf = _value(matrix, "overall", "FWMA"), _value(matrix, "overall", "FWMF")
    c = Criterion(
        "frozen_factorized_beats_adapters",
        "overall WER: FWMF <= FWMA",
        None if None in (fwma, fwmf) else fwmf <= fwma,
        {"FWMA": fwma, "FWMF": fwmf},
    )

    conv_w, conv_tf = convergence.get("W"), convergence.get("TF")
    d = Criterion(
        "pretrained_encoder_converges_faster",
        "W reaches its best dev loss in fewer updates than TF",
        None if None in (conv_w, conv_tf) else conv_w < conv_tf,
        {"W": conv_w, "TF": conv_tf},
    )
    return [a, b, c, d]


def criteria_frame(criteria: Sequence[Criterion]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {"check": [c.description for c in criteria], "result": [c.verdict for c in criteria]},
        index=[c.name for c in criteria],
    )
    frame.index.name = "criterion"
    return frame


def artifact_frame(artifacts: dict[str, Artifact]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {"path": [str(a.path) for a in artifacts.values()], "sha256": [a.sha256 for a in artifacts.values()]},
        index=list(artifacts),
    )
    frame.index.name = "pretrained"
    return frame


def ablate(
    cfg: RunConfig,
    corpus: str | Path,
    out_dir: str | Path,
    seeds: int = 3,
    workers: int = 1,
    escalate_to: int = 5,
    enc_ckpt: str | Path | None = None,
    dec_ckpt: str | Path | None = None,
    variants: Sequence[AblationVariant] = LADDER,
) -> AblationResult:
    """Run every variant for ``seeds`` seeds and summarize medians.

    When a directional check fails, more seeds are added up to
    ``escalate_to`` before the result is final.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    artifacts = ensure_pretrained(cfg, corpus, out / "pretrain", enc_ckpt, dec_ckpt)
    tiers = {lang.tag: lang.tier for lang in load_languages(corpus)}

    def tasks_for(seed_values: Sequence[int]) -> list[RunTask]:
        return [
            RunTask(v, s, cfg, Path(corpus), artifacts["encoder"].path, artifacts["decoder"].path, out / "runs" / f"{v.value}-s{s}")
            for v in variants
            for s in seed_values
        ]

    seed_values = [cfg.train.seed + i for i in range(seeds)]
    outcomes = run_tasks(tasks_for(seed_values), workers)
    labels = [v.label for v in variants]
    db_path = out / "ablation.sqlite"
    store_outcomes(db_path, outcomes, artifacts)
    matrix = median_matrix(stored_frame(db_path, labels, seed_values), tiers, labels)
    criteria = check_criteria(matrix, convergence_updates(outcomes))
    if any(c.passed is False for c in criteria) and len(seed_values) < escalate_to:
        extra = [cfg.train.seed + i for i in range(len(seed_values), escalate_to)]
        logger.warning(
            "directional check failed, adding seeds",
            extra={"fields": {"failed": [c.name for c in criteria if c.passed is False], "seeds": extra}},
        )
        seed_values += extra
        outcomes += run_tasks(tasks_for(extra), workers)
        outcomes.sort(key=lambda o: (labels.index(o.variant), o.seed))
        store_outcomes(db_path, outcomes, artifacts)
        matrix = median_matrix(stored_frame(db_path, labels, seed_values), tiers, labels)
        criteria = check_criteria(matrix, convergence_updates(outcomes))

    deltas = delta_frame(matrix)
    summary = [{"table": "criterion", "name": c.name, "result": c.verdict, **c.detail} for c in criteria]
    summary += [{"table": "run", "variant": o.variant, "seed": o.seed, "status": o.status, "error": o.error} for o in outcomes]
    write_report(
        matrix,
        out,
        title=f"median WER over {len(seed_values)} seeds",
        extra=[
            ("relative improvement (%)", deltas),
            ("directional checks", criteria_frame(criteria)),
            ("pretrained checkpoints", artifact_frame(artifacts)),
        ],
        summary=summary,
    )
    result = AblationResult(matrix, deltas, criteria, outcomes, artifacts, seed_values)
    logger.info("ablation finished", extra={"fields": {"seeds": len(seed_values), "exit_code": result.exit_code}})
    return result
