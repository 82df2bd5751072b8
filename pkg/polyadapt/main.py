"""Command-line entry point: ``python -m polyadapt.main <command>``.

Exit codes: 0 success, 1 failed directional checks, 2 usage, configuration
or missing input, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from rich.console import Console
from rich.table import Table

from .ablation import ablate, criteria_frame
from .checkpoint import load_checkpoint
from .config import LADDER, AblationVariant, ModelConfig, RunConfig, get_settings, load_run_config, write_resolved_config
from .data.corpus import TierPlan, generate_corpus, make_languages
from .errors import NumericalAbort, PolyadaptError, UsageError
from .evaluation import evaluate_split
from .layers import count_language_params
from .logging_setup import setup_logging
from .model import SpeechRecognizer, build_model, parameter_inventory
from .pretrain import PRETRAIN_KINDS, run_pretraining
from .reports import render_text, write_eval_report
from .train import fit

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CRITERIA, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3

console = Console()


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args: argparse.Namespace, **extra: str) -> RunConfig:
    return load_run_config(args.config, {**_overrides(args), **extra})


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args: argparse.Namespace) -> int:
    extra = {"data.seed": str(args.seed)} if args.seed is not None else {}
    cfg = _config(args, **extra)
    out = _out_dir(args.out)
    langs = make_languages(cfg.data, cfg.data.seed)
    summary = generate_corpus(langs, TierPlan.from_config(cfg.data), cfg.data, out, cfg.data.seed)
    write_resolved_config(cfg, out)

    table = Table(title=f"corpus {out}")
    table.add_column("tier")
    columns = ("train", "dev", "test", "unlabeled", "text")
    for column in columns:
        table.add_column(column, justify="right")
    for tier, counts in summary.per_tier().items():
        table.add_row(tier, *(str(counts.get(c, 0)) for c in columns))
    console.print(table)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    write_resolved_config(cfg, out)
    result = run_pretraining(args.kind, cfg, args.data, out)
    console.print(f"{args.kind} checkpoint: {result.path} (final loss {result.losses[-1]:.4f})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    extra = {}
    if args.rel_pos:
        extra["model.rel_pos"] = "true"
    if args.stack:
        extra["model.stack_text_encoder"] = "true"
    cfg = _config(args, **extra)
    out = _out_dir(args.out)
    write_resolved_config(cfg, out)
    model = build_model(cfg.model, args.variant, args.enc_ckpt, args.dec_ckpt, seed=cfg.train.seed)
    trainable = model.num_parameters(trainable_only=True)
    logger.info(
        "training",
        extra={"fields": {"variant": model.variant.label, "trainable": trainable, "rel_pos": cfg.model.rel_pos, "stack": cfg.model.stack_text_encoder}},
    )
    console.print(f"{model.variant.label}: {trainable:,} trainable of {model.num_parameters():,} parameters")
    result = fit(model, args.data, cfg, out)
    console.print(f"best dev WER {result.best_dev_wer:.1f} at update {result.best_update}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    extra = {}
    if args.split:
        extra["eval.split"] = args.split
    if args.mode:
        extra["eval.mode"] = args.mode
    cfg = _config(args, **extra)
    model = load_checkpoint(args.ckpt)
    if not isinstance(model, SpeechRecognizer):
        raise UsageError(f"{args.ckpt} holds a {model.kind} model, not a recognizer")
    out = _out_dir(args.out)
    write_resolved_config(cfg.model_copy(update={"model": model.config}), out)
    result = evaluate_split(model, args.data, cfg.eval, cfg.train.frame_budget, model.variant.label, model.seed)
    paths = write_eval_report(result.report, out)
    console.print(paths["txt"].read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    workers = args.workers or get_settings().WORKERS
    result = ablate(cfg, args.data, _out_dir(args.out), seeds=args.seeds, workers=workers, enc_ckpt=args.enc_ckpt, dec_ckpt=args.dec_ckpt)
    console.print(render_text(result.matrix, f"median WER over {len(result.seeds)} seeds"))
    console.print(render_text(result.deltas, "relative improvement (%)"))
    console.print(render_text(criteria_frame(result.criteria), "directional checks"))
    return result.exit_code


def cmd_count_params(args: argparse.Namespace) -> int:
    cfg: ModelConfig = ModelConfig.large_scale() if args.large_scale else _config(args).model
    per_lang = count_language_params(cfg)
    console.print(f"per language: adapters {per_lang.adapter_per_lang:,}, factorized {per_lang.factorized_per_lang:,}")
    if args.large_scale:
        return EXIT_OK
    variants = [AblationVariant(args.variant)] if args.variant else list(LADDER)
    table = Table(title="parameters")
    for column in ("variant", "total", "shared", "adapter/lang", "factorized/lang", "pretrained", "trainable"):
        table.add_column(column, justify="right")
    for variant in variants:
        inv = parameter_inventory(cfg, variant)
        table.add_row(
            inv.variant,
            *(f"{v:,}" for v in (inv.total, inv.shared, inv.adapter_per_lang, inv.factorized_per_lang, inv.pretrained, inv.trainable)),
        )
    console.print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyadapt", description="Multilingual speech recognition ablations")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (defaults when omitted)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic multilingual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the acoustic encoder or the text decoder")
    p.add_argument("--kind", required=True, choices=PRETRAIN_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="fine-tune one ladder variant")
    p.add_argument("--variant", required=True, choices=[v.value for v in LADDER])
    p.add_argument("--data", required=True)
    p.add_argument("--enc-ckpt")
    p.add_argument("--dec-ckpt")
    p.add_argument("--rel-pos", action="store_true", help="relative positions in the acoustic encoder")
    p.add_argument("--stack", action="store_true", help="stack the pretrained text encoder on the acoustic encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="decode a split and report error rates")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--mode", choices=["greedy", "beam"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run every variant over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int)
    p.add_argument("--enc-ckpt")
    p.add_argument("--dec-ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", parents=[common], help="print the parameter inventory")
    p.add_argument("--variant", choices=[v.value for v in LADDER])
    p.add_argument("--large-scale", action="store_true")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    settings = get_settings()
    setup_logging(settings.LOG_DIR, settings.LOG_LEVEL)
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except NumericalAbort as exc:
        logger.error("numerical abort", extra={"fields": {"command": args.command, "step": exc.step}})
        console.print(f"error: {exc}", style="red", markup=False)
        return EXIT_NUMERICAL
    except (PolyadaptError, OSError) as exc:
        logger.error("command failed", extra={"fields": {"command": args.command, "error": str(exc)}})
        console.print(f"error: {exc}", style="red", markup=False)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
