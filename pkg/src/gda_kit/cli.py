#!/usr/bin/env python3
"""
gda-kit CLI - train, grow, certify and inspect Grouped Differential Attention models.

Exit codes: 0 ok, 1 usage/config error, 2 runtime abort, 3 audit or gradcheck failure.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

from dotenv import load_dotenv

from . import __version__
from .accounting import allocation_table, lm_param_count
from .checkpoint import Checkpoint
from .config import PRESET_NOTES, GdaConfig, RunConfig, load_run_config, parse_config_text, preset
from .corpus import ingest
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    CorpusError,
    DimensionError,
    GdaError,
    PlanError,
    TokenRangeError,
    TrainingAbort,
)
from .gradcheck import DEFAULT_TOLERANCE, lm_toy_config, run_gradcheck, run_lm_gradcheck, toy_config
from .growth import apply_plan, make_plan, verify_preservation
from .inspection import dump_maps
from .logging_config import get_logger, setup_logging
from .reports import (
    ALLOC_HEADERS,
    FLOPS_HEADERS,
    allocation_rows,
    allocation_summary,
    flops_row,
    flops_summary,
    format_table,
    param_lines,
    write_csv,
    write_report,
)
from .training import eval_perplexity, train

log = get_logger("cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_AUDIT = 3

USAGE_ERRORS = (ConfigurationError, PlanError, CheckpointError, CorpusError, DimensionError, TokenRangeError)

DEFAULT_RATIOS = "1,2,3,5,11"


class GdaArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(summary: Dict[str, Any]) -> None:
    print(json.dumps(summary))


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def _existing_file(text: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return path


def _run_config(args: argparse.Namespace, require_train: bool = True) -> RunConfig:
    values = parse_config_text(args.config.read_text(encoding="utf-8"))
    if getattr(args, "f64", False):
        values["precision"] = "f64"
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return load_run_config(values, require_train=require_train)


def _corpus_paths(args: argparse.Namespace, run: RunConfig) -> List[str]:
    paths = list(args.corpus or []) or run.corpus
    if not paths:
        raise ConfigurationError("missing config key 'corpus'", key="corpus")
    return paths


# ==================== COMMANDS ====================

def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    corpus = ingest(
        _corpus_paths(args, run), seq_len=run.train.seq_len, seed=run.train.seed,
        separator=run.train.separator, holdout_frac=run.train.holdout_frac,
    )
    if args.ckpt:
        ckpt = Checkpoint.load(args.ckpt)
        if ckpt.config != run.lm:
            raise ConfigurationError("checkpoint config differs from the run config", key="config")
    else:
        ckpt = Checkpoint.initialize(run.lm, seed=run.train.seed)
    result = train(ckpt, corpus, run.train, args.out)
    _emit({
        "summary": "train",
        "steps": len(result.losses),
        "final_loss": result.losses[-1] if result.losses else None,
        "eval_ppl": result.eval_ppl,
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = _run_config(args, require_train=False)
    ckpt = Checkpoint.load(args.ckpt)
    corpus = ingest(
        _corpus_paths(args, run), seq_len=run.train.seq_len, seed=run.train.seed,
        separator=run.train.separator, holdout_frac=run.train.holdout_frac,
    )
    split = "holdout" if corpus.n_holdout else "train"
    windows = corpus.holdout() if corpus.n_holdout else corpus.train_windows(args.max_windows)
    ppl = eval_perplexity(ckpt, windows, run.train.batch_sequences)
    summary = {"summary": "eval", "perplexity": ppl, "split": split, "windows": len(windows), "step": ckpt.step}
    write_report(Path(args.out) / "eval.txt", [f"perplexity {ppl:.6f} over {len(windows)} {split} windows"], summary)
    _emit(summary)
    return EXIT_OK


def cmd_grow(args: argparse.Namespace) -> int:
    source = Checkpoint.load(args.ckpt)
    plan = make_plan(source.config, args.factor, args.target_ratio, noise_std=args.noise_std, seed=args.seed)
    grown = apply_plan(source, plan)
    out = Path(args.out)
    grown_path = grown.save(out / "grown.gda")

    audit = verify_preservation(source, grown, n_samples=args.samples, seed=args.seed, tol=args.tol)
    lines = audit.to_lines()
    header = [
        f"# mode={plan.mode} factor={plan.factor} replication={plan.replication}",
        f"# heads {source.config.gda.n_heads} -> {grown.config.gda.n_heads} "
        f"(signal {source.config.gda.n_signal} -> {grown.config.gda.n_signal}, "
        f"noise {source.config.gda.n_noise} -> {grown.config.gda.n_noise})",
        f"# params {lm_param_count(source.config)['total']} -> {lm_param_count(grown.config)['total']}",
    ]
    summary = json.loads(lines[-1])
    summary["checkpoint"] = str(grown_path)
    write_report(out / "audit.txt", header + lines[:-1], summary)
    _emit(summary)
    if not audit.passed:
        log.warning("audit_failed", max_diff=audit.max_logit_diff, tol=args.tol)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    precision = "f32" if args.f32 else "f64"
    lines: List[str] = []
    passed = True
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        reports = [run_gradcheck(toy_config(precision), seed=seed, tolerance=args.tol)]
        if args.lm:
            reports.append(run_lm_gradcheck(lm_toy_config(precision), seed=seed, tolerance=args.tol))
        for report in reports:
            report_lines = report.to_lines()
            lines.extend(report_lines[:-1])
            passed = passed and report.passed
            worst = max(worst, report.max_rel_error)
    for line in lines:
        print(line)
    summary = {
        "summary": "gradcheck", "seeds": args.seeds, "precision": precision,
        "tolerance": args.tol, "max_rel_error": worst, "pass": passed,
    }
    if args.out:
        write_report(Path(args.out) / "gradcheck.txt", lines, summary)
    _emit(summary)
    return EXIT_OK if passed else EXIT_AUDIT


def cmd_inspect(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    text = args.input.read_bytes()
    summaries = dump_maps(ckpt, text, args.out)
    _emit({
        "summary": "inspect",
        "layers": len(summaries),
        "lambdas": [s.lam for s in summaries],
        "out": str(args.out),
    })
    return EXIT_OK


def cmd_alloc(args: argparse.Namespace) -> int:
    ratios = args.ratio or args.ratios
    table = allocation_table(args.heads, ratios)
    rows = allocation_rows(table)
    lines = format_table(ALLOC_HEADERS, rows)
    summary = allocation_summary(table)
    out = Path(args.out)
    write_report(out / "alloc.txt", lines, summary)
    write_csv(out / "alloc.csv", ALLOC_HEADERS, rows)
    for line in lines:
        print(line)
    _emit(summary)
    return EXIT_OK


def _flops_configs(args: argparse.Namespace) -> List[GdaConfig]:
    if args.preset:
        return [preset(args.preset)]
    configs = []
    for row in allocation_table(args.heads, args.ratio or args.ratios):
        if row.valid:
            configs.append(GdaConfig(
                d_model=args.d_model, n_layers=1, n_heads=args.heads, ratio=row.ratio,
                d_head=args.d_head, n_kv=args.n_kv, max_seq_len=max(args.seq_len, 1),
            ))
    return configs


def cmd_flops(args: argparse.Namespace) -> int:
    ratios = args.ratio or args.ratios
    invalid = [] if args.preset else [r.ratio for r in allocation_table(args.heads, ratios) if not r.valid]
    try:
        configs = _flops_configs(args)
    except ValueError as exc:
        raise ConfigurationError(str(exc), key="n_kv") from exc
    rows = [flops_row(cfg, args.seq_len) for cfg in configs]
    lines = format_table(FLOPS_HEADERS, rows)
    if args.preset and args.preset in PRESET_NOTES:
        lines.append(f"# {args.preset}: {PRESET_NOTES[args.preset]}")
    for cfg in configs:
        lines.append(f"# per-layer parameters at {cfg.ratio}:1")
        lines.extend(param_lines(cfg))
    summary = flops_summary(rows, invalid, args.seq_len)
    out = Path(args.out)
    write_report(out / "flops.txt", lines, summary)
    write_csv(out / "flops.csv", FLOPS_HEADERS, rows)
    for line in lines:
        print(line)
    _emit(summary)
    return EXIT_OK


# ==================== PARSER ====================

def build_parser() -> GdaArgumentParser:
    parser = GdaArgumentParser(
        prog="gda-kit",
        description="Grouped Differential Attention toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Head allocation at H=48
  gda-kit alloc --heads 48 --ratios 1,2,3,5,11 --out reports/

  # Certify gradients over 10 seeds
  gda-kit gradcheck --seeds 10

  # Train, then grow to a 3:1 model twice as wide
  gda-kit train --config run.cfg --out runs/base
  gda-kit grow --ckpt runs/base/final.gda --factor 2 --target-ratio 3 --audit --out runs/grown
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Log level (default: $GDA_LOG_LEVEL or INFO)")
    parser.add_argument("--log-file", default=None, help="Also write logs to this file")
    parser.add_argument("--json-logs", action="store_true", help="Render logs as JSON")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=GdaArgumentParser)

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", type=_existing_file, required=True, help="key = value run config")
    p.add_argument("--ckpt", type=_existing_file, help="Resume from this checkpoint")
    p.add_argument("--corpus", action="append", help="Corpus file (repeatable; overrides the config)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--f64", action="store_true", help="64-bit model and training")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Perplexity of a checkpoint on the held-out slice")
    p.add_argument("--config", type=_existing_file, required=True, help="key = value run config")
    p.add_argument("--ckpt", type=_existing_file, required=True, help="Checkpoint to evaluate")
    p.add_argument("--corpus", action="append", help="Corpus file (repeatable; overrides the config)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--max-windows", type=int, default=64, help="Windows to score when nothing is held out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("grow", help="Grow a checkpoint and audit function preservation")
    p.add_argument("--ckpt", type=_existing_file, required=True, help="Source checkpoint")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--factor", type=int, default=2, help="Hidden-axis factor n (default: 2)")
    p.add_argument("--target-ratio", type=int, default=None,
                   help="Target G for group-differentiated growth (default: uniform HyperCloning)")
    p.add_argument("--audit", action="store_true", required=True, help="Run the preservation audit (required)")
    p.add_argument("--tol", type=float, default=1e-9, help="Max allowed |logit diff| (default: 1e-9)")
    p.add_argument("--samples", type=int, default=20, help="Random sequences in the audit (default: 20)")
    p.add_argument("--noise-std", type=float, default=0.0, help="Noise on cloned Q1/K1 columns (default: 0)")
    p.add_argument("--seed", type=int, default=0, help="Audit and clone-noise seed")
    p.set_defaults(handler=cmd_grow)

    p = sub.add_parser("gradcheck", help="Finite-difference certification of backward")
    p.add_argument("--seed", type=int, default=0, help="First seed (default: 0)")
    p.add_argument("--seeds", type=int, default=1, help="Number of consecutive seeds (default: 1)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE, help="Max relative error (default: 1e-4)")
    precision = p.add_mutually_exclusive_group()
    precision.add_argument("--f64", action="store_true", help="64-bit (the default)")
    precision.add_argument("--f32", action="store_true", help="32-bit; expected to miss 1e-4")
    p.add_argument("--lm", action="store_true", help="Also check the full language-model loss")
    p.add_argument("--out", default=None, help="Also write gradcheck.txt here")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("inspect", help="Dump attention maps, lambda and row sums")
    p.add_argument("--ckpt", type=_existing_file, required=True, help="Checkpoint to inspect")
    p.add_argument("--input", type=_existing_file, required=True, help="Text file to run through the model")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("alloc", help="Signal/noise head allocation table")
    p.add_argument("--heads", type=int, default=48, help="Total heads H (default: 48)")
    p.add_argument("--ratios", type=_int_list, default=_int_list(DEFAULT_RATIOS),
                   help=f"Comma-separated G values (default: {DEFAULT_RATIOS})")
    p.add_argument("--ratio", type=int, action="append", help="Single G (repeatable; overrides --ratios)")
    p.add_argument("--out", default=".", help="Output directory (default: .)")
    p.set_defaults(handler=cmd_alloc)

    p = sub.add_parser("flops", help="FLOP and parameter accounting per ratio")
    p.add_argument("--heads", type=int, default=48, help="Total heads H (default: 48)")
    p.add_argument("--ratios", type=_int_list, default=_int_list(DEFAULT_RATIOS),
                   help=f"Comma-separated G values (default: {DEFAULT_RATIOS})")
    p.add_argument("--ratio", type=int, action="append", help="Single G (repeatable; overrides --ratios)")
    p.add_argument("--d-model", type=int, default=1536, help="Model width (default: 1536)")
    p.add_argument("--d-head", type=int, default=32, help="Per-branch head width (default: 32)")
    p.add_argument("--n-kv", type=int, default=None, help="KV units (default: one per signal head)")
    p.add_argument("--seq-len", type=int, default=4096, help="Sequence length N (default: 4096)")
    p.add_argument("--preset", default=None, help="Use a named preset instead of --heads/--ratio")
    p.add_argument("--out", default=".", help="Output directory (default: .)")
    p.set_defaults(handler=cmd_flops)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(level=args.log_level, log_file=args.log_file, json=args.json_logs)
    try:
        return args.handler(args)
    except USAGE_ERRORS as exc:
        log.error("command_failed", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        log.error("training_aborted", step=exc.step, last_good=exc.last_good)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except GdaError as exc:
        log.error("command_failed", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
