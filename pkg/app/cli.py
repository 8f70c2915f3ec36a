import argparse
import asyncio
import json
import logging
import os
import sys
from typing import List, Optional

from .config import settings
from .constants import CORPUS_RECIPES, EXPERIMENT_KINDS
from .exceptions import PreflightError
from .logging_config import setup_logging
from .models import CorpusRecipe, ExperimentConfig, GridSpec
from .report_service import emit_report
from .services import corpus_summary, generate_corpus, run_experiment, verify_invariants

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lp-lab", description="Numerical checks of multi-parameter Littlewood-Paley estimates.")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run one experiment and write its report.")
    run.add_argument("--kind", choices=EXPERIMENT_KINDS, default=None, help="Overrides the kind in the config.")
    run.add_argument("--config", default=None, help="Path to a JSON ExperimentConfig.")
    run.add_argument("--seed", type=int, default=None, help="Overrides the corpus seed.")
    run.add_argument("--out", default=None, help="Output directory.")
    run.add_argument("--format", dest="formats", action="append", choices=("json", "csv"), help="Repeatable; default both.")

    verify = commands.add_parser("verify-invariants", help="Run the preflight invariant suites.")
    verify.add_argument("--module", dest="modules", action="append", default=None, help="Repeatable; default all suites.")

    corpus = commands.add_parser("corpus", help="Generate a corpus and print its per-fixture summary.")
    corpus.add_argument("--recipe", choices=CORPUS_RECIPES, required=True)
    corpus.add_argument("--levels", type=int, nargs="+", default=[7, 7], help="Per-axis log2 resolution.")
    corpus.add_argument("--count", type=int, default=8)
    corpus.add_argument("--vector-shape", type=int, nargs="*", default=[])
    corpus.add_argument("--max-frequency", type=int, default=16)
    corpus.add_argument("--seed", type=int, default=0)
    corpus.add_argument("--out", default=None, help="Also write corpus.json here.")
    return parser


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as handle:
        return ExperimentConfig.model_validate_json(handle.read())


def _run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    kind = args.kind or config.kind
    if kind is None:
        raise ValueError("no experiment kind: pass --kind or set 'kind' in the config")
    out_dir = args.out or config.output_dir or os.path.join(settings.OUTPUT_DIR, kind)

    report = asyncio.run(run_experiment(kind, config))
    emit_report(report, out_dir, args.formats or ("json", "csv"))
    print(json.dumps({"out": out_dir, "max_ratio": report.max_ratio, "growth": report.growth, "stable": report.stable}))
    return 0


def _verify(args: argparse.Namespace) -> int:
    results = verify_invariants(args.modules)
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'}  {result.name}: {result.detail}")
    return 0 if all(r.passed for r in results) else 1


def _corpus(args: argparse.Namespace) -> int:
    recipe = CorpusRecipe(
        name=args.recipe, count=args.count, vector_shape=tuple(args.vector_shape), max_frequency=args.max_frequency
    )
    rows = corpus_summary(generate_corpus(recipe, args.seed, GridSpec(levels=tuple(args.levels))))
    text = json.dumps(rows, sort_keys=True, indent=2)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "corpus.json"), "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    print(text)
    return 0


COMMANDS = {"run": _run, "verify-invariants": _verify, "corpus": _corpus}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the exit code (2 for bad input, 1 for a failed preflight)."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except PreflightError as e:
        logger.error(f"Aborted: {e}")
        print(f"lp-lab: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        logger.warning(f"Bad input: {e}")
        print(f"lp-lab: {e}", file=sys.stderr)
        return 2
