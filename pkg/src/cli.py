"""
コマンドライン

    python -m src.cli run <config> [--out DIR] [--grid N] [--quiet]
    python -m src.cli sweep <config> --seeds A..B [--out DIR] [--grid N] [--quiet]

終了コード: 0 正常 / 1 設定エラー / 2 上界違反 / 3 実行時エラー
"""
import argparse
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import ValidationError

from src.config import settings
from src.engine import EngineError
from src.experiment import ConfigError, ExperimentConfig, load_config
from src.utils.analysis import BoundViolation, enforce
from src.utils.rulekit import DomainError
from src.worker import ExperimentWorker

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VIOLATION = 2
EXIT_RUNTIME = 3


def parse_seeds(text: str) -> Tuple[int, int]:
    """'A..B' または 'A' を (A, B) に"""
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", text)
    if not m:
        raise argparse.ArgumentTypeError(f"seeds must look like A..B: {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) is not None else lo
    if lo > hi:
        raise argparse.ArgumentTypeError(f"seed range must satisfy A <= B: {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dashboard-sim", description="Dashboard mechanism simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run one seeded experiment"), ("sweep", "run a seed range in a worker pool")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="experiment config (JSON path or bundled preset name)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--grid", type=int, default=None, help="value grid size (config file wins)")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")
        if name == "sweep":
            p.add_argument("--seeds", type=parse_seeds, default=None, help="seed range A..B (overrides config)")
            p.add_argument("--workers", type=int, default=None, help="worker processes")
    return parser


def _apply_flags(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    # 設定ファイルが優先。seeds と out だけはフラグが勝つ
    updates = {}
    if args.grid is not None and "grid" not in config.model_fields_set:
        updates["grid"] = args.grid
    if getattr(args, "seeds", None) is not None:
        updates["seeds"] = args.seeds
    if not updates:
        return config
    try:
        return ExperimentConfig.model_validate({**config.model_dump(mode="json"), **updates})
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}") from e


def _out_dir(config: ExperimentConfig, args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else Path(settings.OUTPUT_DIR) / config.name


def cmd_run(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out = _out_dir(config, args)
    worker = ExperimentWorker(str(out), workers=1)
    result = worker.run_one(config, config.seed, out)
    enforce(result.checks, config.seed)
    logger.info(f"Run {config.name} finished: max |B| {result.max_abs_balance:.6g}, outputs in {out}")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out = _out_dir(config, args)
    worker = ExperimentWorker(str(out), workers=args.workers)
    summary = worker.sweep(config, config.seed_list())
    if summary.errors:
        logger.error(f"Sweep {config.name}: {len(summary.errors)} runs aborted")
        return EXIT_RUNTIME
    if summary.violations:
        first = summary.violations[0]
        logger.error(
            f"Sweep {config.name}: {len(summary.violations)} runs violated a bound "
            f"(first: seed {first.seed}, max |B| {first.max_abs_balance:.6g} > {first.bound})"
        )
        return EXIT_VIOLATION
    if summary.chernoff_failed:
        logger.error(
            f"Sweep {config.name}: high-probability bound exceeded on "
            f"{summary.chernoff_fraction:.3%} of paths > delta {summary.delta}"
        )
        return EXIT_VIOLATION
    logger.info(f"Sweep {config.name} finished: {len(summary.results)} runs, outputs in {out}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else (logging.DEBUG if settings.DEBUG else logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )
    try:
        config = _apply_flags(load_config(args.config), args)
    except ConfigError as e:
        logger.error(f"Invalid config {args.config}: {e}")
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(config, args)
        return cmd_sweep(config, args)
    except BoundViolation as e:
        logger.error(f"Bound violated: {e}")
        return EXIT_VIOLATION
    except (EngineError, DomainError) as e:
        logger.error(f"Run aborted: {e}", exc_info=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
