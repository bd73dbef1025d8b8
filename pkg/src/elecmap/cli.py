"""Command-line entry point: ``elecmap <stage> [args] [--config ...]``.

Exit codes: 0 success, 2 missing inputs or bad configuration, 3 validation
failure (split check failed, no eligible tiles, invalid labels).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .config import ConfigFileError, PipelineConfig, load_config
from .models import ConfigError, TrainingError, make_tasks
from .splits import SPLITS, ProtocolError

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_VALIDATION = 3

logger = logging.getLogger("elecmap")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--workdir", help="override the configured working directory")
    common.add_argument("--limit-tiles", type=int, help="process at most this many tiles (smoke runs)")
    common.add_argument("--force", action="store_true", help="rerun even when outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="elecmap", description="Electrification mapping pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic region")
    sub.add_parser("tile", parents=[common], help="cut scenes into grid tiles")
    sub.add_parser("label", parents=[common], help="build per-tile labels")
    sub.add_parser("split", parents=[common], help="assign train/val/test splits")
    t = sub.add_parser("train", parents=[common], help="train one task")
    t.add_argument("task", choices=sorted(make_tasks()))
    e = sub.add_parser("evaluate", parents=[common], help="evaluate one task on one split")
    e.add_argument("task", choices=sorted(make_tasks()))
    e.add_argument("split", choices=SPLITS)
    sub.add_parser("baseline", parents=[common], help="nighttime-lights baseline comparison")
    r = sub.add_parser("report", parents=[common], help="assemble tables and county plots")
    r.add_argument("--no-plots", action="store_true")
    sub.add_parser("run", parents=[common], help="every stage for the configured tasks, in order")
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workdir is not None:
        cfg.workdir = args.workdir
    if args.limit_tiles is not None:
        if args.limit_tiles < 1:
            raise ConfigFileError("--limit-tiles must be positive")
        cfg.limit_tiles = args.limit_tiles
    return cfg


def _plan(args, cfg: PipelineConfig) -> list[tuple[str, callable]]:
    cmd = args.command
    if cmd == "synth":
        return [("synth", pl.stage_synth)]
    if cmd == "tile":
        return [("tile", pl.stage_tile)]
    if cmd == "label":
        return [("label", pl.stage_label)]
    if cmd == "split":
        return [("split", pl.stage_split)]
    if cmd == "train":
        return [(f"train:{args.task}", lambda ws: pl.stage_train(ws, args.task))]
    if cmd == "evaluate":
        return [(f"evaluate:{args.task}:{args.split}", lambda ws: pl.stage_evaluate(ws, args.task, args.split))]
    if cmd == "baseline":
        return [("baseline", pl.stage_baseline)]
    if cmd == "report":
        return [("report", lambda ws: pl.stage_report(ws, plots=not args.no_plots))]
    if cmd == "run":
        return pl.full_plan(cfg)
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        ws = pl.Workspace(cfg)
        with ws.lock():
            for stage, fn in _plan(args, cfg):
                if not args.force and stage != "report" and ws.up_to_date(stage):
                    logger.info("stage %s is up to date; skipping (use --force to rerun)", stage)
                    continue
                logger.info("running stage %s", stage)
                m = fn(ws)
                logger.info("stage %s done: %s", stage, m["summary"])
    except (pl.PreconditionError, ConfigFileError, ConfigError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_PRECONDITION
    except (pl.ValidationError, ProtocolError, TrainingError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
