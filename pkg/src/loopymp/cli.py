from __future__ import annotations
from typing import Dict, List, Optional, Sequence, Tuple

import argparse
import logging
import numpy as np

from loopymp.errors import (
    CapacityError,
    ConfigurationError,
    ParseError,
    TrainingDivergence,
)
from loopymp.experiments import (
    ALGORITHMS,
    cmd_channel_sweep,
    cmd_dump_mapping,
    cmd_ising_heatmap,
    cmd_ising_table,
    cmd_train,
    ExperimentConfig,
)
from loopymp.utils import version_string

__all__ = ["build_parser", "main", "parse_ebno", "parse_models"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_COMMANDS = {
    "ising-table": cmd_ising_table,
    "heatmap": cmd_ising_heatmap,
    "dump-mapping": cmd_dump_mapping,
    "train": cmd_train,
    "channel-sweep": cmd_channel_sweep,
}


def parse_ebno(text: str) -> Tuple[float, ...]:
    """Parse ``start:step:stop`` (inclusive) or a comma separated list."""
    try:
        if ":" in text:
            start, step, stop = (float(p) for p in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            return tuple(float(start + k * step) for k in range(count))
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"Expected start:step:stop or a comma separated list, got {text!r}."
        ) from None


def parse_models(entries: Sequence[str], algos: Sequence[str]) -> Dict[str, str]:
    """Map ``algo=path`` entries to a dictionary.

    A bare path is accepted when exactly one neural algorithm is selected.
    """
    neural = [a for a in algos if a in ("cycbp_e", "cycbp")]
    models = {}
    for entry in entries:
        algo, sep, path = entry.partition("=")
        if not sep:
            if len(neural) != 1:
                raise ConfigurationError(
                    f"Model {entry!r} needs an algo= prefix with these algorithms."
                )
            algo, path = neural[0], entry
        if algo not in ALGORITHMS:
            raise ConfigurationError(f"Unknown algorithm {algo!r} in --model.")
        models[algo] = path
    return models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopymp",
        description="Belief propagation, CCCP and learned message passing experiments.",
    )
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--num-graphs", type=int, default=None)
    parser.add_argument("--s", type=float, default=2.0, help="spin glass range [-s, s]")
    parser.add_argument("--grid", type=int, default=41)
    parser.add_argument("--ebno", type=parse_ebno, default=parse_ebno("2:2:14"))
    parser.add_argument("--algos", default="spa", help="comma separated, e.g. spa,cccp")
    parser.add_argument(
        "--model", action="append", default=[], metavar="ALGO=PATH"
    )
    parser.add_argument("--out", default=None)
    parser.add_argument("--mu", type=float, default=0.1)
    parser.add_argument("--alpha", type=float, default=25.0)
    parser.add_argument("--iterations", type=int, default=10)
    parser.add_argument("--loss", choices=["kl", "bethe", "bmi"], default="kl")
    parser.add_argument(
        "--mode", choices=["extrinsic", "non_extrinsic"], default="non_extrinsic"
    )
    parser.add_argument("--task", choices=["ising", "channel"], default="ising")
    parser.add_argument("--restarts", type=int, default=5)
    parser.add_argument("--steps", type=int, default=20000)
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--chunk-size", type=int, default=1000)
    parser.add_argument("--workers", type=int, default=1)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    algos = tuple(a.strip() for a in args.algos.split(",") if a.strip())
    if args.command == "dump-mapping":
        algos = ("cycbp_e",)
    num_graphs = args.num_graphs
    if num_graphs is None:
        num_graphs = 100000 if args.command == "channel-sweep" else 10000

    return ExperimentConfig(
        command=args.command,
        seed=args.seed,
        num_graphs=num_graphs,
        s=args.s,
        grid=args.grid,
        ebno=args.ebno,
        algos=algos,
        models=parse_models(args.model, algos),
        out=args.out,
        mu=args.mu,
        alpha=args.alpha,
        iterations=args.iterations,
        loss=args.loss,
        mode=args.mode,
        task=args.task,
        restarts=args.restarts,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        workers=args.workers,
        chunk_size=args.chunk_size,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )

    try:
        cfg = _config(args)
        _COMMANDS[cfg.command](cfg)
    except TrainingDivergence as e:
        for outcome in e.report:
            logger.error(
                "restart %d (seed %d) diverged after %d steps",
                outcome.restart + 1,
                outcome.seed,
                outcome.steps_run,
            )
        logger.error("%s", e)
        return EXIT_DIVERGED
    except (ConfigurationError, ParseError, CapacityError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG

    return EXIT_OK
