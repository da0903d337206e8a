"""Command-line entry point.

Kept deliberately thin and free of numpy imports: --threads must pin the
BLAS/OpenMP environment variables before numpy first loads, so the real
command implementations are imported only inside main(). Errors exit
nonzero with one machine-parseable line on stderr
(``error: <ExceptionName>: <message>``).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, MhasError, UsageError

_COMMAND_HELP = {
    "synth": "generate a synthetic planted-signal dataset",
    "train": "train one model on a dataset with a held-out validation split",
    "eval": "score a checkpoint (or a predictions CSV) against labels",
    "cv": "nested cross-validation with a dropout-rate grid",
    "ablate": "nested CV once per attention-head count on shared folds",
    "attnmap": "export per-head attention weight maps for one bag",
    "filter-patches": "apply the purple-pixel tissue filter to patch rasters",
}

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhattnsurv",
        description="Multi-head attention survival models on patch-embedding bags.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMAND_HELP.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument(
            "--threads",
            type=int,
            default=None,
            help="pin BLAS/OpenMP thread count (1 for bit determinism)",
        )
        sp.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _pin_threads(n: int) -> None:
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            _pin_threads(args.threads)
        from . import commands  # deferred so the env pinning above precedes numpy

        return commands.run(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (MhasError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
