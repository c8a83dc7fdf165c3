"""Command line entry point.

    freeadv run <config>
    freeadv eval <checkpoint> <config>
    freeadv surface <checkpoint> <config>
    freeadv ledger <manifest>

``FREEADV_OUT`` overrides the config's output directory. Exit status is 0 on
success; failures print a single JSON line to stderr, e.g.
``{"error": "config", "key": "data.train_images", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError
from .data import DataFormatError
from .harness import LedgerMismatch, check_manifest, eval_checkpoint, run_experiment, surface_checkpoint
from .training import TrainingError

OUT_ENV = "FREEADV_OUT"

# exception type -> (error kind, exit status); first match wins
ERRORS = (
    (ConfigError, "config", 2),
    (DataFormatError, "data", 4),
    (OSError, "io", 3),
    (LedgerMismatch, "ledger", 5),
    (TrainingError, "training", 6),
    (ValueError, "invalid", 1),
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freeadv", description="Free adversarial training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train, evaluate and write all artifacts")
    run.add_argument("config")
    for name, text in (("eval", "evaluate a checkpoint"), ("surface", "write loss-surface grids")):
        c = sub.add_parser(name, help=text)
        c.add_argument("checkpoint")
        c.add_argument("config")
    led = sub.add_parser("ledger", help="check a run manifest against the cost model")
    led.add_argument("manifest")
    return p


def _fail(exc: BaseException) -> int:
    for cls, kind, status in ERRORS:
        if isinstance(exc, cls):
            break
    else:
        kind, status = "internal", 1
    msg = {"error": kind, "message": " ".join(str(exc).split())}
    if getattr(exc, "key", None):
        msg["key"] = exc.key
    if isinstance(exc, OSError) and exc.filename:
        msg["path"] = str(exc.filename)
    print(json.dumps(msg), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = os.environ.get(OUT_ENV) or None
    try:
        if args.command == "run":
            res = run_experiment(args.config, out_dir=out)
            print(f"wrote {res.out_dir}")
            print(res.report.to_csv(), end="")
        elif args.command == "eval":
            print(eval_checkpoint(args.checkpoint, args.config, out_dir=out).to_csv(), end="")
        elif args.command == "surface":
            for path in surface_checkpoint(args.checkpoint, args.config, out_dir=out):
                print(path)
        else:
            check = check_manifest(args.manifest)
            print(check.message)
            check.raise_if_failed()
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
