"""Command-line front end for the pipeline stages.

Failures print one line ``error: <category>: <message>`` to stderr and
exit nonzero; the category is one of ``config``, ``io``, ``format``,
``dataset``, ``ordering`` or ``value``.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional

from . import encoder as enc
from . import pipeline as P
from .scan_model import FormatError
from .synth import PlacementError
from .track_assoc import OrderingError

EXIT_CODES = {"config": 2, "io": 3, "format": 4, "dataset": 5, "ordering": 6, "value": 7}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides pipeline.seed)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--quiet", action="store_true")

    ap = argparse.ArgumentParser(prog="polespl", description="Small-pole landmark recognition pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a world and two traversal sessions")
    p.add_argument("--world-seed", type=int, help="pin the pole layout independently of --seed")
    p.add_argument("--text", action="store_true", help="write text sessions instead of binary")

    for name, what in (("detect", "pole detections CSV"), ("track", "tracks CSV")):
        p = sub.add_parser(name, parents=[common], help=f"write a {what} for a session")
        p.add_argument("session")

    p = sub.add_parser("build-dataset", parents=[common], help="detect, track and rasterise sessions")
    p.add_argument("sessions", nargs="+")

    p = sub.add_parser("train", parents=[common], help="train an encoder on a manifest")
    p.add_argument("manifest")
    p.add_argument("--objective", choices=("cl", "sl"), help="overrides train.objective")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    p = sub.add_parser("eval", parents=[common], help="cross-session retrieval report")
    p.add_argument("checkpoint")
    p.add_argument("--reference", required=True, help="reference-session manifest (database)")
    p.add_argument("--query", required=True, help="query-session manifest")
    p.add_argument("--bins", help='range bins, e.g. "[0,5],(5,10],(10,inf)"')
    p.add_argument("--method", help="label used in reports (default: from checkpoint name)")
    return ap


def _overrides(args) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise P.ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    if args.seed is not None:
        out["pipeline.seed"] = str(args.seed)
    if getattr(args, "world_seed", None) is not None:
        out["pipeline.world_seed"] = str(args.world_seed)
    if getattr(args, "objective", None) is not None:
        out["train.objective"] = args.objective
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = str(args.epochs)
    if getattr(args, "bins", None) is not None:
        out["retrieval.bins"] = args.bins
    return out


def _run(args) -> List[str]:
    cfg = P.load_config(args.config, _overrides(args))
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    if args.command == "synth":
        paths = P.run_synth(cfg, args.out, binary=not args.text)
        return [paths["world"], paths["train"], paths["test"]]
    if args.command == "detect":
        return [P.run_detect(args.session, cfg, args.out)]
    if args.command == "track":
        return [P.run_track(args.session, cfg, args.out)]
    if args.command == "build-dataset":
        return P.run_build_dataset(args.sessions, cfg, args.out)
    if args.command == "train":
        ckpt, loss_csv, _ = P.run_train(args.manifest, cfg, args.out, log=log)
        return [ckpt, loss_csv]
    if args.command == "eval":
        js, cs, _ = P.run_eval(args.checkpoint, args.reference, args.query, cfg, args.out, method=args.method)
        return [js, cs]
    raise AssertionError(args.command)


def _category(exc: BaseException) -> str:
    if isinstance(exc, P.ConfigError):
        return "config"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, (enc.DatasetError, enc.LabelError, PlacementError)):
        return "dataset"
    if isinstance(exc, OrderingError):
        return "ordering"
    if isinstance(exc, OSError):
        return "io"
    return "value"


def _message(exc: BaseException) -> str:
    if isinstance(exc, OSError) and exc.filename is not None and exc.strerror:
        return f"{exc.strerror}: {os.fspath(exc.filename)}"
    return " ".join(str(exc).split())


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        written = _run(args)
    except (OSError, ValueError) as exc:
        cat = _category(exc)
        print(f"error: {cat}: {_message(exc)}", file=sys.stderr)
        return EXIT_CODES[cat]
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
