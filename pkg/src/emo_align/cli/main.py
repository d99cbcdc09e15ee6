"""``emo-align`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Errors are printed to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..alignment import ModeError
from ..model.checkpoint import CheckpointError
from .config import ConfigError, load_config
from .pipeline import SUITES, RuntimeFailure, cmd_datagen, cmd_eval, cmd_train, run_lock
from .report import cmd_report

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emo-align", description="Synthetic-world speech-language alignment pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="train or reuse the teacher LM and write the corpora")
    d.add_argument("config", type=Path)

    t = sub.add_parser("train", help="run stage 1 or stage 2")
    t.add_argument("config", type=Path)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--mode", help="training mode; stage 2 defaults to the config's mode")
    t.add_argument("--init", type=Path, help="stage-1 checkpoint to start stage 2 from")

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("config", type=Path)
    e.add_argument("--suite", choices=SUITES, required=True)
    e.add_argument("--checkpoint", type=Path, action="append", required=True,
                   help="repeat twice for the winrate suite")

    r = sub.add_parser("report", help="summarise a run directory into summary.txt")
    r.add_argument("run_dir", type=Path)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "report":
            print(cmd_report(args.run_dir), end="")
            return EXIT_OK
        cfg = load_config(args.config)
    except (ConfigError, ModeError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    log = lambda msg: print(msg, file=sys.stderr, flush=True)
    try:
        for d in (cfg.paths.corpus_dir, cfg.paths.checkpoint_dir, cfg.paths.run_dir):
            d.mkdir(parents=True, exist_ok=True)
        with run_lock(cfg.paths.run_dir):
            if args.command == "datagen":
                cmd_datagen(cfg, log)
            elif args.command == "train":
                m = cmd_train(cfg, args.stage, args.mode, args.init, log)
                print(cfg.paths.checkpoint_dir / m["artifacts"]["checkpoint"]["path"])
            else:
                print(cmd_eval(cfg, args.suite, args.checkpoint, log))
    except (ConfigError, ModeError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (RuntimeFailure, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
