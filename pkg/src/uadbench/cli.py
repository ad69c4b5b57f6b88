"""Command line front-end: ``uadbench <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Errors are printed as a single JSON line on stderr, e.g.
``{"error": "invalid_config", "message": "..."}``, with exit code 2 for
usage/config problems and 1 for everything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import bench
from .errors import InvalidConfig, UADError

DEMO_CONFIG = "demo.yaml"


def _load_cfg(args):
    if args.config:
        cfg = bench.load_config(args.config)
    else:
        text = resources.files("uadbench").joinpath(DEMO_CONFIG).read_text()
        import yaml

        cfg = bench.parse_config(yaml.safe_load(text))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, Path(args.out or cfg.out)


def cmd_synth(args):
    cfg, out = _load_cfg(args)
    root = bench.synthesize(cfg, out)
    print(root)


def _selected(cfg, args):
    cells = cfg.cells
    if args.method:
        cells = [c for c in cells if c[0].value in args.method]
        if not cells:
            raise InvalidConfig(f"no configured cells for method(s) {', '.join(args.method)}")
    return cells


def cmd_train(args):
    cfg, out = _load_cfg(args)
    done = set()
    for tag, _, fraction in _selected(cfg, args):
        if (tag, fraction) in done:
            continue
        done.add((tag, fraction))
        print(bench.train_cell(cfg, out, tag, fraction))


def cmd_score(args):
    cfg, out = _load_cfg(args)
    for tag, scorer, fraction in _selected(cfg, args):
        ckpt = bench.train_cell(cfg, out, tag, fraction)
        paths = bench.score_cell(cfg, out, tag, scorer, fraction, ckpt)
        print(f"{bench.cell_name(tag, scorer, fraction)}: {len(paths)} score volumes")


def cmd_evaluate(args):
    cfg, out = _load_cfg(args)
    for tag, scorer, fraction in _selected(cfg, args):
        for p in bench.evaluate_cell(cfg, out, tag, scorer, fraction):
            print(p)


def cmd_run(args):
    cfg, out = _load_cfg(args)
    print(bench.run_experiment(cfg, out))


def cmd_report(args):
    cfg, out = _load_cfg(args)
    for p in bench.emit_report(out):
        print(p)


COMMANDS = {
    "synth": (cmd_synth, "generate phantom datasets and splits"),
    "train": (cmd_train, "train (or reuse cached) models"),
    "score": (cmd_score, "write score volumes for the test sets"),
    "evaluate": (cmd_evaluate, "compute per-cell evaluation results"),
    "run": (cmd_run, "full matrix: synth, train, score, evaluate, report"),
    "report": (cmd_report, "write CSV tables and plots from stored results"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (default: bundled demo)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="results directory (default: config 'out')")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="uadbench", parents=[common],
                                     description="Unsupervised anomaly segmentation benchmark")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name in ("train", "score", "evaluate"):
            p.add_argument("--method", action="append", help="restrict to a method tag (repeatable)")
    return parser


def _fail(category, message, code):
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage
        if exc.code not in (0, None):
            return _fail("usage", "invalid command line", 2)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except InvalidConfig as exc:
        return _fail(exc.category, str(exc), 2)
    except UADError as exc:
        return _fail(exc.category, str(exc), 1)
    except OSError as exc:
        return _fail("io_error", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
