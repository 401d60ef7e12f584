"""Command line entry point: ``dropout-gp {run,validate,report,fetch-data,preset}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
import argparse
import json
import os
import sys

import yaml

from . import experiments as ex
from .trainer import fetch_data

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(path):
    try:
        return ex.load_config(path)
    except (OSError, ex.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def cmd_run(args):
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    problems = ex.validate(cfg)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output:
        cfg.output_dir = args.output
    try:
        m = ex.run(cfg)
    except ex.StageError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"directory": m.directory, **m.to_dict()}, indent=1))
    return EXIT_OK


def cmd_validate(args):
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    problems = ex.validate(cfg)
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return EXIT_CONFIG if problems else EXIT_OK


def cmd_report(args):
    try:
        text = ex.report(args.dirs)
    except (OSError, ValueError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK


def cmd_fetch(args):
    try:
        print(fetch_data(args.url, args.dir, args.sha256))
    except (OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_preset(args):
    if args.kind not in ex.PRESETS:
        print(f"unknown kind {args.kind!r}; choose from {', '.join(ex.KINDS)}", file=sys.stderr)
        return EXIT_CONFIG
    print(yaml.safe_dump({"kind": args.kind, "seed": 0, **ex.PRESETS[args.kind]}, sort_keys=False))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dropout-gp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("config")
    r.add_argument("--output", help=f"output directory (default ${ex.OUTPUT_ENV}/<kind> or runs/<kind>)")
    r.set_defaults(fn=cmd_run)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)
    rp = sub.add_parser("report", help="summarize finished runs")
    rp.add_argument("dirs", nargs="*", default=[os.environ.get(ex.OUTPUT_ENV, "runs")])
    rp.add_argument("--output")
    rp.set_defaults(fn=cmd_report)
    f = sub.add_parser("fetch-data", help="download a dataset file with optional checksum")
    f.add_argument("url")
    f.add_argument("dir")
    f.add_argument("--sha256")
    f.set_defaults(fn=cmd_fetch)
    pr = sub.add_parser("preset", help="print the default config of an experiment kind")
    pr.add_argument("kind")
    pr.set_defaults(fn=cmd_preset)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
