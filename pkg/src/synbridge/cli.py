"""``synbridge`` command line: one subcommand per pipeline stage.

Failures print a single ``ERROR <Category>: message`` line on stderr and exit
with status 2 (1 for unexpected internal errors).
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import SynBridgeError
from .pipeline import Pipeline, format_sweep

COMMANDS = ("synth-data", "distill", "mine", "bridge", "fuse", "eval", "sweep-alpha", "dump-weights")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: bundled synthetic config)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--workers", type=int, default=1, help="evaluation threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="synbridge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def run(args) -> str:
    config = load_config(args.config, args.overrides, args.seed)
    pipe = Pipeline(config)
    cmd = args.command
    if cmd == "synth-data":
        paths = pipe.synth_data()
        return f"wrote synthetic banks under {paths['student_visual'].parent}"
    if cmd == "distill":
        return f"wrote {pipe.distill()}"
    if cmd == "mine":
        out = pipe.mine()
        return f"wrote {out} ({pipe.last_provider_requests} provider requests)"
    if cmd == "bridge":
        return f"wrote {pipe.bridge()}"
    if cmd == "fuse":
        return f"wrote {pipe.fuse()}"
    if cmd == "eval":
        report, out = pipe.evaluate(workers=args.workers)
        lines = [f"fused: {report.mean_acc:.2f} +- {report.ci95:.2f}"]
        for key in sorted(report.baselines):
            acc, ci = report.summary(key)
            lines.append(f"{key}: {acc:.2f} +- {ci:.2f}")
        return "\n".join([f"wrote {out}", *lines])
    if cmd == "sweep-alpha":
        rows, out = pipe.sweep_alpha(workers=args.workers)
        return f"wrote {out}\n" + format_sweep(rows).rstrip()
    if cmd == "dump-weights":
        paths = pipe.dump_weights()
        return "\n".join(f"wrote {p}" for p in paths.values())
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        print(run(args))
    except SynBridgeError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"ERROR {exc.category}: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"ERROR Internal: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
