"""Command-line entry point: ``revlearn run | bench-memory | verify``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import artifacts, config


def _cmd_run(args) -> int:
    from .experiments import run
    try:
        cfg = config.load(args.config)
    except (config.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.output_dir or cfg.output_dir
    results = run(cfg, out)
    print(f"{cfg.experiment}: wrote results to {out}")
    for key, value in sorted(results["metrics"].items()):
        print(f"  {key}: {value}")
    return 0


def _cmd_bench(args) -> int:
    from .experiments import bench_memory
    from .revbuf import Ratio
    rows = []
    for text in args.gamma:
        try:
            Ratio.parse(text)
        except ValueError as exc:
            print(f"bad --gamma {text!r}: {exc}", file=sys.stderr)
            return 2
        rows.append(bench_memory(text, args.steps, args.elements, args.seed).as_row())
    sys.stdout.write(artifacts.dumps_csv("memory", rows))
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_checks
    checks = run_checks(args.only)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name} ({c.seconds:.1f}s): {c.detail}")
    return 0 if checks and all(c.passed for c in checks) else 1


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revlearn",
                                description="Hypergradients through exactly reversible SGD.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override the config's output_dir")
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bench-memory", help="buffer bits per step for momentum decay n/d")
    b.add_argument("--gamma", action="append", required=True,
                   help="decay as n/d; repeat for several")
    b.add_argument("--steps", type=_positive, default=10000)
    b.add_argument("--elements", type=_positive, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=_cmd_bench)

    v = sub.add_parser("verify", help="run the oracle-agreement checks")
    v.add_argument("--only", action="append", help="run only the named check")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
