"""Command line entry point: ``proxylesskd run <config> --out <dir>``.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 I/O error,
1 anything else.
"""

import argparse
import logging
import sys

from .config import METHODS, parse_config
from .errors import ArgumentError, ConfigurationError, DivergenceError, ParseError, ProxylessKDError
from .runner import run_experiment

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _methods(text):
    items = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [x for x in items if x not in METHODS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"methods must be a comma list drawn from {', '.join(METHODS)}")
    return items


def build_parser():
    parser = argparse.ArgumentParser(prog="proxylesskd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="path to the sectioned key = value config")
    run.add_argument("--out", required=True, help="output directory for metrics, plot data and checkpoints")
    run.add_argument("--seed", type=int, default=None, help="run only this seed (overrides [run] seeds)")
    run.add_argument("--methods", type=_methods, default=None,
                     help="comma list from proxyless,l2kd,scratch (overrides [distill] methods)")
    return parser


def _fail(code, message):
    print(f"proxylesskd: error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = parse_config(args.config)
        cfg = cfg.with_overrides(seeds=None if args.seed is None else (args.seed,), methods=args.methods)
    except ParseError as exc:
        return _fail(EXIT_CONFIG, f"{args.config}: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read config: {exc}")
    try:
        doc = run_experiment(cfg, args.out)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, f"stage {getattr(exc, 'stage', '?')}: {exc}")
    except (ParseError, ArgumentError, ConfigurationError) as exc:
        return _fail(EXIT_CONFIG, f"stage {getattr(exc, 'stage', '?')}: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"stage {getattr(exc, 'stage', '?')}: {exc}")
    except ProxylessKDError as exc:
        return _fail(EXIT_OTHER, f"stage {getattr(exc, 'stage', '?')}: {exc}")
    summary = doc["summary"]
    for name, modes in summary.items():
        for mode, stats in modes.items():
            print(f"{name:10s} {mode:8s} verification {stats['verification_mean']:6.2f}%  "
                  f"rank-1 {stats['rank1_mean']:6.2f}%")
    print(f"wrote {len(doc['manifest'])} files to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
