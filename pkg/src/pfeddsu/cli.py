"""Command-line entry point: ``simulate``, ``privacy`` and ``calibrate``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import PRESETS, ConfigError, parse_config
from .harness import run_experiment
from .privacy import CalibrationError, PrivacyError, calibrate_sigma, epsilon_after

OUT_ENV = "PFEDDSU_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfeddsu", description="Differentially private personalized FL simulator")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run an experiment grid")
    s.add_argument("--config", help="YAML or JSON spec file (omit for defaults)")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--seeds", type=int, help="use seeds 0..n-1")
    s.add_argument("--force", action="store_true", help="rerun cells that already have results")
    s.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./results)")
    s.add_argument("--workers", type=int, default=1)

    q = sub.add_parser("privacy", help="epsilon after T rounds of the subsampled Gaussian")
    q.add_argument("--q", type=float, required=True)
    q.add_argument("--sigma", type=float, required=True)
    q.add_argument("--rounds", type=int, required=True)
    q.add_argument("--delta", type=float, default=1e-5)

    c = sub.add_parser("calibrate", help="smallest grid sigma meeting an epsilon target")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, default=1e-5)
    c.add_argument("--q", type=float, required=True)
    c.add_argument("--rounds", type=int, required=True)
    return p


def _simulate(args) -> int:
    try:
        spec = parse_config(args.config, args.override, args.preset)
        if args.seeds is not None:
            if args.seeds < 1:
                raise ConfigError(f"--seeds={args.seeds} is invalid: must be >= 1")
            spec = spec.with_seeds(args.seeds)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get(OUT_ENV) or "results"
    records = run_experiment(spec, out, force=args.force, workers=args.workers)
    for r in records:
        print(f"{r.status:6s} {r.label:40s} acc={r.accuracy_mean:.4f}±{r.accuracy_std:.4f} "
              f"eps={r.privacy.get('epsilon', float('nan')):.4f}  {r.path}")
    return EXIT_RUN if any(r.failed for r in records) else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return _simulate(args)
    try:
        if args.command == "privacy":
            eps, order = epsilon_after(args.q, args.sigma, args.rounds, args.delta)
            print(json.dumps({"q": args.q, "sigma": args.sigma, "rounds": args.rounds,
                              "delta": args.delta, "epsilon": eps, "best_order": order}))
        else:
            sigma = calibrate_sigma(args.epsilon, args.delta, args.q, args.rounds)
            eps, order = epsilon_after(args.q, sigma, args.rounds, args.delta)
            print(json.dumps({"sigma": sigma, "epsilon": eps, "best_order": order}))
    except CalibrationError as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        return EXIT_RUN
    except (PrivacyError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
