"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data/configuration error, 3 a report
acceptance check failed.  Every subcommand takes the same global flags
and writes under ``--out`` (one subdirectory per stage), so a full
experiment is::

    viclab gen --out runs
    viclab estimate --out runs
    viclab estimate --mode sweep --out runs
    viclab estimate --mode unknown --out runs
    viclab estimate --mode critical --out runs
    viclab train --out runs
    viclab predict --out runs
    viclab simulate --out runs
    viclab report --out runs
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipelines as pl
from . import report as rpt
from .errors import ConfigurationError, ViclabError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ACCEPTANCE = 3

# estimator-mode -> stage directory under the run root
MODE_DIRS = {
    "known": "estimate_known",
    "sweep": "estimate_sweep",
    "unknown": "estimate_unknown",
    "critical": "estimate_critical",
}

# the critical mode needs a critically damped dataset; it reads/writes its
# own dataset directory so the main dataset keeps constant damping
CRITICAL_DATASET = "dataset_critical"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_globals(ap, suppress=False):
    default = argparse.SUPPRESS if suppress else None
    ap.add_argument("--config", metavar="PATH", default=default,
                    help="JSON config merged over the built-in defaults")
    ap.add_argument("--seed", metavar="U64", type=int, default=default,
                    help="override the config RNG seed")
    ap.add_argument("--out", metavar="DIR", default=default,
                    help="run root directory (default from config)")
    ap.add_argument("--jobs", metavar="N", type=int,
                    default=argparse.SUPPRESS if suppress else 1,
                    help="parallel workers for independent units")


def build_parser():
    ap = _Parser(prog="viclab", description=__doc__.split("\n\n")[0])
    _add_globals(ap)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        # accepted after the subcommand as well; only set when given
        _add_globals(p, suppress=True)
        return p

    add("gen", "generate the demonstration dataset")
    p_est = add("estimate", "run estimation over the dataset")
    p_est.add_argument("--mode", choices=sorted(MODE_DIRS), default=None,
                       help="override estimator.mode from the config")
    add("train", "fit the kernel stiffness model")
    p_pred = add("predict", "predict stiffness along a demo")
    p_pred.add_argument("--demo", type=int, default=None,
                        help="dataset index to predict on")
    add("simulate", "run the controller grid")
    add("report", "aggregate tables, figures, and verdicts")
    return ap


def _dataset_for(cfg, root, mode):
    """The critical mode generates its own critically damped dataset."""
    if mode != "critical":
        return root / "dataset"
    path = root / CRITICAL_DATASET
    if not any(path.glob("demo_*.csv")):
        ccfg = pl.deep_merge(cfg, {
            "seed": int(cfg["seed"]) + 1,
            "demogen": {
                "damping": {
                    "type": "critical",
                    "zeta": cfg["estimator"]["zeta"],
                },
            },
        })
        pl.generate_dataset(ccfg, path)
    return path


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = pl.load_config(args.config, seed=args.seed, out=args.out)
        root = Path(cfg["out"])
        jobs = max(1, args.jobs)
        if args.command == "gen":
            paths = pl.generate_dataset(cfg, root / "dataset", jobs=jobs)
            print(f"wrote {len(paths)} demonstrations under {root / 'dataset'}")
        elif args.command == "estimate":
            if args.mode is not None:
                cfg["estimator"]["mode"] = args.mode
            mode = cfg["estimator"]["mode"]
            if mode not in MODE_DIRS:
                raise ConfigurationError(f"unknown estimator mode {mode!r}")
            dataset = _dataset_for(cfg, root, mode)
            out = pl.run_estimation(cfg, root / MODE_DIRS[mode], dataset,
                                    jobs=jobs)
            print(f"estimation ({mode}) written under {out}")
        elif args.command == "train":
            model = pl.train_model(cfg, root / "model",
                                   root / "estimate_known", root / "dataset")
            print(f"model written to {model}")
        elif args.command == "predict":
            if args.demo is not None:
                cfg["stiffmodel"]["predict_demo"] = args.demo
            out = pl.predict_model(cfg, root / "predict",
                                   root / "model" / "model.json",
                                   root / "dataset")
            print(f"predictions written to {out}")
        elif args.command == "simulate":
            summary = pl.run_simulations(cfg, root / "simulate", jobs=jobs)
            print(f"grid summary written to {summary}")
        elif args.command == "report":
            digest, checks = rpt.write_report(root)
            print(digest.read_text(), end="")
            n_fail = sum(c.status == "fail" for c in checks)
            if all(c.status == "absent" for c in checks):
                print("no completed stages found", file=sys.stderr)
                return EXIT_DATA
            if n_fail:
                return EXIT_ACCEPTANCE
    except ViclabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
