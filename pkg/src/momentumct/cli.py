"""Command-line entry point: ``momentumct {simulate,train,reconstruct,evaluate}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .arrayio import ArrayFileError
from .config import ConfigError, load_config
from .geometry import GeometryError
from .momentum import LayerError
from .nn import VARIANTS, NumericalError
from .projector import ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("momentumct")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="momentumct", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate the phantom cohort and FBP inputs")
    s.add_argument("--config", required=True)

    t = sub.add_parser("train", help="greedy layer-wise training, then traced test reconstruction")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=VARIANTS)

    r = sub.add_parser("reconstruct", help="reconstruct one sinogram with trained checkpoints")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoints", required=True)
    r.add_argument("--input", required=True, help="post-log sinogram (.mcta)")
    r.add_argument("--output", default="recon", help="output stem for .mcta/.png/_trace.csv")
    r.add_argument("--reference", help="reference image (.mcta) for the RMSE trace")
    r.add_argument("--mask", help="boolean mask (.mcta) restricting the RMSE")

    e = sub.add_parser("evaluate", help="metrics, RMSE curves and PNG panels for a run")
    e.add_argument("--run", required=True)
    return p


def _dispatch(args) -> int:
    if args.command == "simulate":
        cfg = load_config(args.config)
        ds = experiment.simulate(cfg)
        print(f"simulated {len(ds.split('train'))} train / {len(ds.split('test'))} test samples "
              f"-> {cfg.dataset.path}")
    elif args.command == "train":
        cfg = load_config(args.config, require_dataset=True)
        vdir = experiment.train(cfg, args.variant)
        print(f"checkpoints and traces -> {vdir}")
    elif args.command == "reconstruct":
        cfg = load_config(args.config)
        _, rmse = experiment.reconstruct(cfg, args.checkpoints, args.input, args.output,
                                         args.reference, args.mask)
        if rmse:
            print(f"final RMSE {rmse[-1]:.3f} HU after {len(rmse)} layers")
    elif args.command == "evaluate":
        summary = experiment.evaluate(args.run)
        print("method,mean_rmse_hu,std_rmse_hu,n")
        for name, m, s, n in summary["metrics"]:
            print(f"{name},{m:.3f},{s:.3f},{n}")
        if summary["missing"]:
            print("missing traces: " + ", ".join(summary["missing"]), file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LayerError, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArrayFileError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
