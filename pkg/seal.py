"""
SEAL command line.

    python seal.py protect            --config run.json
    python seal.py simulate-offender  --config run.json
    python seal.py train-detectors    --config run.json
    python seal.py audit              --config run.json --images suspects/ [--labels labels.json]
    python seal.py experiment         --config run.json --which transfer

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure, 1 anything else.
"""

import argparse
import json
import logging
import sys

from config.run_config import load_run_config
from engine.errors import EXIT_OK, exit_code_for
from pipeline import (
    EXPERIMENTS,
    run_audit,
    run_experiment,
    run_protect,
    run_simulate_offender,
    run_train_detectors,
)

logger = logging.getLogger("seal")


def cmd_protect(cfg: dict, args) -> dict:
    return run_protect(cfg)


def cmd_simulate_offender(cfg: dict, args) -> dict:
    return run_simulate_offender(cfg)


def cmd_train_detectors(cfg: dict, args) -> dict:
    return run_train_detectors(cfg)


def cmd_audit(cfg: dict, args) -> dict:
    report = run_audit(cfg, images=args.images, labels=args.labels)
    return report["summary"]


def cmd_experiment(cfg: dict, args) -> dict:
    result = run_experiment(cfg, args.which)
    return {k: v for k, v in result.items() if k != "summary"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run file")
    common.add_argument("--out", type=str, default=None, help="Output root (overrides config and environment)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None, help="Worker processes for independent work units")
    common.add_argument("--scale", type=float, default=None, help="Multiplier on default fine-tuning step counts")
    common.add_argument("--verbose", "-v", action="count", default=0, help="-v for INFO, -vv for DEBUG")

    p = argparse.ArgumentParser(description="SEAL: watermark images against unauthorised diffusion fine-tuning")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("protect", parents=[common], help="Optimise watermarks and release protected PNGs") \
        .set_defaults(func=cmd_protect)
    sub.add_parser("simulate-offender", parents=[common], help="Fine-tune on clean and released data, generate") \
        .set_defaults(func=cmd_simulate_offender)
    sub.add_parser("train-detectors", parents=[common], help="Train per-method experts and the gating model") \
        .set_defaults(func=cmd_train_detectors)

    pa = sub.add_parser("audit", parents=[common], help="Score suspected images with the trained detectors")
    pa.add_argument("--images", type=str, default=None, help="Directory of PNGs or a single PNG")
    pa.add_argument("--labels", type=str, default=None, help="JSON object: image name -> true if watermarked")
    pa.set_defaults(func=cmd_audit)

    pe = sub.add_parser("experiment", parents=[common], help="Run an evaluation experiment")
    pe.add_argument("--which", choices=EXPERIMENTS, required=True)
    pe.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_run_config(args.config, overrides={
            "output_root": args.out, "seed": args.seed, "jobs": args.jobs, "scale": args.scale,
        })
        result = args.func(cfg, args)
    except Exception as exc:
        code = exit_code_for(exc)
        logger.error("%s failed: %s: %s", args.cmd, type(exc).__name__, exc, exc_info=args.verbose > 1)
        return code

    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
