"""Command line entry point: ``icczone <subcommand> [options]``."""

import argparse
import logging
import math
import sys

import numpy as np

from .experiment import (
    CalibrationError, ConfigError, cmd_calibrate, cmd_ctf_check, cmd_simulate, cmd_spr_trace,
    cmd_sweep, load_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _alpha_list(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.lower() in ("off", "-inf"):
            out.append(-math.inf)
            continue
        try:
            out.append(float(item))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad ICC gain {item!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty gain list")
    return out


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment configuration")
    common.add_argument("--seed", type=_seed, help="noise and mismatch seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--alpha-db", type=_alpha_list,
                        help="comma separated ICC gains in dB ('off' disables the ICC)")
    common.add_argument("--no-processing", action="store_true",
                        help="skip the feedback-corrected direct PSD path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icczone", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the closed loop and write WAVs")
    sub.add_parser("sweep", parents=[common], help="zone detection rates over ICC gains")
    sub.add_parser("spr-trace", parents=[common], help="per-frame broadband SPR with a mid-signal toggle")
    sub.add_parser("calibrate", parents=[common], help="forward gain, mismatch and stability table")
    ctf = sub.add_parser("ctf-check", parents=[common], help="CTF filtering vs time-domain filtering")
    ctf.add_argument("--filters", type=int, default=20)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          icc__alpha_db=args.alpha_db,
                          processing=False if args.no_processing else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, cfg):
    if args.command == "calibrate":
        cal = cmd_calibrate(cfg)
        print(f"forward_gain={cal.forward_gain:.6g} mismatch_sigma={cal.mismatch_sigma:.6g} "
              f"stability_limit_db={cal.stability_limit_db:.3f}")
    elif args.command == "simulate":
        sim = cmd_simulate(cfg)
        print(f"alpha_db={sim.metadata['alpha_db']} stable={sim.metadata['stable']} "
              f"wrote {cfg.out}")
    elif args.command == "sweep":
        result = cmd_sweep(cfg)
        for row in result.rows():
            if row[2] == 0:
                print(f"alpha_db={row[0]:g} {row[1]:<11} rate(0)={row[3]:.3f} stable={row[4]}")
    elif args.command == "spr-trace":
        trace = cmd_spr_trace(cfg)
        print(f"{trace.spr.shape[1]} frames x {trace.spr.shape[0]} zones written to {cfg.out}")
    elif args.command == "ctf-check":
        rows = cmd_ctf_check(cfg, n_filters=args.filters)
        for i, length, err in rows:
            print(f"filter {i:2d} length {length:5d}: {err:7.2f} dB")
        print(f"worst {max(r[2] for r in rows):.2f} dB")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
