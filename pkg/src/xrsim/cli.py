"""``xrsim`` command line: calc, simulate, train, compare.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from xrsim import harness
from xrsim.config import ConfigError, parse_config
from xrsim.media import (
    Codec,
    DomainError,
    MediaSpec,
    compressed_bitrate,
    format_rate,
    latency_budget,
    raw_bitrate,
    worked_examples,
)
from xrsim.rl import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
    return v


def _common(p):
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--seed", type=int, help="override [rl] seed")
    p.add_argument("--out-dir", help="override [run] output_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xrsim", description="XR streaming simulator and bitrate-control trainer")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    calc = sub.add_parser("calc", help="bandwidth and latency arithmetic")
    csub = calc.add_subparsers(dest="what", required=True, parser_class=_Parser)
    rate = csub.add_parser("rate", help="raw and compressed bitrate")
    rate.add_argument("--width", type=int, help="pixels per eye")
    rate.add_argument("--height", type=int)
    rate.add_argument("--fov-width", type=float, help="degrees")
    rate.add_argument("--fov-height", type=float)
    rate.add_argument("--ppd", type=float, help="pixels per degree")
    rate.add_argument("--bits", type=int, default=8, help="bits per colour channel")
    rate.add_argument("--fps", type=_positive_float, default=90.0)
    rate.add_argument("--eyes", type=int, default=1)
    rate.add_argument("--codec", default="none", choices=[c.value for c in Codec])
    rate.add_argument("--verify-paper", action="store_true", help="print the reference worked examples")
    lat = csub.add_parser("latency", help="per-frame latency budget")
    lat.add_argument("--fps", type=_positive_float, default=90.0)
    lat.add_argument("--sensing-ms", type=float, default=0.0)
    lat.add_argument("--rendering-ms", type=float, default=0.0)
    lat.add_argument("--display-ms", type=float, default=0.0)
    lat.add_argument("--verify-paper", action="store_true", help="print the reference worked examples")

    sim = sub.add_parser("simulate", help="run one policy over the configured scenario")
    _common(sim)
    sim.add_argument("--policy", default="oracle", help="fixed:N, oracle or trained:PATH (default oracle)")
    sim.add_argument("--no-trace", action="store_true", help="skip events.csv and measurements.csv")

    tr = sub.add_parser("train", help="train the actor-critic controller")
    _common(tr)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--steps", type=int, help="override [rl] steps")

    cmp_ = sub.add_parser("compare", help="trained policy vs fixed levels and the oracle on held-out seeds")
    _common(cmp_)
    cmp_.add_argument("--checkpoint", help="trained checkpoint (omit to compare baselines only)")
    return ap


def _num(x) -> str:
    return str(x) if isinstance(x, int) else f"{x:.6g}"


def _verify_rows(out):
    out.write(f"{'example':<66} {'computed':>14} {'printed':>14}  unit\n")
    for label, computed, printed, unit in worked_examples():
        out.write(f"{label:<66} {_num(computed):>14} {_num(printed):>14}  {unit}\n")


def cmd_calc(args, out) -> int:
    if args.what == "latency":
        b = latency_budget(args.fps, args.sensing_ms, args.rendering_ms, args.display_ms)
        out.write(f"frame deadline: {b.frame_deadline_ms:.1f} ms at {b.fps:g} fps\n")
        out.write(f"streaming budget: {b.streaming_budget_ms:.1f} ms"
                  f"{'' if b.feasible else ' (infeasible)'}\n")
        out.write(f"VOR target: {b.vor_target_ms:g} ms\n")
    else:
        spec = MediaSpec(bits_per_channel=args.bits, refresh_rate_fps=args.fps, eyes=args.eyes, codec=args.codec,
                         fov_width_deg=args.fov_width, fov_height_deg=args.fov_height, ppd=args.ppd,
                         width_px=args.width, height_px=args.height)
        raw = raw_bitrate(spec)
        w, h = spec.resolution
        out.write(f"resolution: {w:g}x{h:g} per eye, {spec.eyes} eye(s)\n")
        out.write(f"raw bitrate: {raw:.0f} b/s ({format_rate(raw)})\n")
        if spec.codec is not Codec.NONE:
            out.write(f"compressed ({spec.codec.value}): {format_rate(compressed_bitrate(raw, spec.codec))}\n")
    if args.verify_paper:
        _verify_rows(out)
    return EXIT_OK


def _load(args):
    config = parse_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    out_dir = Path(args.out_dir or config.run.output_dir)
    return config, out_dir


def cmd_simulate(args, out) -> int:
    config, out_dir = _load(args)
    policy = harness.parse_policy(args.policy, config)
    report, env = harness.run_scenario(config, policy, keep_trace=not args.no_trace)
    harness.write_report(report, out_dir, env)
    out.write((out_dir / "summary.txt").read_text())
    return EXIT_OK


def cmd_train(args, out) -> int:
    config, out_dir = _load(args)
    if args.steps is not None and args.steps < 0:
        raise UsageError("--steps must be >= 0")
    result = harness.train(config, out_dir, resume=args.resume, steps=args.steps)
    out.write(f"steps: {result.steps}\ncheckpoint: {result.checkpoint}\nlog: {result.log}\n")
    return EXIT_OK


def cmd_compare(args, out) -> int:
    config, out_dir = _load(args)
    table = harness.compare_baselines(config, args.checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(harness.COMPARE_COLUMNS)
        for r in table:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in harness.COMPARE_COLUMNS])
    out.write(harness.format_table(table) + "\n")
    return EXIT_OK


COMMANDS = {"calc": cmd_calc, "simulate": cmd_simulate, "train": cmd_train, "compare": cmd_compare}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        err.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except (UsageError, ConfigError, DomainError) as e:
        err.write(f"error: {e}\n")
        return EXIT_USAGE
    except TrainingError as e:
        err.write(f"training failed: {e}\n")
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ArithmeticError) as e:
        err.write(f"runtime failure: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
