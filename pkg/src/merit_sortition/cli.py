"""Command-line front end: ``run``, ``sweep`` and ``presets list``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import io
from .experiments import Mode, percentile_sweep, run_scenario

log = logging.getLogger("merit_sortition")

DEFAULT_OUT = "sortition-out"


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get("SORTITION_OUT") or DEFAULT_OUT)


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _with_seed(cfg: io.RunConfig, seed: int | None) -> io.RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, scenario=cfg.scenario.with_seed(seed))


def cmd_run(config: str, seed: int | None, out_dir: Path, mode: str | None = None) -> dict[str, str]:
    cfg = _with_seed(io.load_config(config), seed)
    if mode is not None:
        cfg = dataclasses.replace(cfg, run_mode=mode)
    modes = [Mode.MERIT, Mode.RANDOM] if cfg.run_mode == "paired" else [Mode(cfg.run_mode)]
    runs = [run_scenario(cfg.scenario.with_mode(m)) for m in modes]

    files = {
        "epochs.csv": io.epochs_csv(runs),
        "participants.csv": io.participants_csv(runs),
        "trajectories.csv": io.trajectories_csv(runs),
        "summary.json": io.canonical_json(io.summary_dict(runs)),
    }
    files["manifest.json"] = io.manifest("run", cfg, files)
    io.write_bundle(out_dir, files)
    return files


def cmd_sweep(
    config: str,
    out_dir: Path,
    n_points: int | None = None,
    seeds: int | None = None,
    seed: int | None = None,
    jobs: int = 1,
) -> dict[str, str]:
    cfg = _with_seed(io.load_config(config), seed)
    sweep = io.SweepSettings(
        n_points if n_points is not None else cfg.sweep.n_points,
        seeds if seeds is not None else cfg.sweep.seeds,
    )
    cfg = dataclasses.replace(cfg, sweep=sweep, run_mode="paired")
    points = percentile_sweep(cfg.scenario, sweep.n_points, sweep.seeds, jobs=jobs)

    files = {"sweep.csv": io.sweep_csv(points)}
    seeds_used = [r.seed for r in points[0].per_seed]
    files["manifest.json"] = io.manifest("sweep", cfg, files, {"replicate_seeds": seeds_used})
    io.write_bundle(out_dir, files)
    return files


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="merit-sortition",
        description="Merit-based sortition simulations (merit vs. random active-set selection).",
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario (and its paired random baseline)")
    run.add_argument("--config", required=True, help="JSON config, run manifest, or preset name")
    run.add_argument("--seed", type=_u64, help="override sim.seed")
    run.add_argument("--out", help=f"output directory (default: $SORTITION_OUT or ./{DEFAULT_OUT})")
    run.add_argument("--mode", choices=io.RUN_MODES, help="override the config's mode")

    sw = sub.add_parser("sweep", help="percentile sweep with paired merit/random runs")
    sw.add_argument("--config", required=True, help="JSON config, run manifest, or preset name")
    sw.add_argument("--seed", type=_u64, help="override the master seed")
    sw.add_argument("--out", help=f"output directory (default: $SORTITION_OUT or ./{DEFAULT_OUT})")
    sw.add_argument("--points", type=_positive, help="number of percentile grid points")
    sw.add_argument("--seeds", type=_positive, help="replicate seeds per grid point")
    sw.add_argument("--jobs", type=_positive, default=os.cpu_count() or 1, help="worker processes")

    pr = sub.add_parser("presets", help="bundled scenario presets")
    pr_sub = pr.add_subparsers(dest="presets_command", required=True)
    pr_sub.add_parser("list", help="list preset names")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s"
    )
    try:
        if args.command == "presets":
            for name in io.preset_names():
                print(f"{name}\t{io.load_preset(name).description}")
            return 0
        out = _out_dir(args.out)
        if args.command == "run":
            files = cmd_run(args.config, args.seed, out, args.mode)
        else:
            files = cmd_sweep(args.config, out, args.points, args.seeds, args.seed, args.jobs)
        log.info("wrote %s to %s", ", ".join(sorted(files)), out)
        return 0
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
