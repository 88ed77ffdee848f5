"""Command-line entry point.

Exit status: 0 on success, 1 on a runtime error, 2 on a usage error.
The HTTP client reads its API key from MAESTRO_LLM_API_KEY.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from maestro import __version__
from maestro.harness import (
    ConfigError,
    ExperimentConfig,
    ablation_configs,
    calibrate,
    emit_report,
    preflight,
    run_ablation,
    run_and_log,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON experiment config (default: desk profile)")
    p.add_argument("--llm", choices=("mock", "http", "replay"), help="chat client for the Architect")
    p.add_argument("--out", metavar="DIR", help="output directory for logs")
    p.add_argument("--episodes", type=int, help="override the number of training episodes")
    p.add_argument("--full", action="store_true", help="start from the full 4x4, 200-episode profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maestro", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train one condition and seed")
    _common(p)
    p.add_argument("--condition", choices=("A2", "A7", "A8"), help="ablation condition")
    p.add_argument("--seed", type=int, help="run seed")

    p = sub.add_parser("ablation", help="run A2, A7 and A8 over all configured seeds")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("logs", metavar="DIR", help="directory written by train or ablation")
    p.add_argument("--out", metavar="DIR", help="report directory (default: DIR/report)")

    p = sub.add_parser("verify-curriculum", help="fixed-time difficulty sweep with rank correlations")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="simulation seeds")
    p.add_argument("--period", type=int, default=10, help="fixed-time phase period in steps")
    p.add_argument("--grid", type=int, nargs=2, default=[4, 4], metavar=("ROWS", "COLS"), help="grid size")

    p = sub.add_parser("validate-reward", help="run a reward program through syntax, sandbox and safety checks")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("source", nargs="?", help="program text")
    src.add_argument("--file", metavar="PATH", help="read the program from a file")

    p = sub.add_parser("calibrate", help="suggest a curriculum target from random and fixed-time returns")
    p.add_argument("--grid", type=int, nargs=2, default=[4, 4], metavar=("ROWS", "COLS"), help="grid size")
    p.add_argument("--difficulty", type=float, default=0.5, help="difficulty to calibrate at")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(20)), help="simulation seeds")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.full:
        cfg = ExperimentConfig()
    else:
        cfg = ExperimentConfig.desk()
    changes = {}
    if args.llm:
        changes["llm"] = args.llm
    if args.out:
        changes["out_dir"] = args.out
    if args.episodes is not None:
        changes["episodes"] = args.episodes
        if cfg.final_window is not None and cfg.final_window[1] > args.episodes:
            changes["final_window"] = None
    if getattr(args, "condition", None):
        changes["condition"] = args.condition
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "seeds", None):
        changes["seeds"] = tuple(args.seeds)
    return replace(cfg, **changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    preflight(cfg)
    status = EXIT_OK
    for seed in cfg.seeds:
        outcome = run_and_log(cfg, seed)
        if outcome.ok:
            print(f"{cfg.condition} seed {seed}: wrote {outcome.path}")
        else:
            print(f"{cfg.condition} seed {seed}: FAILED ({outcome.error})", file=sys.stderr)
            status = EXIT_RUNTIME
    return status


def cmd_ablation(args) -> int:
    cfg = _config(args)

    def progress(o):
        state = "ok" if o.ok else f"FAILED ({o.error})"
        print(f"{o.condition} seed {o.seed}: {state}", flush=True)

    outcomes = run_ablation(ablation_configs(cfg), cfg.out_dir, progress=progress)
    print(f"manifest: {Path(cfg.out_dir) / 'manifest.json'}")
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_RUNTIME


def cmd_report(args) -> int:
    path = emit_report(args.logs, args.out)
    print(path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from maestro.curriculum import verify_monotonicity
    from maestro.grid_sim import GridNetwork

    res = verify_monotonicity(seeds=args.seeds, period=args.period, network=GridNetwork(rows=args.grid[0], cols=args.grid[1]))
    print("d,mean_queue,mean_delay")
    for d, q, dl in zip(res.d_grid, res.mean_queue, res.mean_delay):
        print(f"{d:.2f},{q:.4f},{dl:.4f}")
    print(f"spearman rho (queue) = {res.rho_queue:.4f}")
    print(f"spearman rho (delay) = {res.rho_delay:.4f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from maestro.reward_lang import validate

    source = Path(args.file).read_text(encoding="utf-8").strip() if args.file else args.source
    report = validate(source)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if not report.passed:
        print(f"rejected at {report.stage} stage: {report.detail}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from maestro.grid_sim import GridNetwork

    cal = calibrate(GridNetwork(rows=args.grid[0], cols=args.grid[1]), args.difficulty, args.seeds)
    print(f"random policy mean return:     {cal.random_mean:.3f}")
    print(f"fixed-time policy mean return: {cal.fixed_time_mean:.3f}")
    print(f"suggested target_return:       {cal.suggested_target:.3f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablation": cmd_ablation,
    "report": cmd_report,
    "verify-curriculum": cmd_verify,
    "validate-reward": cmd_validate,
    "calibrate": cmd_calibrate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"maestro: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"maestro: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
