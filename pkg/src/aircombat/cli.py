"""Command-line entry point: ``aircombat <subcommand> ...``."""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .harness import EvalSpec, MalformedLogError, commander_spec, evaluate, record_trajectory, render_replay
from .policy_io import PolicyKind
from .training import (
    LeagueRegistry, MissingCheckpointError, ProgressLog, TrainConfig, run_curriculum, train_commander,
)

log = logging.getLogger("aircombat")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with option overrides")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--workers", type=_positive, default=1)
    common.add_argument("--out", type=Path, default=Path("runs"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="aircombat", description="2D air-combat multi-agent RL toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-low", parents=[common], help="train a fight or escape policy through the curriculum")
    p.add_argument("--policy", choices=["fight", "escape"], required=True)
    p.add_argument("--type", choices=["ac1", "ac2", "both"], default="both",
                   help="aircraft type whose transitions are learned from")
    p.add_argument("--levels", type=int, nargs="+", help="curriculum levels to run (fight only)")
    p.add_argument("--league", type=Path, help="existing league directory to extend")

    p = sub.add_parser("train-commander", parents=[common], help="train the commander over frozen options")
    p.add_argument("--league", type=Path, help="league directory holding fight L5 and escape L3")
    p.add_argument("--episodes", type=_positive)

    p = sub.add_parser("evaluate", parents=[common], help="play evaluation episodes and report outcomes")
    p.add_argument("--scenario", required=True, help="team sizes, e.g. 2v2")
    p.add_argument("--episodes", type=_positive, default=1000)
    p.add_argument("--league", type=Path)
    p.add_argument("--mode", choices=["fight", "escape", "commander"], default="fight")
    p.add_argument("--agents", choices=["policy", "script", "random", "static"], default="policy")
    p.add_argument("--opponents", choices=["policy", "script", "random", "static"], default="policy")
    p.add_argument("--greedy", action="store_true", help="take the most likely action instead of sampling")
    p.add_argument("--trajectory", action="store_true", help="also record episode 0 as a JSON-lines log")

    p = sub.add_parser("render", parents=[common], help="draw a trajectory log as SVG")
    p.add_argument("--log", type=Path, required=True, dest="log_file")
    return parser


def _load_config(args, cls):
    if args.config is None:
        cfg = cls()
        log.info("no --config given; using defaults: %s", json.dumps(dataclasses.asdict(cfg), sort_keys=True))
        return cfg
    data = json.loads(args.config.read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{args.config}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{args.config}: unknown keys {sorted(unknown)}")
    return cls(**data)


def _league_dir(args) -> Path:
    return args.league if getattr(args, "league", None) is not None else args.out / "league"


def cmd_train_low(args) -> int:
    cfg = _load_config(args, TrainConfig)
    cfg.seed = args.seed
    if args.type != "both":
        cfg.train_kinds = [args.type.upper()]
    league_dir = _league_dir(args)
    league = LeagueRegistry.load(league_dir) if league_dir.is_dir() else LeagueRegistry()
    args.out.mkdir(parents=True, exist_ok=True)
    progress = ProgressLog(args.out / f"progress-{args.policy}.jsonl")
    league = run_curriculum(PolicyKind(args.policy), cfg, args.levels, league, progress)
    league.save(args.out / "league")
    log.info("saved checkpoints to %s", args.out / "league")
    return 0


def cmd_train_commander(args) -> int:
    cfg = _load_config(args, TrainConfig)
    cfg.seed = args.seed
    league = LeagueRegistry.load(_league_dir(args))
    args.out.mkdir(parents=True, exist_ok=True)
    progress = ProgressLog(args.out / "progress-commander.jsonl")
    train_commander(league, cfg, args.episodes, progress)
    league.save(args.out / "league")
    return 0


def cmd_evaluate(args) -> int:
    if args.mode == "commander" and args.config is None:
        spec = commander_spec()
        log.info("no --config given; using commander defaults: %s",
                 json.dumps(dataclasses.asdict(spec), sort_keys=True))
    else:
        spec = _load_config(args, EvalSpec)
    spec.mode, spec.agents, spec.opponents = args.mode, args.agents, args.opponents
    spec.greedy = spec.greedy or args.greedy
    needs_league = spec.mode == "commander" or "policy" in (spec.agents, spec.opponents)
    league = LeagueRegistry.load(_league_dir(args)) if needs_league else None
    report = evaluate(args.scenario, args.episodes, args.seed, spec, league, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"eval-{report.scenario}.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(report.table())
    if args.trajectory:
        record_trajectory(args.scenario, args.seed, args.out / f"trajectory-{report.scenario}.jsonl", spec, league)
    return 0


def cmd_render(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / (args.log_file.stem + ".svg")
    render_replay(args.log_file, target)
    print(target)
    return 0


COMMANDS = {
    "train-low": cmd_train_low,
    "train-commander": cmd_train_commander,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose or args.config is None else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except (MissingCheckpointError, MalformedLogError, ValueError, OSError) as exc:
        print(f"aircombat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
