"""Command-line entry point: ``dualnav <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .llm import HttpTransport, LlmClient, OracleTransport, RecordingTransport, ScriptedTransport
from .regulator import RegulatorConfig
from .runner import BehaviorCloningPolicy
from .scorer import TrajectoryScorer, collect_snapshots, load_snapshots, save_snapshots, train
from .world import (InstructionStyle, generate_episodes, generate_world, load_episodes, load_world,
                    save_episodes, save_world)

log = logging.getLogger("dualnav")


class CliError(Exception):
    pass


def _add_runner_flags(p):
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--trap-prob", type=float, default=0.3)
    p.add_argument("--premature-stop-prob", type=float, default=0.1)
    p.add_argument("--runner-seed", type=int, default=0)


def _add_suite_flags(p):
    p.add_argument("--n-worlds", type=int, default=10)
    p.add_argument("--episodes-per-world", type=int, default=10)
    p.add_argument("--n-viewpoints", type=int, default=60)
    p.add_argument("--world-seed", type=int, default=1000, help="seed of the first evaluation world")
    p.add_argument("--episode-seed", type=int, default=7)
    p.add_argument("--min-hops", type=int, default=4)
    p.add_argument("--max-hops", type=int, default=7)
    p.add_argument("--n-train-worlds", type=int, default=4)
    p.add_argument("--train-world-seed", type=int, default=0)
    p.add_argument("--train-episodes", type=int, default=15)
    p.add_argument("--scorer-seed", type=int, default=0)
    _add_runner_flags(p)


def _add_regulator_flags(p):
    p.add_argument("--tau-r", type=int, default=4)
    p.add_argument("--tau-l", type=int, default=20)
    p.add_argument("--tau-g", type=float, default=0.35)
    p.add_argument("--step-cap", type=int, default=40)
    p.add_argument("--restart-teleport", action="store_true")


def _add_io_flags(p):
    p.add_argument("--world", type=Path, help="world.json; omit to run the seeded standard suite")
    p.add_argument("--episodes", type=Path, help="episodes.json for --world")
    p.add_argument("--scorer", type=Path, help="scorer checkpoint; without it the suite trains one")
    p.add_argument("--runner", type=Path, help="behaviour-cloning runner checkpoint (default: heuristic)")
    p.add_argument("--log-dir", type=Path, help="write runs/<arm>/<episode>.jsonl logs here")
    p.add_argument("--report", type=Path, help="write report.json here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualnav", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic world")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-viewpoints", type=int, default=60)
    p.add_argument("--mean-degree", type=float, default=3.0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-episodes", help="generate instruction episodes for a world")
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--style", choices=[s.value for s in InstructionStyle], default=InstructionStyle.FINE_GRAINED.value)
    p.add_argument("--min-hops", type=int, default=4)
    p.add_argument("--max-hops", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("collect", help="roll out the runner and write labeled scorer snapshots")
    p.add_argument("--world", type=Path, action="append", default=[], help="repeatable; pairs with --episodes")
    p.add_argument("--episodes", type=Path, action="append", default=[])
    p.add_argument("--train-seeds", type=int, nargs="*", default=None,
                   help="generate training worlds from these seeds instead of reading files")
    p.add_argument("--n-viewpoints", type=int, default=60)
    p.add_argument("--episodes-per-world", type=int, default=15)
    p.add_argument("--episode-seed", type=int, default=7)
    p.add_argument("--min-hops", type=int, default=4)
    p.add_argument("--max-hops", type=int, default=7)
    p.add_argument("--step-cap", type=int, default=40)
    _add_runner_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-scorer", help="fit the trajectory scorer on snapshots")
    p.add_argument("--snapshots", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=25)

    p = sub.add_parser("train-runner", help="fit the behaviour-cloning runner on ground-truth paths")
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--episodes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("run", help="run one arm over a suite")
    p.add_argument("--llm", choices=["http", "scripted", "oracle"], default="oracle")
    p.add_argument("--transcript", type=Path, help="JSONL transcript for --llm scripted")
    p.add_argument("--record-transcript", type=Path, help="save a replayable transcript of this run")
    p.add_argument("--model", default="gpt-4o", help="model name for --llm http")
    p.add_argument("--retry-limit", type=int, default=2)
    p.add_argument("--switches", default="full", help="arm, e.g. full or no-scoring+no-ending")
    _add_io_flags(p)
    _add_regulator_flags(p)
    _add_suite_flags(p)

    p = sub.add_parser("ablate", help="run the full arm plus one arm per switch set")
    p.add_argument("--switches", required=True,
                   help="comma-separated switch sets, e.g. no-looping,no-scoring,no-ending,no-formulation")
    _add_io_flags(p)
    _add_regulator_flags(p)
    _add_suite_flags(p)

    p = sub.add_parser("report", help="render a saved report as a table")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--json", action="store_true", help="also print the aggregates as JSON")
    return parser


def _regulator(args) -> RegulatorConfig:
    return RegulatorConfig(tau_r=args.tau_r, tau_l=args.tau_l, tau_g=args.tau_g, step_cap=args.step_cap,
                           restart_teleport=args.restart_teleport)


def _suite_config(args) -> harness.SuiteConfig:
    return harness.SuiteConfig(
        n_worlds=args.n_worlds, episodes_per_world=args.episodes_per_world, n_viewpoints=args.n_viewpoints,
        world_seed=args.world_seed, episode_seed=args.episode_seed, min_hops=args.min_hops,
        max_hops=args.max_hops, noise=args.noise, trap_prob=args.trap_prob,
        premature_stop_prob=args.premature_stop_prob, runner_seed=args.runner_seed,
        n_train_worlds=args.n_train_worlds, train_world_seed=args.train_world_seed,
        train_episodes_per_world=args.train_episodes, scorer_seed=args.scorer_seed,
        regulator=_regulator(args),
    )


def _suite(args) -> harness.Suite:
    config = _suite_config(args)
    scorer = TrajectoryScorer.load(args.scorer) if args.scorer else None
    if args.world is not None:
        if args.episodes is None:
            raise CliError("--world needs --episodes")
        world = load_world(args.world)
        episodes = load_episodes(args.episodes, world)
        suite = harness.Suite(config, [world], [episodes], scorer)
        if scorer is None:
            suite.scorer = harness.train_suite_scorer(config, [world])
    else:
        suite = harness.prepare_suite(config, scorer)
    if args.runner is not None:
        suite.policy = BehaviorCloningPolicy.load(args.runner)
    return suite


def _client(args, suite: harness.Suite):
    if args.llm == "scripted":
        if args.transcript is None:
            raise CliError("--llm scripted needs --transcript")
        transport = ScriptedTransport.from_jsonl(args.transcript)
    elif args.llm == "http":
        transport = HttpTransport(args.model)
    else:
        transport = OracleTransport()
    if args.record_transcript is not None:
        transport = RecordingTransport(transport)
    return LlmClient(transport, retry_limit=args.retry_limit)


def _emit(reports, args) -> None:
    sys.stdout.write(harness.render_table(reports))
    if getattr(args, "report", None) is not None:
        harness.save_reports(reports, args.report)


def cmd_gen_world(args):
    world = generate_world(args.seed, args.n_viewpoints, args.mean_degree)
    save_world(world, args.out)
    print(f"wrote {args.out} ({len(world.viewpoints)} viewpoints)")


def cmd_gen_episodes(args):
    world = load_world(args.world)
    eps = generate_episodes(world, args.n, args.seed, InstructionStyle(args.style), args.min_hops, args.max_hops)
    save_episodes(eps, args.out)
    print(f"wrote {args.out} ({len(eps)} episodes)")


def cmd_collect(args):
    cfg = harness.SuiteConfig(n_viewpoints=args.n_viewpoints, episode_seed=args.episode_seed,
                              min_hops=args.min_hops, max_hops=args.max_hops, noise=args.noise,
                              trap_prob=args.trap_prob, premature_stop_prob=args.premature_stop_prob,
                              runner_seed=args.runner_seed)
    if args.train_seeds is not None:
        worlds = [generate_world(s, args.n_viewpoints) for s in args.train_seeds]
        episodes = [cfg.episodes_for(w, args.episodes_per_world) for w in worlds]
    else:
        if not args.world or len(args.world) != len(args.episodes):
            raise CliError("give --train-seeds, or matching --world/--episodes pairs")
        worlds = [load_world(p) for p in args.world]
        episodes = [load_episodes(p, w) for p, w in zip(args.episodes, worlds)]
    snaps = collect_snapshots(worlds, episodes, cfg.runner(), args.step_cap)
    save_snapshots(snaps, args.out)
    pos = sum(s.label for s in snaps)
    print(f"wrote {args.out} ({len(snaps)} snapshots, {pos} labeled 1)")


def cmd_train_scorer(args):
    snaps = load_snapshots(args.snapshots)
    scorer = train(snaps, seed=args.seed, hidden=args.hidden, max_epochs=args.max_epochs,
                   learning_rate=args.learning_rate, patience=args.patience)
    scorer.save(args.out)
    print(f"wrote {args.out} (epochs {scorer.n_epochs_}, held-out AUC {scorer.validation_auc_:.4f})")


def cmd_train_runner(args):
    world = load_world(args.world)
    eps = load_episodes(args.episodes, world)
    policy = BehaviorCloningPolicy(hidden=args.hidden, epochs=args.epochs, learning_rate=args.learning_rate,
                                   seed=args.seed).fit(eps, world)
    policy.save(args.out)
    print(f"wrote {args.out} (final loss {policy.loss_history_[-1]:.4f})")


def cmd_run(args):
    suite = _suite(args)
    client = _client(args, suite)
    arm = harness.make_arm(args.switches, suite.config.regulator)
    report = harness.run_suite(suite, arm, llm=client, log_dir=args.log_dir)
    if args.record_transcript is not None:
        client.transport.save(args.record_transcript)
    _emit([report], args)


def cmd_ablate(args):
    suite = _suite(args)
    switches = [s.strip() for s in args.switches.split(",") if s.strip()]
    for s in switches:
        harness.make_arm(s, suite.config.regulator)  # fail before running anything
    reports = harness.ablate(suite, switches, log_dir=args.log_dir)
    _emit(reports, args)


def cmd_report(args):
    try:
        reports = harness.load_reports(args.results)
    except FileNotFoundError:
        raise CliError(f"{args.results}: no such file")
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc))
    sys.stdout.write(harness.render_table(reports))
    if args.json:
        print(json.dumps([{k: v for k, v in r.to_dict().items() if k != "episodes"} for r in reports], indent=1))


COMMANDS = {
    "gen-world": cmd_gen_world, "gen-episodes": cmd_gen_episodes, "collect": cmd_collect,
    "train-scorer": cmd_train_scorer, "train-runner": cmd_train_runner, "run": cmd_run,
    "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"dualnav {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"dualnav {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
