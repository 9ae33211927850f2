"""``uavreward`` command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime abort,
4 reward-design exhaustion, 5 missing fixture.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .agents import AgentConfig
from .environment import ConfigError, UavIotEnv, WorldConfig, coerce_world_fields, read_config_sections
from .llm import (API_KEY_ENV, FixtureProvider, FixtureStore, LiveProvider, MissingCredentials,
                  ProviderConfig, ScriptedProvider)
from .reward import PAPER_FIXTURE_RESPONSE, build_prompt, design_reward, world_descriptor

log = logging.getLogger("uavreward")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_EXHAUSTED, EXIT_MISSING_FIXTURE = 0, 2, 3, 4, 5
POLICIES = ("hover", "random", "greedy-nearest")
DEFAULT_OBJECTIVE = ("Minimize the total energy consumption of the UAV-assisted IoT system "
                     "while every terminal uploads its data packet under the decoding, "
                     "throughput and freshness constraints.")
DEFAULT_COMPARE_ARMS = "ddpg-manual,ddpg-paper_fixture,td3-manual,td3-paper_fixture"
DEFAULT_SWEEP_ARMS = "td3-manual,td3-paper_fixture"


class UsageError(ValueError):
    pass


# --- config plumbing -----------------------------------------------------------

def load_sections(path) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return read_config_sections(path)


def world_from(sections, seed=None) -> WorldConfig:
    world = WorldConfig(**coerce_world_fields(sections.get("world", {})))
    return world if seed is None else replace(world, seed=seed)


def agent_from(sections) -> AgentConfig:
    items = sections.get("agent")
    if not items:
        return bench.BENCH_AGENT
    try:
        return AgentConfig.from_mapping({**bench.BENCH_AGENT.to_dict(), **items})
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"[agent]: {exc}") from None


def _list(text: str, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_arm(spec: str) -> tuple[str, str]:
    """``td3-paper_fixture`` or ``ddpg-llm_program:path/to/program.json``."""
    alg, sep, source = spec.strip().partition("-")
    if not sep or alg not in bench.ALGORITHMS:
        raise UsageError(f"invalid arm {spec!r}: algorithm must be one of {bench.ALGORITHMS}")
    return alg, source


def experiment_configs(args, sections, default_arms: str) -> list[bench.ExperimentConfig]:
    exp = sections.get("experiment", {})
    world = world_from(sections)
    agent = agent_from(sections)
    episodes = args.episodes if args.episodes is not None else int(exp.get("episodes", 200))
    if args.seed is not None:
        seeds = (args.seed,)
    else:
        seeds = tuple(_list(exp.get("seeds", "0,1,2"), int))
    arms = args.arms or exp.get("arms", default_arms)
    weight = float(exp.get("manual_weight", 1.0))
    configs = []
    for spec in _list(arms):
        alg, source = parse_arm(spec)
        if source.startswith("llm_program:") and not Path(source.split(":", 1)[1]).is_file():
            raise UsageError(f"program file not found for arm {spec!r}")
        configs.append(bench.ExperimentConfig(world=world, agent=agent, algorithm=alg, reward_source=source,
                                              episodes=episodes, seeds=seeds, manual_weight=weight))
    return configs


def _progress(verbose):
    if not verbose:
        return None

    def report(arm, seed, row):
        log.info("%s seed %d episode %d energy %.1f J delivered %d", arm, seed, row["episode"],
                 row["total_energy"], row["packets_delivered"])
    return report


# --- subcommands ---------------------------------------------------------------

def greedy_nearest_action(env: UavIotEnv) -> np.ndarray:
    pending = [i for i, t in enumerate(env.terminals) if not t.delivered]
    if not pending:
        return np.zeros(2)
    pos = env.uav.position
    d = [np.linalg.norm(env.terminals[i].position - pos) for i in pending]
    delta = env.terminals[pending[int(np.argmin(d))]].position - pos
    dist = np.linalg.norm(delta)
    if dist < env.cfg.uav_speed * env.cfg.slot_duration:
        return np.zeros(2)
    return delta / dist


def cmd_simulate(args, sections) -> int:
    world = world_from(sections, args.seed)
    env = UavIotEnv(world)
    rng = np.random.default_rng(world.seed)
    env.reset(world.seed)
    totals = dict.fromkeys(("terminal_tx", "propulsion", "wpt", "relay"), 0.0)
    while not env.done:
        if args.policy == "hover":
            action = np.zeros(2)
        elif args.policy == "random":
            action = rng.uniform(-1.0, 1.0, size=2)
        else:
            action = greedy_nearest_action(env)
        e = env.step(action).energy
        for name in totals:
            totals[name] += getattr(e, name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env.write_trace(out / "trace.csv")
    summary = {"policy": args.policy, "seed": world.seed, "slots": env.slot,
               "packets_delivered": env.packets_delivered(), **totals, "total": sum(totals.values())}
    (out / "simulate_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"policy={args.policy} seed={world.seed} slots={env.slot} delivered={env.packets_delivered()}"
          f"/{world.n_terminals}")
    for name in ("terminal_tx", "propulsion", "wpt", "relay", "total"):
        print(f"  {name:<12} {summary[name]:14.6f} J")
    return EXIT_OK


def _run_bench(args, sections, default_arms, sweep=False) -> int:
    configs = experiment_configs(args, sections, default_arms)
    progress = _progress(args.verbose)
    if sweep:
        exp = sections.get("experiment", {})
        sizes = _list(args.sizes or exp.get("sizes", ",".join(str(s) for s in bench.DEFAULT_SIZES)), float)
        report = bench.sweep_packet_size(configs, sizes, cache={}, progress=progress)
    else:
        report = bench.compare(configs, cache={}, progress=progress)
    bench.emit(report, args.out, figures=not args.no_figures)
    print(f"---- {'sweep' if sweep else 'results'} ----")
    for arm, s in report.arms.items():
        print(f"{arm:<32} median_final={s['median_final']:.1f} J  IQR={s['iqr_final']:.1f}  "
              f"ratio={s['convergence_ratio']:.3f}")
    for key, value in report.improvements.items():
        print(f"improvement {key:<28} {100 * value:+.2f}%")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def cmd_train(args, sections) -> int:
    arm = f"{args.algorithm}-{args.reward}"
    args.arms = arm
    return _run_bench(args, sections, arm)


def cmd_compare(args, sections) -> int:
    return _run_bench(args, sections, DEFAULT_COMPARE_ARMS)


def cmd_sweep(args, sections) -> int:
    return _run_bench(args, sections, DEFAULT_SWEEP_ARMS, sweep=True)


def make_provider(args):
    if args.provider == "scripted":
        if args.script:
            items = json.loads(Path(args.script).read_text())
            if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
                raise UsageError("--script must hold a JSON list of response strings")
        else:
            items = [PAPER_FIXTURE_RESPONSE]
        return ScriptedProvider(items)
    live_cfg = ProviderConfig(endpoint_url=args.endpoint, api_key_env=API_KEY_ENV)
    if args.provider == "live":
        return LiveProvider(live_cfg)
    store = FixtureStore(args.fixtures, capture=args.capture)
    upstream = LiveProvider(live_cfg) if args.capture else None
    return FixtureProvider(store, upstream)


def cmd_design_reward(args, sections) -> int:
    world = world_from(sections, args.seed)
    try:
        provider = make_provider(args)
    except MissingCredentials as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    prompt = build_prompt(world_descriptor(world), args.objective)
    outcome = design_reward(prompt, provider, k=args.k, max_reflections=args.max_reflections, model=args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trail.json").write_text(json.dumps(outcome.trail_json(), indent=2, sort_keys=True) + "\n")
    program_path = out / "program.json"
    if outcome.accepted:
        program_path.write_text(json.dumps(outcome.program.to_json(), indent=2, sort_keys=True) + "\n")
        print(f"accepted after {outcome.rounds} round(s): {outcome.program.source}")
        print(f"program written to {program_path}")
        return EXIT_OK
    if program_path.exists():
        program_path.unlink()
    if any(a.error and a.error.startswith("missing_fixture") for a in outcome.trail):
        print("error: no recorded fixture for at least one request", file=sys.stderr)
        return EXIT_MISSING_FIXTURE
    print(f"reward design exhausted after {outcome.rounds} round(s); see {out / 'trail.json'}", file=sys.stderr)
    return EXIT_EXHAUSTED


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file with [world], [agent], [experiment]")
    common.add_argument("--seed", type=int, metavar="N", help="override the seed (one seed for bench runs)")
    common.add_argument("--out", metavar="DIR", default="results", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    bench_opts = argparse.ArgumentParser(add_help=False)
    bench_opts.add_argument("--episodes", type=int, metavar="N")
    bench_opts.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = argparse.ArgumentParser(prog="uavreward", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="scripted rollout without learning")
    s.add_argument("--policy", choices=POLICIES, default="hover")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common, bench_opts], help="train one arm over the configured seeds")
    s.add_argument("--algorithm", choices=bench.ALGORITHMS, default="td3")
    s.add_argument("--reward", default="manual", help="manual | paper_fixture | llm_program:PATH")
    s.set_defaults(func=cmd_train, arms=None)

    s = sub.add_parser("design-reward", parents=[common], help="generate and validate a reward program")
    s.add_argument("--provider", choices=("live", "fixture", "scripted"), default="fixture")
    s.add_argument("--fixtures", metavar="DIR", default="fixtures", help="fixture directory (fixture mode)")
    s.add_argument("--capture", action="store_true", help="record fixture misses through the live provider")
    s.add_argument("--script", metavar="PATH", help="JSON list of responses (scripted mode)")
    s.add_argument("--endpoint", default=ProviderConfig().endpoint_url)
    s.add_argument("--model", default="gpt-4o")
    s.add_argument("--objective", default=DEFAULT_OBJECTIVE)
    s.add_argument("-k", type=int, default=3, help="candidates per round")
    s.add_argument("--max-reflections", type=int, default=5)
    s.set_defaults(func=cmd_design_reward)

    for name, func, arms in (("compare", cmd_compare, DEFAULT_COMPARE_ARMS),
                             ("sweep", cmd_sweep, DEFAULT_SWEEP_ARMS)):
        s = sub.add_parser(name, parents=[common, bench_opts], help=f"{name} reward arms")
        s.add_argument("--arms", metavar="LIST", help=f"comma-separated arms (default {arms})")
        if name == "sweep":
            s.add_argument("--sizes", metavar="LIST", help="packet sizes in bits, ascending")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        sections = load_sections(args.config)
        return args.func(args, sections)
    except (UsageError, ConfigError, bench.ExperimentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except bench.TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
