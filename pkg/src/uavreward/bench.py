"""Seeded training runs and manual-vs-LLM reward comparisons."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import AgentConfig, NonFiniteError, ReplayBuffer, make_agent
from .environment import VIOLATION_KINDS, UavIotEnv, WorldConfig
from .reward import RewardProgram, compile_expression, manual_reward, paper_fixture_program

log = logging.getLogger(__name__)

FINAL_WINDOW = 20
DEFAULT_SIZES = (2.0e6, 2.2e6, 2.4e6, 2.6e6, 2.8e6)
DEFAULT_SEEDS = (0, 1, 2)
ALGORITHMS = ("ddpg", "td3")
LLM_SOURCES = ("paper_fixture", "llm_program")
# narrower than the 256-unit default so a full 3-seed comparison fits a single desktop core;
# wider exploration noise keeps the small actor from saturating against the area boundary
BENCH_AGENT = AgentConfig(hidden_sizes=(64, 64), exploration_noise_std=0.2)

RUN_COLUMNS = ("episode", "total_energy", "e_tx", "e_prop", "e_wpt", "e_relay", "slots",
               "v_throughput", "v_decode", "v_freshness", "packets_delivered", "cumulative_reward")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    agent: AgentConfig = BENCH_AGENT
    algorithm: str = "td3"
    reward_source: str = "manual"  # manual | paper_fixture | llm_program:<path>
    episodes: int = 200
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output_dir: str = "results"
    manual_weight: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ExperimentError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not self.seeds:
            raise ExperimentError("at least one seed is required")
        if self.episodes < 1:
            raise ExperimentError("episodes must be >= 1")
        kind = self.reward_source.split(":", 1)[0]
        if kind not in ("manual",) + LLM_SOURCES:
            raise ExperimentError(f"unknown reward source {self.reward_source!r}")
        if kind == "llm_program" and ":" not in self.reward_source:
            raise ExperimentError("llm_program reward source needs a path: llm_program:<file>")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def arm(self) -> str:
        return f"{self.algorithm}-{self.reward_kind}"

    @property
    def reward_kind(self) -> str:
        return self.reward_source.split(":", 1)[0]

    def digest(self) -> str:
        """Identifies everything that influences a run except the seed."""
        payload = {"world": self.world.to_dict(), "agent": self.agent.to_dict(), "algorithm": self.algorithm,
                   "reward": self.reward_source, "program": _program_text(self.reward_source),
                   "episodes": self.episodes, "manual_weight": self.manual_weight}
        payload["world"].pop("seed")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _program_text(source: str) -> str | None:
    if source.startswith("llm_program:"):
        return json.loads(Path(source.split(":", 1)[1]).read_text())["expression"]
    return None


def load_program(path) -> RewardProgram:
    """Load an accepted program file written by ``design-reward``."""
    data = json.loads(Path(path).read_text())
    return compile_expression(data["expression"])


def reward_function(config: ExperimentConfig) -> Callable:
    kind = config.reward_kind
    if kind == "manual":
        w = config.manual_weight
        return lambda f: manual_reward(f, w)
    if kind == "paper_fixture":
        return paper_fixture_program()
    return load_program(config.reward_source.split(":", 1)[1])


@dataclass
class RunRecord:
    arm: str
    seed: int
    config_digest: str
    rows: list[dict]
    packet_size: float | None = None

    def energies(self) -> np.ndarray:
        return np.array([r["total_energy"] for r in self.rows])

    def final_energy(self, window: int = FINAL_WINDOW) -> float:
        return float(np.mean(self.energies()[-window:]))

    def initial_energy(self, window: int = FINAL_WINDOW) -> float:
        return float(np.mean(self.energies()[:window]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RUN_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in RUN_COLUMNS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, arm: str, seed: int, config_digest: str) -> "RunRecord":
        rows = []
        for raw in csv.DictReader(io.StringIO(text)):
            rows.append({k: (float(v) if k in ("total_energy", "e_tx", "e_prop", "e_wpt", "e_relay",
                                                "cumulative_reward") else int(v)) for k, v in raw.items()})
        return cls(arm, seed, config_digest, rows)


def train(config: ExperimentConfig, seed: int, progress: Callable | None = None) -> RunRecord:
    """One seeded training run: per slot act, step, score, store and update."""
    world = replace(config.world, seed=seed)
    acfg = config.agent
    env = UavIotEnv(world)
    agent = make_agent(config.algorithm, world.obs_dim, env.action_dim, acfg, seed)
    buffer = ReplayBuffer(acfg.buffer_capacity, world.obs_dim, env.action_dim)
    reward_fn = reward_function(config)
    rows = []
    steps = updates = 0
    for ep in range(config.episodes):
        obs = env.reset(seed, episode=ep)
        totals = dict.fromkeys(("e_tx", "e_prop", "e_wpt", "e_relay", "reward"), 0.0)
        vcount = dict.fromkeys(VIOLATION_KINDS, 0)
        losses = None
        while not env.done:
            action = agent.random_action() if steps < acfg.warmup_steps else agent.act(obs, explore=True)
            out = env.step(action)
            r = reward_fn(out.factors)
            if not np.isfinite(r):
                raise TrainingAborted(f"non-finite reward {r!r}", _snapshot(ep, env, out, losses))
            # time-limit truncation bootstraps; only full delivery is terminal
            buffer.add(obs, action, r, out.observation, out.terminal_state)
            obs = out.observation
            steps += 1
            if steps >= acfg.warmup_steps:
                try:
                    result = agent.update(buffer, updates)
                except NonFiniteError as exc:
                    raise TrainingAborted(str(exc), _snapshot(ep, env, out, losses)) from exc
                if result is not None:
                    updates += 1
                    losses = result
            e = out.energy
            totals["e_tx"] += e.terminal_tx
            totals["e_prop"] += e.propulsion
            totals["e_wpt"] += e.wpt
            totals["e_relay"] += e.relay
            totals["reward"] += r
            for kind in out.violations:
                vcount[kind] += 1
        total = totals["e_tx"] + totals["e_prop"] + totals["e_wpt"] + totals["e_relay"]
        rows.append({"episode": ep + 1, "total_energy": total, "e_tx": totals["e_tx"],
                     "e_prop": totals["e_prop"], "e_wpt": totals["e_wpt"], "e_relay": totals["e_relay"],
                     "slots": env.slot, "v_throughput": vcount["throughput"], "v_decode": vcount["decode"],
                     "v_freshness": vcount["freshness"], "packets_delivered": env.packets_delivered(),
                     "cumulative_reward": totals["reward"]})
        if progress is not None:
            progress(config.arm, seed, rows[-1])
    return RunRecord(config.arm, seed, config.digest(), rows)


def _snapshot(episode, env, out, losses) -> dict:
    return {"episode": episode + 1, "slot": env.slot, "uav": env.uav.position.tolist(),
            "factors": out.factors.as_dict(), "last_losses": losses}


# --- aggregation ---------------------------------------------------------------

def median_iqr(values) -> tuple[float, float, float]:
    """Median and quartiles (linear interpolation)."""
    q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return float(med), float(q1), float(q3)


def improvement(manual: float, llm: float) -> float:
    return (manual - llm) / manual


@dataclass
class ComparisonReport:
    arms: dict[str, dict]
    improvements: dict[str, float]
    packet_table: list[dict] = field(default_factory=list)
    records: list[RunRecord] = field(default_factory=list)

    def summary(self) -> dict:
        return {"arms": self.arms, "improvements": self.improvements, "packet_table": self.packet_table,
                "records_digest": records_digest(self.records)}


def records_digest(records: Sequence[RunRecord]) -> str:
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: (r.arm, r.seed, r.config_digest)):
        h.update(f"{rec.arm}|{rec.seed}|{rec.config_digest}\n".encode())
        h.update(rec.to_csv().encode())
    return h.hexdigest()


def summarize_arm(records: Sequence[RunRecord]) -> dict:
    finals = [r.final_energy() for r in records]
    initials = [r.initial_energy() for r in records]
    med, q1, q3 = median_iqr(finals)
    imed, iq1, iq3 = median_iqr(initials)
    return {"seeds": [r.seed for r in records], "final_energy": finals, "initial_energy": initials,
            "median_final": med, "q1_final": q1, "q3_final": q3, "iqr_final": q3 - q1,
            "median_initial": imed, "iqr_initial": iq3 - iq1, "convergence_ratio": med / imed}


def _check_matrix(configs: Sequence[ExperimentConfig]):
    if not configs:
        raise ExperimentError("empty config matrix")
    first = configs[0]
    for c in configs[1:]:
        if c.seeds != first.seeds:
            raise ExperimentError(f"arm {c.arm} uses seeds {c.seeds}, expected {first.seeds}")
        if replace(c.world, packet_size=first.world.packet_size) != first.world:
            raise ExperimentError(f"arm {c.arm} uses a different world configuration")
    arms = [c.arm for c in configs]
    if len(set(arms)) != len(arms):
        raise ExperimentError(f"duplicate arms in matrix: {arms}")


def run_arms(configs, cache: dict | None = None, progress=None) -> dict[str, list[RunRecord]]:
    """Train every (arm, seed); ``cache`` maps (digest, seed) to finished records."""
    out = {}
    for cfg in configs:
        recs = []
        for seed in cfg.seeds:
            key = (cfg.digest(), seed)
            if cache is not None and key in cache:
                rec = cache[key]
                rec = RunRecord(cfg.arm, seed, rec.config_digest, rec.rows)
            else:
                rec = train(cfg, seed, progress)
                if cache is not None:
                    cache[key] = rec
            recs.append(rec)
        out[cfg.arm] = recs
    return out


def compare(configs: Sequence[ExperimentConfig], cache: dict | None = None, progress=None) -> ComparisonReport:
    _check_matrix(configs)
    by_arm = run_arms(configs, cache, progress)
    arms = {arm: summarize_arm(recs) for arm, recs in by_arm.items()}
    improvements = {}
    for alg in ALGORITHMS:
        manual = arms.get(f"{alg}-manual")
        for kind in LLM_SOURCES:
            llm = arms.get(f"{alg}-{kind}")
            if manual and llm:
                improvements[f"{alg}:{kind}"] = improvement(manual["median_final"], llm["median_final"])
    records = [r for recs in by_arm.values() for r in recs]
    return ComparisonReport(arms, improvements, records=records)


def sweep_packet_size(configs: Sequence[ExperimentConfig], sizes=DEFAULT_SIZES, cache: dict | None = None,
                      progress=None) -> ComparisonReport:
    """Final-window energy per packet size and arm."""
    sizes = [float(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ExperimentError("packet sizes must be ascending")
    _check_matrix(configs)
    table, records = [], []
    arms = {}
    for size in sizes:
        sized = [replace(c, world=replace(c.world, packet_size=size)) for c in configs]
        by_arm = run_arms(sized, cache, progress)
        for arm, recs in by_arm.items():
            recs = [RunRecord(r.arm, r.seed, r.config_digest, r.rows, size) for r in recs]
            s = summarize_arm(recs)
            arms[f"{arm}@{size:g}"] = s
            table.append({"packet_size": size, "arm": arm, "median_final": s["median_final"],
                          "q1_final": s["q1_final"], "q3_final": s["q3_final"],
                          "final_energy": s["final_energy"], "seeds": s["seeds"]})
            records.extend(recs)
    improvements = {}
    for size in sizes:
        for alg in ALGORITHMS:
            m = next((r for r in table if r["packet_size"] == size and r["arm"] == f"{alg}-manual"), None)
            for kind in LLM_SOURCES:
                l = next((r for r in table if r["packet_size"] == size and r["arm"] == f"{alg}-{kind}"), None)
                if m and l:
                    improvements[f"{alg}:{kind}@{size:g}"] = improvement(m["median_final"], l["median_final"])
    return ComparisonReport(arms, improvements, packet_table=table, records=records)


# --- output ----------------------------------------------------------------------

def run_filename(rec: RunRecord, size: float | None = None) -> str:
    tag = "" if size is None else f"__p{size / 1e6:g}M"
    return f"{rec.arm}{tag}__seed{rec.seed}.csv"


def emit(report: ComparisonReport, output_dir, figures: bool = True) -> list[Path]:
    """Write one CSV per run, a plot-ready long CSV, a summary JSON and (optionally) figures."""
    out = Path(output_dir)
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot write to {out}: {exc}") from None
    written = []
    sized = bool(report.packet_table)
    long_rows = []
    for rec in report.records:
        path = out / "runs" / run_filename(rec, rec.packet_size)
        path.write_text(rec.to_csv())
        written.append(path)
        for row in rec.rows:
            long_rows.append((row["episode"], row["total_energy"], rec.arm, rec.seed, rec.packet_size))
    curves = out / ("sweep_curves.csv" if sized else "curves.csv")
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "arm", "seed", "packet_size"])
        for x, y, arm, seed, size in long_rows:
            w.writerow([x, repr(float(y)), arm, seed, "" if size is None else repr(size)])
    written.append(curves)
    if sized:
        table = out / "packet_table.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "arm", "q1", "q3", "per_seed"])
            for r in report.packet_table:
                w.writerow([repr(r["packet_size"]), repr(r["median_final"]), r["arm"], repr(r["q1_final"]),
                            repr(r["q3_final"]), " ".join(repr(v) for v in r["final_energy"])])
        written.append(table)
    summary = out / ("sweep_summary.json" if sized else "summary.json")
    summary.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    written.append(summary)
    if figures:
        from . import plots
        written.extend(plots.render(report, out))
    return written

