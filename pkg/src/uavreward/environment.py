"""Slotted simulation of a UAV collecting data from WPT-powered IoT terminals.

The UAV flies at a fixed altitude and constant speed, broadcasts wireless power
to every terminal that still holds data, schedules at most one terminal per
slot for uplink and relays the received bits to the macro base station.  Every
joule spent in the system is booked into one of four components (terminal
transmit, propulsion, WPT, relay) so that the per-slot deltas add up exactly.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

VIOLATION_KINDS = ("throughput", "decode", "freshness")
HOVER_THRESHOLD = 0.3


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class PropulsionParams:
    """Rotary-wing power model constants (blade profile, induced, parasite)."""

    blade_profile: float = 79.86  # P0, W
    induced: float = 88.63  # Pi, W
    tip_speed: float = 120.0  # m/s
    mean_induced_velocity: float = 4.03  # m/s
    drag_ratio: float = 0.6
    air_density: float = 1.225  # kg/m^3
    rotor_solidity: float = 0.05
    rotor_area: float = 0.503  # m^2


@dataclass(frozen=True)
class WorldConfig:
    area_side: float = 300.0
    n_terminals: int = 10
    uav_altitude: float = 100.0
    uav_speed: float = 10.0
    slot_duration: float = 0.5
    horizon: int = 200
    bandwidth: float = 2e5
    noise_power: float = 1e-16
    rician_k: float = 10.0
    pathloss_ref_gain: float = 1e-3
    pathloss_exponent: float = 2.3
    p_wpt: float = 5.0
    p_relay: float = 0.5
    p_tx_max: float = 2e-7
    harvest_efficiency: float = 0.6
    packet_size: float = 2.0e6
    snr_threshold: float = 2.0
    aoi_max: int = 150
    min_throughput: float = 1e5
    seed: int = 0
    propulsion: PropulsionParams = field(default_factory=PropulsionParams)

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("seed", "propulsion"):
                continue
            if f.name == "rician_k":
                # 0 is Rayleigh fading, inf is pure line of sight
                if not isinstance(self.rician_k, (int, float)) or not self.rician_k >= 0:
                    raise ConfigError("rician_k", f"must be >= 0 (inf allowed), got {self.rician_k!r}")
                continue
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise ConfigError(f.name, f"must be a finite positive number, got {value!r}")
        if self.harvest_efficiency > 1:
            raise ConfigError("harvest_efficiency", "must lie in (0, 1]")
        for name in ("n_terminals", "horizon", "aoi_max"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ConfigError(name, "must be an integer")
        if self.uav_speed * self.slot_duration >= self.area_side:
            raise ConfigError("uav_speed", "one slot of flight must not cross the whole area")

    @property
    def obs_dim(self) -> int:
        return 2 + 5 * self.n_terminals

    @property
    def tx_budget(self) -> float:
        """Energy a terminal needs before it may be scheduled (one full slot at p_tx_max)."""
        return self.p_tx_max * self.slot_duration

    @property
    def max_slot_energy(self) -> float:
        """Largest possible single-slot system energy, used to normalise the energy factor."""
        prop = max(propulsion_power(0.0, self.propulsion),
                   propulsion_power(self.uav_speed, self.propulsion))
        return (prop + self.p_wpt + self.p_relay + self.p_tx_max) * self.slot_duration

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("propulsion")
        return d


_INT_FIELDS = {"n_terminals", "horizon", "aoi_max", "seed"}


def coerce_world_fields(items: dict) -> dict:
    """Convert raw ``key -> text`` pairs into typed WorldConfig keyword arguments."""
    known = {f.name for f in fields(WorldConfig)} - {"propulsion"}
    out = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(key, "unknown WorldConfig field")
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(key, f"not a number: {raw!r}") from None
        if key in _INT_FIELDS:
            if value != int(value):
                raise ConfigError(key, "must be an integer")
            value = int(value)
        out[key] = value
    return out


def read_config_sections(path) -> dict[str, dict[str, str]]:
    """Parse a ``key = value`` file; keys before any ``[section]`` belong to ``world``."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[world]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    return {name: dict(parser.items(name)) for name in parser.sections()}


def load_world_config(path) -> WorldConfig:
    sections = read_config_sections(path)
    return WorldConfig(**coerce_world_fields(sections.get("world", {})))


def write_world_config(cfg: WorldConfig, path) -> None:
    lines = [f"{k} = {v!r}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


# --- physical models -------------------------------------------------------

def rician_power(rng: np.random.Generator, k_factor: float, size=None):
    """|h|^2 for a unit-mean-power Rician coefficient with factor ``k_factor``.

    ``k_factor = inf`` is the pure line-of-sight limit and returns exactly 1.
    """
    if math.isinf(k_factor):
        return 1.0 if size is None else np.ones(size)
    los = math.sqrt(k_factor / (k_factor + 1.0))
    sigma = math.sqrt(0.5 / (k_factor + 1.0))
    shape = (2,) if size is None else (2,) + tuple(np.atleast_1d(size))
    z = rng.standard_normal(shape) * sigma
    p = (los + z[0]) ** 2 + z[1] ** 2
    return float(p) if size is None else p


def channel_gain(distance_3d, rng: np.random.Generator, cfg: WorldConfig):
    """Large-scale path loss times Rician small-scale power; vectorised over distances."""
    d = np.asarray(distance_3d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    small = rician_power(rng, cfg.rician_k, size=d.shape if d.ndim else None)
    gain = cfg.pathloss_ref_gain * d ** (-cfg.pathloss_exponent) * small
    return float(gain) if d.ndim == 0 else gain


def snr(gain, p_tx: float, cfg: WorldConfig):
    return p_tx * gain / cfg.noise_power


def uplink_rate(gain, p_tx: float, cfg: WorldConfig):
    """Shannon rate in bits/s for transmit power ``p_tx`` over ``gain``."""
    if np.any(np.asarray(gain) < 0):
        raise ValueError("gain must be non-negative")
    if not 0 < p_tx <= cfg.p_tx_max:
        raise ValueError(f"transmit power {p_tx} outside (0, p_tx_max={cfg.p_tx_max}]")
    return cfg.bandwidth * np.log2(1.0 + snr(gain, p_tx, cfg))


def propulsion_power(speed: float, params: PropulsionParams = PropulsionParams()) -> float:
    if speed < 0:
        raise ValueError("speed must be non-negative")
    p = params
    v2 = speed * speed
    v0sq = p.mean_induced_velocity ** 2
    blade = p.blade_profile * (1.0 + 3.0 * v2 / p.tip_speed ** 2)
    induced = p.induced * math.sqrt(math.sqrt(1.0 + v2 * v2 / (4.0 * v0sq * v0sq)) - v2 / (2.0 * v0sq))
    parasite = 0.5 * p.drag_ratio * p.air_density * p.rotor_solidity * p.rotor_area * speed ** 3
    return blade + induced + parasite


def harvest(gain, duration: float, cfg: WorldConfig):
    """Linear energy-harvesting model: joules collected over ``duration`` seconds."""
    if np.any(np.asarray(gain) < 0) or duration <= 0:
        raise ValueError("gain must be >= 0 and duration > 0")
    return cfg.harvest_efficiency * cfg.p_wpt * gain * duration


@dataclass
class SlotEvents:
    """What happened on the uplink in one slot; ``terminal`` is None when nobody transmitted."""

    terminal: int | None = None
    snr: float = 0.0
    rate: float = 0.0
    bits: float = 0.0
    max_undelivered_aoi: int = 0


def constraint_check(events: SlotEvents, cfg: WorldConfig) -> frozenset[str]:
    flags = set()
    if events.terminal is not None:
        if events.snr < cfg.snr_threshold:
            flags.add("decode")
        if events.rate < cfg.min_throughput:
            flags.add("throughput")
    if events.max_undelivered_aoi > cfg.aoi_max:
        flags.add("freshness")
    return frozenset(flags)


# --- environment ------------------------------------------------------------

@dataclass
class TerminalState:
    position: np.ndarray
    residual_data: float
    harvested_energy: float = 0.0
    spent_energy: float = 0.0
    aoi: int = 0

    @property
    def delivered(self) -> bool:
        return self.residual_data == 0.0

    @property
    def available_energy(self) -> float:
        return self.harvested_energy - self.spent_energy


@dataclass
class UavState:
    position: np.ndarray
    propulsion_energy: float = 0.0
    comm_energy: float = 0.0


@dataclass(frozen=True)
class FactorValues:
    energy: float
    position: float
    aoi: float
    throughput: float
    penalty: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class EnergyBreakdown:
    terminal_tx: float = 0.0
    propulsion: float = 0.0
    wpt: float = 0.0
    relay: float = 0.0

    @property
    def total(self) -> float:
        return self.terminal_tx + self.propulsion + self.wpt + self.relay


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    factors: FactorValues
    done: bool
    energy: EnergyBreakdown
    violations: frozenset[str]
    events: SlotEvents
    terminal_state: bool = False  # all packets delivered (as opposed to horizon reached)


TRACE_COLUMNS = ("slot", "uav_x", "uav_y", "scheduled_terminal", "snr", "bits_delivered",
                 "e_tx", "e_prop", "e_wpt", "e_relay", "violations")


class UavIotEnv:
    """MDP interface over the slotted world.

    ``reset(seed)`` fixes the terminal layout; ``episode`` only reseeds the
    fading process so repeated episodes over one layout see fresh channels.
    """

    def __init__(self, config: WorldConfig, penalty_factor: float = 2.0):
        self.cfg = config
        self.penalty_factor = penalty_factor
        self.terminals: list[TerminalState] = []
        self.uav: UavState | None = None
        self.slot = 0
        self.done = True
        self._rng: np.random.Generator | None = None
        self._layout_seed = None
        self._layout: np.ndarray | None = None
        self.trace: list[dict] = []

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    action_dim = 2

    # layout is cached so repeated resets with one seed skip regeneration
    def _place(self, seed: int) -> np.ndarray:
        if self._layout_seed != seed or self._layout is None:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
            self._layout = rng.uniform(0.0, self.cfg.area_side, size=(self.cfg.n_terminals, 2))
            self._layout_seed = seed
        return self._layout

    def reset(self, seed: int | None = None, episode: int = 0) -> np.ndarray:
        cfg = self.cfg
        seed = cfg.seed if seed is None else int(seed)
        layout = self._place(seed)
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 1, int(episode)]))
        self.terminals = [TerminalState(position=layout[i].copy(), residual_data=cfg.packet_size)
                          for i in range(cfg.n_terminals)]
        self.uav = UavState(position=np.array([cfg.area_side / 2, cfg.area_side / 2]))
        self.slot = 0
        self.done = False
        self.trace = []
        return self.observation()

    # -- helpers -----------------------------------------------------------
    def _undelivered(self) -> list[int]:
        return [i for i, t in enumerate(self.terminals) if not t.delivered]

    def observation(self) -> np.ndarray:
        cfg = self.cfg
        L = cfg.area_side
        obs = np.empty(cfg.obs_dim)
        u = self.uav.position
        obs[0:2] = u / L
        for i, t in enumerate(self.terminals):
            j = 2 + 5 * i
            obs[j:j + 2] = (t.position - u) / L
            obs[j + 2] = t.residual_data / cfg.packet_size
            obs[j + 3] = min(t.aoi / cfg.aoi_max, 1.0)
            obs[j + 4] = min(t.available_energy / cfg.tx_budget, 1.0)
        return obs

    def total_energy(self) -> float:
        return (self.uav.propulsion_energy + self.uav.comm_energy
                + sum(t.spent_energy for t in self.terminals))

    def centroid_distance(self, position=None) -> float:
        """Distance from ``position`` (default: the UAV) to the centroid of undelivered terminals."""
        pending = self._undelivered()
        if not pending:
            return 0.0
        p = self.uav.position if position is None else np.asarray(position, dtype=float)
        centroid = np.mean([self.terminals[i].position for i in pending], axis=0)
        return float(np.hypot(*(p - centroid)))

    def _move(self, action) -> float:
        cfg = self.cfg
        a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
        if a.shape != (2,):
            raise ValueError(f"action must have 2 components, got shape {a.shape}")
        if math.hypot(a[0], a[1]) < HOVER_THRESHOLD:
            return 0.0
        heading = math.atan2(a[1], a[0])
        step = cfg.uav_speed * cfg.slot_duration
        old = self.uav.position
        new = np.clip(old + step * np.array([math.cos(heading), math.sin(heading)]), 0.0, cfg.area_side)
        self.uav.position = new
        return float(np.hypot(*(new - old))) / cfg.slot_duration

    def step(self, action) -> StepOutcome:
        if self.done or self.uav is None:
            raise EpisodeFinished("episode finished; call reset() first")
        cfg = self.cfg
        dt = cfg.slot_duration
        speed = self._move(action)
        e_prop = propulsion_power(speed, cfg.propulsion) * dt

        pending = self._undelivered()
        e_wpt = cfg.p_wpt * dt if pending else 0.0
        events = SlotEvents()
        e_tx = e_relay = 0.0
        if pending:
            pos = np.array([self.terminals[i].position for i in pending])
            horiz = np.hypot(*(pos - self.uav.position).T)
            dist = np.sqrt(horiz ** 2 + cfg.uav_altitude ** 2)
            gains = channel_gain(dist, self._rng, cfg)
            harvested = harvest(gains, dt, cfg)
            for k, i in enumerate(pending):
                self.terminals[i].harvested_energy += float(harvested[k])
            ready = [k for k, i in enumerate(pending)
                     if self.terminals[i].available_energy >= cfg.tx_budget]
            if ready:
                k = max(ready, key=lambda r: gains[r])
                i = pending[k]
                term = self.terminals[i]
                g = float(gains[k])
                s = float(snr(g, cfg.p_tx_max, cfg))
                rate = float(uplink_rate(g, cfg.p_tx_max, cfg))
                events.terminal, events.snr, events.rate = i, s, rate
                if s >= cfg.snr_threshold:
                    bits = min(term.residual_data, rate * dt)
                    tx_time = bits / rate
                    e_tx = cfg.p_tx_max * tx_time
                    term.residual_data = 0.0 if bits >= term.residual_data else term.residual_data - bits
                    events.bits = bits
                    e_relay = cfg.p_relay * dt
                else:
                    e_tx = cfg.p_tx_max * dt
                term.spent_energy += e_tx

        self.uav.propulsion_energy += e_prop
        self.uav.comm_energy += e_wpt + e_relay
        self.slot += 1
        for t in self.terminals:
            if not t.delivered:
                t.aoi += 1
        still = self._undelivered()
        events.max_undelivered_aoi = max((self.terminals[i].aoi for i in still), default=0)
        violations = constraint_check(events, cfg)
        energy = EnergyBreakdown(terminal_tx=e_tx, propulsion=e_prop, wpt=e_wpt, relay=e_relay)
        all_delivered = not still
        self.done = all_delivered or self.slot >= cfg.horizon

        capacity = events.rate * dt
        factors = FactorValues(
            energy=min(energy.total / cfg.max_slot_energy, 1.0),
            position=min(self.centroid_distance() / (math.sqrt(2.0) * cfg.area_side), 1.0),
            aoi=min(events.max_undelivered_aoi / cfg.aoi_max, 1.0),
            throughput=min(events.bits / capacity, 1.0) if capacity > 0 else 0.0,
            penalty=self.penalty_factor if violations else 1.0,
        )
        self.trace.append({
            "slot": self.slot,
            "uav_x": float(self.uav.position[0]),
            "uav_y": float(self.uav.position[1]),
            "scheduled_terminal": -1 if events.terminal is None else events.terminal,
            "snr": events.snr,
            "bits_delivered": events.bits,
            "e_tx": e_tx, "e_prop": e_prop, "e_wpt": e_wpt, "e_relay": e_relay,
            "violations": "|".join(sorted(violations)),
        })
        return StepOutcome(self.observation(), factors, self.done, energy, violations, events,
                           terminal_state=all_delivered)

    def packets_delivered(self) -> int:
        return sum(t.delivered for t in self.terminals)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.trace:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def with_overrides(cfg: WorldConfig, **kw) -> WorldConfig:
    return replace(cfg, **kw)
