"""LLM reward design: prompt assembly, response parsing, validation and reflection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..environment import FactorValues, WorldConfig
from ..llm import ChatRequest, Completion, Message, ProviderError
from . import dsl

PENALTY_FACTOR = 2.0
FACTOR_REGISTRY: dict[str, str] = {
    "energy": "system energy spent in the slot divided by the largest possible single-slot energy, in [0, 1]",
    "position": "distance from the UAV to the centroid of terminals that still hold data, "
                "divided by the area diagonal, in [0, 1] (0 once every packet is delivered)",
    "aoi": "largest age of information among undelivered terminals as a fraction of the freshness deadline, in [0, 1]",
    "throughput": "bits delivered in the slot as a fraction of the scheduled link's slot capacity, in [0, 1]",
    "penalty": f"constraint multiplier: 1 when the slot satisfies every constraint, {PENALTY_FACTOR:g} otherwise",
}

BOUND = 1e3
GATES = ("response_success", "json_valid", "schema_valid", "parse_valid",
         "return_type_numeric_finite", "boundedness")

PAPER_FIXTURE_EXPRESSION = "(0.6*energy + 0.4*position)*penalty"
PAPER_FIXTURE_RESPONSE = json.dumps({
    "factors": [{"name": "energy", "weight": 0.6}, {"name": "position", "weight": 0.4}],
    "expression": PAPER_FIXTURE_EXPRESSION,
    "rationale": "Penalise slot energy and keep the UAV near the centre of the terminals that "
                 "still need service; violations scale the cost.",
})


class SpecError(ValueError):
    """A response failed the JSON or schema gate; ``gate`` says which."""

    def __init__(self, gate: str, message: str):
        super().__init__(message)
        self.gate = gate


# --- prompt ------------------------------------------------------------------

@dataclass(frozen=True)
class PromptBundle:
    role_definition: str
    task_description: str

    def messages(self) -> list[Message]:
        return [Message("system", self.role_definition), Message("user", self.task_description)]


RESPONSE_SCHEMA = {
    "factors": [{"name": "<registered factor name>", "weight": "<number>"}],
    "expression": "<arithmetic over registered names, numbers, + - * / and parentheses>",
    "rationale": "<one or two sentences>",
}


def world_descriptor(cfg: WorldConfig, registry: Mapping[str, str] = FACTOR_REGISTRY) -> dict:
    """Plain-text facts about the scenario handed to the reward designer."""
    return {
        "system_model": (
            f"A single UAV flies at a fixed altitude of {cfg.uav_altitude:g} m and constant speed "
            f"{cfg.uav_speed:g} m/s over a {cfg.area_side:g} m x {cfg.area_side:g} m area with "
            f"{cfg.n_terminals} IoT terminals at fixed random positions. Each terminal holds one packet of "
            f"{cfg.packet_size / 1e6:g} Mbit. The UAV charges all terminals by wireless power transfer; a "
            f"terminal transmits once it has harvested enough energy. Channels follow Rician fading. In each "
            f"{cfg.slot_duration:g} s slot the UAV picks a flight direction or hovers, receives from at most one "
            f"terminal and relays the bits to a macro base station. An episode ends when all packets are "
            f"delivered or after {cfg.horizon} slots."
        ),
        "energy_terms": "terminal transmit energy, UAV propulsion energy, UAV wireless power transfer "
                        "energy, UAV relay energy",
        "constraints": "terminal transmit power limit, minimum uplink throughput, decoding SNR threshold, "
                       f"data freshness (age of information at most {cfg.aoi_max} slots)",
        "registry": dict(registry),
    }


def build_prompt(descriptor: Mapping, objective: str) -> PromptBundle:
    registry = descriptor.get("registry") or {}
    if not registry:
        raise ValueError("factor registry is empty")
    role = "\n".join([
        "You are a reward designer for a reinforcement learning agent.",
        "Your job: understand the system model of the task, reason from the listed observations, and write "
        "a reward function for the agent as an arithmetic expression over the given factors.",
        "",
        "Notes:",
        "1. Do not use ungiven information; only the factors listed in the task may appear.",
        "2. Focus on the few factors most relevant to the objective.",
        "3. The expression describes a per-slot cost; the training loop negates it.",
        "4. Allowed syntax: numbers, factor names, + - * / and parentheses. No functions, no code.",
        "",
        "Output format:",
        "Reply with a single JSON object and nothing else, matching this schema exactly:",
        json.dumps(RESPONSE_SCHEMA, indent=2),
    ])
    lines = [
        "System model:",
        descriptor.get("system_model", ""),
        "",
        f"Energy terms: {descriptor.get('energy_terms', '')}",
        f"Constraints: {descriptor.get('constraints', '')}",
        "",
        f"Optimization objective: {objective}",
        "",
        "Input factors (computed every slot):",
    ]
    lines += [f"- {name}: {desc}" for name, desc in registry.items()]
    lines += [
        "",
        "Infer which factors matter for the objective, choose weights, and return the reward in the JSON "
        "output format. Every name in \"factors\" and in \"expression\" must be one of the input factors.",
    ]
    return PromptBundle(role, "\n".join(lines))


# --- parsing -------------------------------------------------------------------

@dataclass(frozen=True)
class FactorWeight:
    name: str
    weight: float


@dataclass(frozen=True)
class RewardSpec:
    factors: tuple[FactorWeight, ...]
    expression: str
    rationale: str = ""

    def to_json(self) -> dict:
        return {"factors": [asdict(f) for f in self.factors], "expression": self.expression,
                "rationale": self.rationale}


def _first_json_object(text: str):
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise SpecError("json_valid", "response contains no JSON object; reply with a single JSON object")


def parse_response(raw_text: str, registry: Mapping[str, str] = FACTOR_REGISTRY) -> RewardSpec:
    obj = _first_json_object(raw_text or "")
    problems = []
    factors = obj.get("factors")
    parsed = []
    if not isinstance(factors, list) or not factors:
        problems.append('"factors" must be a non-empty list of {"name", "weight"} objects')
    else:
        for k, item in enumerate(factors):
            if not isinstance(item, dict):
                problems.append(f"factors[{k}] is not an object")
                continue
            name, weight = item.get("name"), item.get("weight")
            if not isinstance(name, str) or name not in registry:
                problems.append(f"factors[{k}].name {name!r} is not a registered factor "
                                f"({', '.join(registry)})")
            if isinstance(weight, bool) or not isinstance(weight, (int, float)) or not math.isfinite(weight):
                problems.append(f"factors[{k}].weight {weight!r} must be a finite number")
            if not problems:
                parsed.append(FactorWeight(name, float(weight)))
    expression = obj.get("expression")
    if not isinstance(expression, str) or not expression.strip():
        problems.append('"expression" must be a non-empty string')
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        problems.append('"rationale" must be a string')
    if problems:
        raise SpecError("schema_valid", "; ".join(problems))
    return RewardSpec(tuple(parsed), expression, rationale)


# --- compiled programs ---------------------------------------------------------

@dataclass(frozen=True)
class RewardProgram:
    tree: dsl.Node
    identifiers: frozenset[str]
    source: str
    minimize: bool = True

    def value(self, values) -> float:
        """Raw expression value (a cost when ``minimize``)."""
        if isinstance(values, FactorValues):
            values = values.as_dict()
        return dsl.evaluate_tree(self.tree, values)

    def __call__(self, values) -> float:
        v = self.value(values)
        return -v if self.minimize else v

    def to_json(self) -> dict:
        return {"expression": dsl.to_text(self.tree), "source": self.source,
                "identifiers": sorted(self.identifiers), "minimize": self.minimize}


def compile_expression(expression: str, registry: Mapping[str, str] = FACTOR_REGISTRY) -> RewardProgram:
    allowed = set(registry) | {"penalty"}
    tree = dsl.parse(expression, allowed)
    return RewardProgram(tree, dsl.identifiers(tree), expression)


def compile_spec(spec: RewardSpec, registry: Mapping[str, str] = FACTOR_REGISTRY) -> RewardProgram:
    return compile_expression(spec.expression, registry)


def evaluate(program: RewardProgram, values: FactorValues) -> float:
    """Reward for one slot (negated cost for minimisation objectives)."""
    return program(values)


def manual_reward(values: FactorValues, w: float = 1.0) -> float:
    if w <= 0:
        raise ValueError("weight must be positive")
    return -(w * values.energy * values.penalty)


def paper_fixture_program() -> RewardProgram:
    return compile_expression(PAPER_FIXTURE_EXPRESSION)


# --- validation ------------------------------------------------------------------

def probe_battery(seed: int = 0, n_random: int = 64, penalty_factor: float = PENALTY_FACTOR) -> list[FactorValues]:
    """Corner cases (every factor at 0 or 1, both penalty levels) plus seeded interior points."""
    probes = []
    for mask in range(16):
        bits = [(mask >> b) & 1 for b in range(4)]
        for pen in (1.0, penalty_factor):
            probes.append(FactorValues(*map(float, bits), penalty=pen))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        e, p, a, t = rng.uniform(0.0, 1.0, 4)
        pen = penalty_factor if rng.random() < 0.5 else 1.0
        probes.append(FactorValues(float(e), float(p), float(a), float(t), pen))
    return probes


@dataclass
class ValidationReport:
    gates: dict[str, bool | None] = field(default_factory=lambda: {g: None for g in GATES})
    messages: dict[str, str] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return all(self.gates[g] is True for g in GATES)

    def fail(self, gate: str, message: str) -> "ValidationReport":
        self.gates[gate] = False
        self.messages[gate] = message
        return self

    def failure_summary(self) -> str:
        return "; ".join(f"{g}: {m}" for g, m in self.messages.items())

    def to_json(self) -> dict:
        return {"gates": dict(self.gates), "messages": dict(self.messages), "accepted": self.accepted}


def validate(program: RewardProgram, probes=None, report: ValidationReport | None = None) -> ValidationReport:
    """Program-level gates; earlier gates are marked passed when no report is given."""
    if report is None:
        report = ValidationReport()
        for g in GATES[:4]:
            report.gates[g] = True
    probes = probe_battery() if probes is None else probes
    values = []
    for probe in probes:
        try:
            v = program.value(probe)
        except (dsl.RewardRuntimeError, ZeroDivisionError, OverflowError) as exc:
            return report.fail("return_type_numeric_finite",
                               f"expression is undefined on probe {probe.as_dict()}: {exc}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            return report.fail("return_type_numeric_finite",
                               f"expression returned non-finite {v!r} on probe {probe.as_dict()}")
        values.append(v)
    report.gates["return_type_numeric_finite"] = True
    worst = max(range(len(values)), key=lambda i: abs(values[i]))
    if abs(values[worst]) > BOUND:
        return report.fail("boundedness", f"|value| = {abs(values[worst]):.3g} exceeds {BOUND:g} on probe "
                                          f"{probes[worst].as_dict()}")
    report.gates["boundedness"] = True
    return report


def validate_response(response, probes=None, registry: Mapping[str, str] = FACTOR_REGISTRY):
    """Run every gate in order on a provider result; returns ``(report, program or None)``.

    ``response`` is a :class:`Completion`, raw text, or the ``ProviderError`` raised by the call.
    """
    report = ValidationReport()
    if isinstance(response, BaseException) or response is None:
        return report.fail("response_success", f"provider call failed: {response}"), None
    text = response.content if isinstance(response, Completion) else str(response)
    if not text.strip():
        return report.fail("response_success", "provider returned empty content"), None
    report.gates["response_success"] = True
    try:
        spec = parse_response(text, registry)
    except SpecError as exc:
        if exc.gate == "schema_valid":
            report.gates["json_valid"] = True
        return report.fail(exc.gate, str(exc)), None
    report.gates["json_valid"] = report.gates["schema_valid"] = True
    try:
        program = compile_spec(spec, registry)
    except (dsl.RewardSyntaxError, dsl.UnknownIdentifierError) as exc:
        return report.fail("parse_valid", str(exc)), None
    report.gates["parse_valid"] = True
    return validate(program, probes, report), program


# --- reflection loop -------------------------------------------------------------

@dataclass
class Attempt:
    round: int
    candidate: int
    request_digest: str
    response: str | None
    error: str | None
    report: ValidationReport

    def to_json(self) -> dict:
        return {"round": self.round, "candidate": self.candidate, "request_digest": self.request_digest,
                "response": self.response, "error": self.error, "report": self.report.to_json()}


@dataclass
class DesignOutcome:
    program: RewardProgram | None
    trail: list[Attempt]

    @property
    def accepted(self) -> bool:
        return self.program is not None

    @property
    def rounds(self) -> int:
        return max((a.round for a in self.trail), default=0)

    def trail_json(self) -> dict:
        return {"accepted": self.accepted, "rounds": self.rounds,
                "program": self.program.to_json() if self.program else None,
                "attempts": [a.to_json() for a in self.trail]}


def reflection_message(failures: list[Attempt]) -> str:
    lines = ["None of your previous candidates passed validation:"]
    for a in failures:
        lines.append(f"- candidate {a.candidate + 1}: {a.report.failure_summary()}")
    lines.append("Reflect on the logical consistency of the reward with the objective and the rules, then "
                 "answer again with one JSON object in the required format.")
    return "\n".join(lines)


def design_reward(prompt: PromptBundle, provider, k: int = 3, max_reflections: int = 5, model: str = "gpt-4o",
                  temperature: float = 0.7, probes=None,
                  registry: Mapping[str, str] = FACTOR_REGISTRY) -> DesignOutcome:
    """Ask for ``k`` candidates per round and reflect on failures until one passes every gate."""
    if k < 1 or max_reflections < 0:
        raise ValueError("need k >= 1 and max_reflections >= 0")
    probes = probe_battery() if probes is None else probes
    messages = prompt.messages()
    trail: list[Attempt] = []
    for rnd in range(1, max_reflections + 2):
        failures = []
        for c in range(k):
            request = ChatRequest(model, tuple(messages), temperature, seed=c)
            try:
                response = provider.complete(request)
                text, error = response.content, None
            except ProviderError as exc:
                response, text, error = exc, None, f"{exc.kind}: {exc}"
            report, program = validate_response(response, probes, registry)
            attempt = Attempt(rnd, c, request.digest(), text, error, report)
            trail.append(attempt)
            if report.accepted:
                return DesignOutcome(program, trail)
            failures.append(attempt)
        last = next((a.response for a in reversed(failures) if a.response), None)
        if last is not None:
            messages = messages + [Message("assistant", last)]
        messages = messages + [Message("user", reflection_message(failures))]
    return DesignOutcome(None, trail)
