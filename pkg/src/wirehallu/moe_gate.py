"""Expert registry and the three gates (rule, LLM with fallback, random)."""

from __future__ import annotations

import concurrent.futures
import enum
import json
import os
import re
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import yaml

from .channel_data import ALL_SCENARIOS, CarrierBand, Environment, Mobility, ScenarioClass

HIGH_BAND_GHZ = 6.0
ENDPOINT_ENV = "WIREHALLU_LLM_ENDPOINT"


class UserEnvironment(str, enum.Enum):
    LOS = "los"
    NLOS = "nlos"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class UserState:
    environment: UserEnvironment
    carrier_ghz: float
    speed_kmh: float

    def __post_init__(self):
        object.__setattr__(self, "environment", UserEnvironment(self.environment))
        if not self.carrier_ghz > 0:
            raise ValueError(f"carrier_ghz must be > 0, got {self.carrier_ghz}")
        if self.speed_kmh < 0:
            raise ValueError(f"speed_kmh must be >= 0, got {self.speed_kmh}")

    @classmethod
    def from_scenario(cls, sc: ScenarioClass) -> "UserState":
        return cls(UserEnvironment(sc.environment.value), sc.carrier_band.carrier_ghz, sc.mobility.speed_kmh)

    @property
    def band(self) -> CarrierBand:
        return CarrierBand.HIGH if self.carrier_ghz >= HIGH_BAND_GHZ else CarrierBand.LOW

    @property
    def mobility(self) -> Mobility:
        return min(Mobility, key=lambda m: (abs(m.speed_kmh - self.speed_kmh), m.speed_kmh))


@dataclass(frozen=True)
class ExpertDescriptor:
    id: str
    coverage: frozenset[ScenarioClass]
    checkpoint: str = ""

    def __post_init__(self):
        object.__setattr__(self, "coverage", frozenset(self.coverage))
        if not self.coverage:
            raise ValueError(f"expert {self.id!r} has empty coverage")
        if not re.fullmatch(r"[a-z0-9][a-z0-9_.-]*", self.id):
            raise ValueError(f"expert id {self.id!r} must be lowercase [a-z0-9_.-]")

    def describe(self) -> str:
        envs = sorted({s.environment for s in self.coverage}, key=list(Environment).index)
        bands = sorted({s.carrier_band for s in self.coverage}, key=list(CarrierBand).index)
        mobs = sorted({s.mobility for s in self.coverage}, key=list(Mobility).index)
        env_txt = " or ".join("line-of-sight" if e is Environment.LOS else "non-line-of-sight" for e in envs)
        band_txt = " or ".join(f"{b.carrier_ghz:g} GHz" for b in bands)
        mob_txt = " or ".join(f"{m.speed_kmh:g} km/h" for m in mobs)
        return f"{env_txt} propagation; carrier {band_txt}; user speed {mob_txt}"


class EmptyRegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertRegistry:
    experts: tuple[ExpertDescriptor, ...]

    def __post_init__(self):
        experts = tuple(sorted(self.experts, key=lambda e: e.id))
        ids = [e.id for e in experts]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate expert ids in {ids}")
        object.__setattr__(self, "experts", experts)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.experts]

    def __len__(self):
        return len(self.experts)

    def __contains__(self, expert_id: str) -> bool:
        return expert_id in self.ids

    def get(self, expert_id: str) -> ExpertDescriptor:
        for e in self.experts:
            if e.id == expert_id:
                return e
        raise KeyError(expert_id)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        doc = {
            "experts": [
                {"id": e.id, "coverage": sorted(s.key for s in e.coverage), "checkpoint": e.checkpoint}
                for e in self.experts
            ]
        }
        path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExpertRegistry":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls(
            tuple(
                ExpertDescriptor(
                    e["id"], frozenset(ScenarioClass.from_key(k) for k in e["coverage"]), e.get("checkpoint", "")
                )
                for e in doc.get("experts", [])
            )
        )


def default_registry(checkpoints: dict[str, str] | None = None) -> ExpertRegistry:
    """Four experts keyed by environment and band; mobility folded into coverage."""
    checkpoints = checkpoints or {}
    experts = []
    for env in Environment:
        for band in CarrierBand:
            eid = f"{env.value}-{band.value}"
            cov = frozenset(s for s in ALL_SCENARIOS if s.environment is env and s.carrier_band is band)
            experts.append(ExpertDescriptor(eid, cov, checkpoints.get(eid, "")))
    return ExpertRegistry(tuple(experts))


class GateSource(str, enum.Enum):
    RULE = "rule"
    LLM = "llm"
    FALLBACK = "fallback"
    RANDOM = "random"


@dataclass(frozen=True)
class GateDecision:
    expert_id: str
    source: GateSource
    rationale: str = ""
    latency_ms: float = field(default=0.0, compare=False)


def _require(registry: ExpertRegistry):
    if len(registry) == 0:
        raise EmptyRegistryError("expert registry is empty")


def expert_score(state: UserState, expert: ExpertDescriptor) -> float:
    best = 0.0
    for sc in expert.coverage:
        if state.environment is UserEnvironment.UNKNOWN:
            env = 0.5
        else:
            env = float(sc.environment.value == state.environment.value)
        score = 4 * env + 2 * (sc.carrier_band is state.band) + 1 * (sc.mobility is state.mobility)
        best = max(best, score)
    return best


def rule_gate(state: UserState, registry: ExpertRegistry) -> GateDecision:
    start = time.perf_counter()
    _require(registry)
    scores = {e.id: expert_score(state, e) for e in registry.experts}
    top = max(scores.values())
    choice = min(eid for eid, s in scores.items() if s == top)
    rationale = "scores " + ", ".join(f"{k}={v:g}" for k, v in scores.items())
    return GateDecision(choice, GateSource.RULE, rationale, (time.perf_counter() - start) * 1e3)


def random_gate(state: UserState, registry: ExpertRegistry, seed: int) -> GateDecision:
    _require(registry)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) % 2**64))
    choice = registry.ids[int(rng.integers(len(registry)))]
    return GateDecision(choice, GateSource.RANDOM, f"uniform draw, seed {seed}")


# ---------------------------------------------------------------------------
# LLM gate

PROMPT_TEMPLATE = """\
You are the gating network of a base-station mixture of diffusion-model channel estimators.
Choose the single expert whose coverage best matches the user state.

Experts:
{experts}

User state:
environment: {env}
carrier frequency: {ghz:g} GHz
speed: {kmh:g} km/h

Reply with exactly one line of the form
expert: <id>
"""


def build_prompt(state: UserState, registry: ExpertRegistry) -> str:
    lines = "\n".join(f"- {e.id}: {e.describe()}" for e in registry.experts)
    return PROMPT_TEMPLATE.format(
        experts=lines, env=state.environment.value.upper(), ghz=state.carrier_ghz, kmh=state.speed_kmh
    )


class GateParseError(ValueError):
    UNKNOWN_ID = "UNKNOWN_ID"
    MALFORMED = "MALFORMED"

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


_REPLY = re.compile(r"^\s*expert\s*:\s*(\S+)\s*$", re.IGNORECASE)


def parse_reply(text: str, registry: ExpertRegistry) -> str:
    for line in str(text).splitlines():
        match = _REPLY.match(line)
        if match:
            candidate = match.group(1).strip().lower()
            if candidate in registry:
                return candidate
            raise GateParseError(GateParseError.UNKNOWN_ID, f"unregistered expert {match.group(1)!r}")
    raise GateParseError(GateParseError.MALFORMED, "no 'expert: <id>' line in reply")


class CompletionClient(Protocol):
    def complete(self, prompt: str, max_tokens: int = 16, temperature: float = 0.0) -> str: ...


class HttpCompletionClient:
    """POSTs ``{"prompt", "max_tokens", "temperature"}`` JSON and reads ``{"text"}``."""

    def __init__(self, endpoint: str, timeout_s: float = 5.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def complete(self, prompt: str, max_tokens: int = 16, temperature: float = 0.0) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": max_tokens, "temperature": temperature})
        req = urllib.request.Request(
            self.endpoint, data=body.encode("utf-8"), headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            doc = json.loads(resp.read().decode("utf-8"))
        if not isinstance(doc, dict) or not isinstance(doc.get("text"), str):
            raise ValueError("completion response lacks a 'text' string")
        return doc["text"]


_STATE_RE = {
    "env": re.compile(r"^environment:\s*(\w+)", re.M),
    "ghz": re.compile(r"^carrier frequency:\s*([\d.eE+-]+)\s*GHz", re.M),
    "kmh": re.compile(r"^speed:\s*([\d.eE+-]+)\s*km/h", re.M),
}


class MockCompletionClient:
    """Deterministic stand-in for the LLM: reads the user state back out of
    the prompt and answers with the rule gate's choice."""

    def __init__(self, registry: ExpertRegistry):
        self.registry = registry

    def complete(self, prompt: str, max_tokens: int = 16, temperature: float = 0.0) -> str:
        env = _STATE_RE["env"].search(prompt).group(1).lower()
        ghz = float(_STATE_RE["ghz"].search(prompt).group(1))
        kmh = float(_STATE_RE["kmh"].search(prompt).group(1))
        state = UserState(UserEnvironment(env), ghz, kmh)
        return f"expert: {rule_gate(state, self.registry).expert_id}\n"


class ScriptedClient:
    """Replays canned replies in order, cycling. An exception instance is
    raised; a ``(delay_s, reply)`` tuple sleeps before answering."""

    def __init__(self, replies: Iterable):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, prompt: str, max_tokens: int = 16, temperature: float = 0.0) -> str:
        reply = self.replies[self.calls % len(self.replies)]
        self.calls += 1
        if isinstance(reply, tuple):
            delay, reply = reply
            time.sleep(delay)
        if isinstance(reply, BaseException):
            raise reply
        return reply


def make_client(endpoint: str | None, registry: ExpertRegistry) -> CompletionClient:
    endpoint = os.environ.get(ENDPOINT_ENV, endpoint or "")
    if not endpoint:
        return MockCompletionClient(registry)
    return HttpCompletionClient(endpoint)


_POOL = concurrent.futures.ThreadPoolExecutor(max_workers=4, thread_name_prefix="llm-gate")


def llm_gate(
    state: UserState, registry: ExpertRegistry, client: CompletionClient, timeout_ms: float = 2000.0
) -> GateDecision:
    start = time.perf_counter()
    fallback = rule_gate(state, registry)

    def elapsed():
        return (time.perf_counter() - start) * 1e3

    try:
        prompt = build_prompt(state, registry)
        future = _POOL.submit(client.complete, prompt, 16, 0.0)
        text = future.result(timeout=timeout_ms / 1e3)
        expert_id = parse_reply(text, registry)
    except (concurrent.futures.TimeoutError, TimeoutError):
        return GateDecision(fallback.expert_id, GateSource.FALLBACK, "timeout", elapsed())
    except GateParseError as exc:
        return GateDecision(fallback.expert_id, GateSource.FALLBACK, f"{exc.kind}: {exc}", elapsed())
    except Exception as exc:  # any client failure falls back to the rule gate
        return GateDecision(
            fallback.expert_id, GateSource.FALLBACK, f"client error: {type(exc).__name__}: {exc}", elapsed()
        )
    return GateDecision(expert_id, GateSource.LLM, str(text).strip(), elapsed())


def scenario_state(scenarios: Sequence[ScenarioClass]) -> list[UserState]:
    return [UserState.from_scenario(s) for s in scenarios]
