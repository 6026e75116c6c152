"""Agentic nodes: constitution, reasoner backends and the safety parser.

An agent turns its inbox into a reasoner query (rendered constitution + RAG
context + inbox payloads), asks its backend, and publishes only replies that
pass :func:`validate`. Blocked replies become events on ``safety/events``;
backend failures become events on ``agent/faults``. ``step`` never raises on
reasoner output.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import yaml

from .bus import Bus, BusError, Envelope, TopicSchema

log = logging.getLogger(__name__)

SAFETY_TOPIC = "safety/events"
FAULT_TOPIC = "agent/faults"
VIOLATION_KINDS = ("syntax", "schema", "limit")
SPEED_KEYS = ("speed",)
VELOCITY_KEYS = ("vx", "vy", "vz")
_PARAM = re.compile(r"^\s*([A-Za-z][\w ]*?)\s*[:=]\s*(-?\d+(?:\.\d+)?(?:[eE]-?\d+)?)")


# ---------------------------------------------------------------------------
# constitution


@dataclass(frozen=True)
class Constitution:
    core_directive: str
    domain_knowledge: tuple[str, ...] = ()
    reasoning_guidelines: tuple[str, ...] = ()
    output_schema_id: str = "text"
    constraint_clauses: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("domain_knowledge", "reasoning_guidelines", "constraint_clauses"):
            object.__setattr__(self, name, tuple(str(x) for x in getattr(self, name)))
        if not self.core_directive.strip():
            raise ValueError("constitution needs a core directive")
        if not self.output_schema_id:
            raise ValueError("constitution needs an output schema id")

    def render(self) -> str:
        """System text: directive, knowledge, guidelines, constraints, output format."""
        parts = ["DIRECTIVE:", self.core_directive.strip()]
        if self.domain_knowledge:
            parts.append("DOMAIN KNOWLEDGE:")
            parts += [f"- {x}" for x in self.domain_knowledge]
        if self.reasoning_guidelines:
            parts.append("GUIDELINES:")
            parts += [f"- {x}" for x in self.reasoning_guidelines]
        if self.constraint_clauses:
            parts.append("CONSTRAINTS:")
            parts += [f"- {x}" for x in self.constraint_clauses]
        parts.append("OUTPUT FORMAT:")
        parts.append(
            f"Reply with one JSON object conforming to schema '{self.output_schema_id}', "
            "or the single word NOOP when no action is needed."
        )
        return "\n".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()[:16]

    def with_clause(self, clause: str) -> "Constitution":
        return replace(self, constraint_clauses=self.constraint_clauses + (clause,))

    def param(self, name: str, default: float | None = None) -> float | None:
        """Numeric parameter embedded in a domain fact such as ``tether_length: 10``."""
        key = name.lower().replace(" ", "_")
        for fact in self.domain_knowledge:
            m = _PARAM.match(fact)
            if m and m.group(1).strip().lower().replace(" ", "_") == key:
                return float(m.group(2))
        return default

    def to_text(self) -> str:
        data = {
            "core_directive": self.core_directive,
            "domain_knowledge": list(self.domain_knowledge),
            "reasoning_guidelines": list(self.reasoning_guidelines),
            "output_schema_id": self.output_schema_id,
            "constraint_clauses": list(self.constraint_clauses),
        }
        return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)

    @classmethod
    def from_text(cls, text: str) -> "Constitution":
        data = yaml.safe_load(text)
        if not isinstance(data, dict) or "core_directive" not in data:
            raise ValueError("constitution file needs a core_directive section")
        unknown = set(data) - {"core_directive", "domain_knowledge", "reasoning_guidelines",
                               "output_schema_id", "constraint_clauses"}
        if unknown:
            raise ValueError(f"unknown constitution sections: {sorted(unknown)}")
        return cls(
            core_directive=str(data["core_directive"]),
            domain_knowledge=tuple(data.get("domain_knowledge") or ()),
            reasoning_guidelines=tuple(data.get("reasoning_guidelines") or ()),
            output_schema_id=str(data.get("output_schema_id", "text")),
            constraint_clauses=tuple(data.get("constraint_clauses") or ()),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Constitution":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def constraint_lines(system_text: str) -> list[str]:
    """Read back the constraint clauses from rendered system text."""
    lines = system_text.splitlines()
    try:
        i = lines.index("CONSTRAINTS:")
    except ValueError:
        return []
    out = []
    for line in lines[i + 1:]:
        if not line.startswith("- "):
            break
        out.append(line[2:])
    return out


# ---------------------------------------------------------------------------
# safety parser


@dataclass(frozen=True)
class SafetyLimits:
    max_speed: float = 1.0
    max_depth: float = 50.0
    workspace: tuple = ((-1e6, 1e6), (-1e6, 1e6), (0.0, 1e6))

    def __post_init__(self):
        vals = [self.max_speed, self.max_depth, *[v for axis in self.workspace for v in axis]]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("safety limits must be finite")
        if self.max_speed <= 0 or self.max_depth <= 0:
            raise ValueError("max_speed and max_depth must be positive")
        for lo, hi in self.workspace:
            if lo > hi:
                raise ValueError("workspace axis has lo > hi")


@dataclass(frozen=True)
class Violation:
    kind: str  # syntax | schema | limit
    detail: str

    def __post_init__(self):
        if self.kind not in VIOLATION_KINDS:
            raise ValueError(f"unknown violation kind {self.kind!r}")


def _num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_limits(node: Any, limits: SafetyLimits, path: str, depth: int = 0) -> Violation | None:
    if depth > 64:
        return Violation("limit", f"payload nested too deeply at {path or 'root'}")
    if isinstance(node, list):
        for i, item in enumerate(node):
            v = _check_limits(item, limits, f"{path}[{i}]", depth + 1)
            if v:
                return v
        return None
    if not isinstance(node, dict):
        return None
    for key in SPEED_KEYS:
        if key in node and _num(node[key]) and abs(node[key]) > limits.max_speed:
            return Violation("limit", "speed")
    comps = [node[k] for k in VELOCITY_KEYS if k in node and _num(node[k])]
    if comps and math.sqrt(sum(c * c for c in comps)) > limits.max_speed:
        return Violation("limit", "speed")
    if "depth" in node and _num(node["depth"]) and not 0.0 <= node["depth"] <= limits.max_depth:
        return Violation("limit", "depth")
    if "x" in node and "y" in node and _num(node["x"]) and _num(node["y"]):
        (x0, x1), (y0, y1), (z0, z1) = limits.workspace
        if not (x0 <= node["x"] <= x1 and y0 <= node["y"] <= y1):
            return Violation("limit", f"workspace at {path or 'root'}")
        z = node.get("z")
        if _num(z):
            if not 0.0 <= z <= limits.max_depth:
                return Violation("limit", "depth")
            if not z0 <= z <= z1:
                return Violation("limit", f"workspace at {path or 'root'}")
    for key, value in node.items():
        if isinstance(value, (dict, list)):
            v = _check_limits(value, limits, f"{path}.{key}" if path else str(key), depth + 1)
            if v:
                return v
    return None


def parse_reply(text: str | bytes) -> Any:
    """JSON-decode a reply; raises Violation-carrying ValueError on bad syntax."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise _SyntaxError(f"invalid utf-8 at byte {exc.start}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _SyntaxError(f"{exc.msg} at position {exc.pos}") from None
    except (RecursionError, ValueError) as exc:
        raise _SyntaxError(f"unparseable reply: {type(exc).__name__}") from None


class _SyntaxError(ValueError):
    pass


def validate(candidate: Any, schema: TopicSchema, limits: SafetyLimits) -> Violation | None:
    """Gate one candidate payload. Returns ``None`` on pass, else the violation."""
    try:
        if isinstance(candidate, (str, bytes)):
            try:
                candidate = parse_reply(candidate)
            except _SyntaxError as exc:
                return Violation("syntax", str(exc))
        reason = schema.check(candidate)
        if reason:
            return Violation("schema", reason)
        return _check_limits(candidate, limits, "")
    except RecursionError:
        return Violation("syntax", "payload nested too deeply")


# ---------------------------------------------------------------------------
# reasoners


class BackendFault(Exception):
    pass


class PlaybackExhausted(BackendFault):
    pass


@dataclass(frozen=True)
class ReasonerQuery:
    system_text: str
    context: tuple = ()
    user_content: str = ""
    role: str = ""
    history: tuple = ()  # ((user, assistant), ...)

    def __post_init__(self):
        if not self.system_text:
            raise ValueError("system_text must be non-empty")


@dataclass(frozen=True)
class ReasonerReply:
    content: str
    structured: Any = None


RuleFn = Callable[[ReasonerQuery], str]


class TemplateBackend:
    """Deterministic rule engine keyed by agent role."""

    kind = "template"

    def __init__(self, rules: Mapping[str, RuleFn] | None = None):
        self.rules = dict(rules) if rules is not None else None

    def infer(self, query: ReasonerQuery) -> ReasonerReply:
        rules = self.rules if self.rules is not None else builtin_rules()
        rule = rules.get(query.role)
        if rule is None:
            raise BackendFault(f"no template rule for role {query.role!r}")
        content = rule(query)
        if not content:
            raise BackendFault("template rule produced empty content")
        return ReasonerReply(content)


class PlaybackBackend:
    """Replays a recorded transcript of reply strings, one per call."""

    kind = "playback"

    def __init__(self, transcript: Sequence[str]):
        self.transcript = list(transcript)
        self.cursor = 0

    @classmethod
    def load(cls, path: str | Path) -> "PlaybackBackend":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls([r["content"] if isinstance(r, dict) else str(r) for r in rows])

    def infer(self, query: ReasonerQuery) -> ReasonerReply:
        if self.cursor >= len(self.transcript):
            raise PlaybackExhausted(f"playback exhausted after {len(self.transcript)} replies")
        content = self.transcript[self.cursor]
        self.cursor += 1
        return ReasonerReply(content)


def _dig(data: Any, path: str) -> Any:
    for part in re.findall(r"[^.\[\]]+", path):
        if isinstance(data, list):
            data = data[int(part)]
        else:
            data = data[part]
    return data


class RemoteBackend:
    """Chat-completion style HTTP backend with bounded retries."""

    kind = "remote"

    def __init__(
        self,
        url: str,
        model: str = "default",
        timeout: float = 10.0,
        retries: int = 2,
        temperature: float = 0.0,
        content_path: str = "choices[0].message.content",
    ):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.temperature = temperature
        self.content_path = content_path

    def request_body(self, query: ReasonerQuery) -> dict:
        system = query.system_text
        if query.context:
            system += "\nCONTEXT:\n" + "\n".join(f"- {c}" for c in query.context)
        messages = [{"role": "system", "content": system}]
        for user, assistant in query.history:
            messages.append({"role": "user", "content": user})
            messages.append({"role": "assistant", "content": assistant})
        messages.append({"role": "user", "content": query.user_content or "(empty inbox)"})
        return {"model": self.model, "messages": messages, "temperature": self.temperature}

    def infer(self, query: ReasonerQuery) -> ReasonerReply:
        body = json.dumps(self.request_body(query)).encode()
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode())
                content = _dig(data, self.content_path)
                if not isinstance(content, str) or not content:
                    raise BackendFault("response has no string content")
                return ReasonerReply(content)
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, IndexError, TypeError) as exc:
                last = exc
                log.warning("remote reasoner attempt %d failed: %s", attempt + 1, exc)
            except BackendFault as exc:
                last = exc
        raise BackendFault(f"remote backend failed after {self.retries + 1} attempts: {last}")


def infer(backend: Any, query: ReasonerQuery) -> ReasonerReply:
    return backend.infer(query)


_BUILTIN: dict[str, RuleFn] = {}


def register_rule(role: str) -> Callable[[RuleFn], RuleFn]:
    def deco(fn: RuleFn) -> RuleFn:
        _BUILTIN[role] = fn
        return fn
    return deco


def builtin_rules() -> dict[str, RuleFn]:
    # role modules register their rules on import
    for name in ("diagnostics", "mission", "recovery", "tuning"):
        importlib.import_module(f".{name}", __package__)

    return dict(_BUILTIN)


def inbox_payloads(query: ReasonerQuery) -> list[dict]:
    if not query.user_content:
        return []
    try:
        items = json.loads(query.user_content)
    except json.JSONDecodeError:
        return []
    return items if isinstance(items, list) else []


@register_rule("noop")
def _noop_rule(query: ReasonerQuery) -> str:
    return "NOOP"


@register_rule("echo")
def _echo_rule(query: ReasonerQuery) -> str:
    items = inbox_payloads(query)
    return json.dumps(items[-1]["payload"]) if items else "NOOP"


def text_param(system_text: str, name: str, default: float) -> float:
    """Numeric ``name: value`` fact read back from rendered system text."""
    for line in system_text.splitlines():
        m = _PARAM.match(line[2:] if line.startswith("- ") else line)
        if m and m.group(1).strip().lower().replace(" ", "_") == name:
            return float(m.group(2))
    return default


@register_rule("planner")
def _planner_rule(query: ReasonerQuery) -> str:
    """Straight-line waypoints at 1 m spacing from start to the newest goal."""
    goals = [it["payload"] for it in inbox_payloads(query) if isinstance(it.get("payload"), dict)
             and "x" in it["payload"] and "y" in it["payload"]]
    if not goals:
        return "NOOP"
    g = goals[-1]
    sx, sy = g.get("start_x", 0.0), g.get("start_y", 0.0)
    z = g.get("z", 0.0)
    speed = text_param(query.system_text, "cruise_speed", 0.5)
    n = max(1, int(math.ceil(math.hypot(g["x"] - sx, g["y"] - sy))))
    pts = [
        {"x": round(sx + (g["x"] - sx) * i / n, 6), "y": round(sy + (g["y"] - sy) * i / n, 6), "z": z, "speed": speed}
        for i in range(1, n + 1)
    ]
    return json.dumps({"waypoints": pts})


# ---------------------------------------------------------------------------
# agents


@dataclass
class AgentSpec:
    agent_id: str
    role: str
    constitution: Constitution
    subscriptions: tuple[str, ...] = ()
    publications: tuple[str, ...] = ()
    reasoner: Any = field(default_factory=TemplateBackend)
    limits: SafetyLimits = field(default_factory=SafetyLimits)


class AgentError(Exception):
    pass


class Agent:
    def __init__(self, spec: AgentSpec, bus: Bus, subs: list | None = None, pending: list | None = None,
                 episode: int = 1):
        self.spec = spec
        self.bus = bus
        self.subs = subs if subs is not None else [bus.subscribe(t, spec.agent_id) for t in spec.subscriptions]
        self.pending: list[Envelope] = pending or []
        self.history: list[tuple[str, str]] = []
        self.episode = episode
        self.retired = False
        self.blocked: list[Violation] = []

    @property
    def id(self) -> str:
        return self.spec.agent_id

    @property
    def constitution(self) -> Constitution:
        return self.spec.constitution

    def collect(self) -> None:
        """Move newly delivered envelopes into the agent's pending inbox."""
        for sub in self.subs:
            self.pending.extend(sub.drain())

    def inbox(self) -> list[Envelope]:
        self.collect()
        return list(self.pending)

    def _event(self, topic: str, payload: dict) -> None:
        if topic in self.bus.topics:
            self.bus.emit(topic, payload, self.id)

    def step(self, inbox: Sequence[Envelope] | None = None, rag_context: Sequence[str] | None = None,
             publish: bool = True) -> list[Envelope]:
        if self.retired:
            raise AgentError(f"agent {self.id!r} has been retired")
        self.collect()
        msgs = self.pending + list(inbox or ())
        self.pending = []
        user = json.dumps([{"topic": e.topic, "payload": e.payload} for e in msgs], sort_keys=True)
        try:
            query = ReasonerQuery(
                system_text=self.constitution.render(),
                context=tuple(rag_context or ()),
                user_content=user,
                role=self.spec.role,
                history=tuple(self.history),
            )
            reply = infer(self.spec.reasoner, query)
            content = reply.content if reply.structured is None else reply.structured
        except BackendFault as exc:
            self._event(FAULT_TOPIC, {"agent_id": self.id, "kind": "backend_fault", "detail": str(exc)[:500]})
            return []
        except Exception as exc:  # a broken backend must not take the node down
            log.exception("reasoner for %s crashed", self.id)
            self._event(FAULT_TOPIC, {"agent_id": self.id, "kind": "backend_fault",
                                      "detail": f"{type(exc).__name__}: {exc}"[:500]})
            return []
        self.history.append((user, _history_text(content)))
        return self._gate(content, publish)

    def _gate(self, content: Any, publish: bool) -> list[Envelope]:
        if isinstance(content, str) and content.strip().upper() == "NOOP":
            return []
        schema = self.bus.registry.get(self.constitution.output_schema_id)
        if isinstance(content, (str, bytes)):
            try:
                parsed = parse_reply(content)
            except _SyntaxError as exc:
                self._block(Violation("syntax", str(exc)))
                return []
        else:
            parsed = content
        candidates = parsed if isinstance(parsed, list) else [parsed]
        outbox = []
        for cand in candidates:
            verdict = validate(cand, schema, self.spec.limits)
            if verdict is not None:
                self._block(verdict)
                continue
            if not self.spec.publications:
                continue
            env = Envelope(self.spec.publications[0], cand, self.id)
            if publish:
                res = self.bus.publish(env)
                if not res:
                    self._block(Violation("schema", res.reason))
                    continue
                env = res.envelope
            outbox.append(env)
        return outbox

    def _block(self, v: Violation) -> None:
        self.blocked.append(v)
        self._event(SAFETY_TOPIC, {"agent_id": self.id, "kind": v.kind, "detail": v.detail[:500]})


def _history_text(content: Any) -> str:
    if isinstance(content, str):
        return content
    if isinstance(content, bytes):
        return content.decode("utf-8", errors="replace")
    try:
        return json.dumps(content)
    except (TypeError, ValueError):
        return repr(content)


def instantiate(spec: AgentSpec, bus: Bus) -> Agent:
    if spec.agent_id in bus.agents:
        raise AgentError(f"duplicate agent id {spec.agent_id!r}")
    for topic in (*spec.subscriptions, *spec.publications):
        if topic not in bus.topics:
            raise BusError(f"unknown topic {topic!r}")
    if spec.constitution.output_schema_id not in bus.registry:
        raise AgentError(f"unknown output schema {spec.constitution.output_schema_id!r}")
    agent = Agent(spec, bus)
    bus.agents.add(spec.agent_id)
    return agent


def retune(agent: Agent, new_constitution: Constitution) -> Agent:
    """Retire *agent* and start a fresh instance under a new constitution.

    Subscriptions and undelivered inbox carry over; reasoner history does not.
    """
    if not isinstance(new_constitution, Constitution):
        raise AgentError("invalid constitution")
    if new_constitution.output_schema_id not in agent.bus.registry:
        raise AgentError(f"unknown output schema {new_constitution.output_schema_id!r}")
    agent.collect()
    agent.retired = True
    spec = replace(agent.spec, constitution=new_constitution)
    return Agent(spec, agent.bus, subs=agent.subs, pending=list(agent.pending), episode=agent.episode + 1)
