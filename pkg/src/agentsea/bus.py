"""Deterministic in-process publish/subscribe bus with lockstep delivery.

Every message is an :class:`Envelope` on a named topic. Topics are bound to a
:class:`TopicSchema`; payloads are validated on publish so nothing malformed
ever reaches a subscriber. In lockstep mode published envelopes are queued and
delivered in one batch on the next :meth:`Bus.tick`, sorted by
``(topic, publisher_id, seq)``. Delivered envelopes are recorded into a
:class:`Trace` which can be written as JSON Lines and replayed on a fresh bus.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

SCALAR_KINDS = ("number", "int", "bool", "str", "list", "dict", "any")


class BusError(Exception):
    """Raised for unknown topics, bad registrations and replay mismatches."""


class ConfigDigestMismatch(BusError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "number"
    lo: float | None = None
    hi: float | None = None
    enum: tuple | None = None
    required: bool = True
    # list fields: a scalar kind string, or a tuple of FieldSpec for dict items
    items: Any = None

    def __post_init__(self):
        if self.kind not in SCALAR_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise ValueError(f"field {self.name}: range lo > hi")

    def describe(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.lo is not None:
            out["lo"] = self.lo
        if self.hi is not None:
            out["hi"] = self.hi
        if self.enum is not None:
            out["enum"] = list(self.enum)
        if isinstance(self.items, tuple):
            out["items"] = [f.describe() for f in self.items]
        elif self.items is not None:
            out["items"] = self.items
        return out


@dataclass(frozen=True)
class TopicSchema:
    schema_id: str
    fields: tuple[FieldSpec, ...]
    allow_extra: bool = False

    def describe(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "allow_extra": self.allow_extra,
            "fields": [f.describe() for f in self.fields],
        }

    def check(self, payload: Any) -> str | None:
        """Return ``None`` if *payload* conforms, else a reason naming the field."""
        return _check_fields(self.fields, payload, "", self.allow_extra)


def _kind_ok(kind: str, value: Any) -> bool:
    if kind == "any":
        return True
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return (
            isinstance(value, (int, float))
            and not isinstance(value, bool)
            and math.isfinite(value)
        )
    if kind == "str":
        return isinstance(value, str)
    if kind == "list":
        return isinstance(value, list)
    if kind == "dict":
        return isinstance(value, dict)
    return False


def _check_value(spec: FieldSpec, value: Any, path: str) -> str | None:
    if not _kind_ok(spec.kind, value):
        return f"bad type for field {path!r}: expected {spec.kind}"
    if spec.kind in ("number", "int"):
        if spec.lo is not None and value < spec.lo:
            return f"field {path!r} below range ({value} < {spec.lo})"
        if spec.hi is not None and value > spec.hi:
            return f"field {path!r} above range ({value} > {spec.hi})"
    if spec.enum is not None and value not in spec.enum:
        return f"field {path!r} not in enum"
    if spec.kind == "list" and spec.items is not None:
        for i, item in enumerate(value):
            sub = f"{path}[{i}]"
            if isinstance(spec.items, tuple):
                reason = _check_fields(spec.items, item, sub + ".", False)
            else:
                reason = None if _kind_ok(spec.items, item) else f"bad type for field {sub!r}"
            if reason:
                return reason
    return None


def _check_fields(fields: Iterable[FieldSpec], payload: Any, prefix: str, allow_extra: bool) -> str | None:
    if not isinstance(payload, dict):
        return f"payload{(' ' + prefix.rstrip('.')) if prefix else ''} is not a mapping"
    known = set()
    for spec in fields:
        known.add(spec.name)
        path = prefix + spec.name
        if spec.name not in payload:
            if spec.required:
                return f"missing field {path!r}"
            continue
        reason = _check_value(spec, payload[spec.name], path)
        if reason:
            return reason
    if not allow_extra:
        extra = sorted(set(payload) - known)
        if extra:
            return f"unexpected field {prefix + str(extra[0])!r}"
    return None


class SchemaRegistry:
    def __init__(self, schemas: Iterable[TopicSchema] = ()):
        self._schemas: dict[str, TopicSchema] = {}
        for s in schemas:
            self.register(s)

    def register(self, schema: TopicSchema) -> None:
        if schema.schema_id in self._schemas:
            raise BusError(f"schema {schema.schema_id!r} already registered")
        self._schemas[schema.schema_id] = schema

    def get(self, schema_id: str) -> TopicSchema:
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise BusError(f"unknown schema {schema_id!r}") from None

    def __contains__(self, schema_id: str) -> bool:
        return schema_id in self._schemas

    def __iter__(self):
        return iter(sorted(self._schemas))

    def describe(self) -> list[dict]:
        return [self._schemas[k].describe() for k in sorted(self._schemas)]


def plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode()).hexdigest()


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: Any
    publisher_id: str = ""
    schema_id: str = ""
    seq: int | None = None
    stamp: float | None = None

    def to_record(self, tick: int) -> dict:
        return {
            "tick": tick,
            "topic": self.topic,
            "schema": self.schema_id,
            "seq": self.seq,
            "stamp": self.stamp,
            "pub": self.publisher_id,
            "payload": self.payload,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Envelope":
        return cls(
            topic=rec["topic"],
            payload=rec["payload"],
            publisher_id=rec["pub"],
            schema_id=rec["schema"],
            seq=rec["seq"],
            stamp=rec["stamp"],
        )


@dataclass(frozen=True)
class PublishResult:
    accepted: bool
    reason: str = ""
    envelope: Envelope | None = None

    def __bool__(self) -> bool:
        return self.accepted


class Subscription:
    """Inbox for one subscriber on one topic.

    ``received`` keeps the full delivery history (used for digests); ``drain``
    hands out envelopes not yet consumed.
    """

    def __init__(self, topic: str, subscriber_id: str):
        self.topic = topic
        self.subscriber_id = subscriber_id
        self.received: list[Envelope] = []
        self._cursor = 0

    def _deliver(self, env: Envelope) -> None:
        self.received.append(env)

    def drain(self) -> list[Envelope]:
        out = self.received[self._cursor:]
        self._cursor = len(self.received)
        return out

    def pending(self) -> int:
        return len(self.received) - self._cursor

    def digest(self) -> str:
        return digest([e.to_record(0) for e in self.received])

    def __iter__(self):
        return iter(self.drain())

    def __len__(self) -> int:
        return self.pending()


@dataclass
class Trace:
    seed: int
    config_digest: str
    entries: list[tuple[int, Envelope]] = field(default_factory=list)
    subscriptions: dict[str, list[str]] = field(default_factory=dict)
    topics: dict[str, str] = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "config_digest": self.config_digest,
            "subscriptions": self.subscriptions,
            "topics": self.topics,
        }

    def to_jsonl(self) -> str:
        lines = [canonical_json(self.header())]
        lines += [canonical_json(env.to_record(tick)) for tick, env in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            raise BusError("empty trace file")
        head = rows[0]
        trace = cls(seed=head["seed"], config_digest=head["config_digest"],
                    subscriptions=head.get("subscriptions", {}), topics=head.get("topics", {}))
        prev = -1
        for rec in rows[1:]:
            if rec["tick"] < prev:
                raise BusError("trace tick indices decrease")
            prev = rec["tick"]
            trace.entries.append((rec["tick"], Envelope.from_record(rec)))
        return trace

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        return cls.from_jsonl(Path(path).read_text())


class Bus:
    def __init__(self, registry: SchemaRegistry, seed: int = 0, lockstep: bool = True):
        self.registry = registry
        self.seed = seed
        self.lockstep = lockstep
        self.clock = 0.0
        self.tick_index = 0
        self.topics: dict[str, str] = {}
        self.agents: set[str] = set()
        self._subs: dict[str, list[Subscription]] = defaultdict(list)
        self._queue: list[Envelope] = []
        self._last_seq: dict[tuple[str, str], int] = {}
        self._last_stamp: dict[tuple[str, str], float] = {}
        self._tickers: list[Callable[["Bus"], None]] = []
        self._lock = threading.RLock()
        self.trace_entries: list[tuple[int, Envelope]] = []

    # -- configuration -------------------------------------------------
    def register_topic(self, topic: str, schema_id: str) -> None:
        if schema_id not in self.registry:
            raise BusError(f"unknown schema {schema_id!r}")
        current = self.topics.get(topic)
        if current is not None and current != schema_id:
            raise BusError(f"topic {topic!r} already bound to {current!r}")
        self.topics[topic] = schema_id

    def config_digest(self) -> str:
        return digest({"schemas": self.registry.describe(), "topics": self.topics})

    def subscribe(self, topic: str, subscriber_id: str) -> Subscription:
        if topic not in self.topics:
            raise BusError(f"unknown topic {topic!r}")
        sub = Subscription(topic, subscriber_id)
        with self._lock:
            self._subs[topic].append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def add_ticker(self, fn: Callable[["Bus"], None]) -> None:
        """Register a callback run after each tick's deliveries (deployed nodes)."""
        with self._lock:
            self._tickers.append(fn)

    def remove_ticker(self, fn: Callable[["Bus"], None]) -> None:
        with self._lock:
            if fn in self._tickers:
                self._tickers.remove(fn)

    # -- traffic -------------------------------------------------------
    def publish(self, env: Envelope) -> PublishResult:
        with self._lock:
            schema_id = self.topics.get(env.topic)
            if schema_id is None:
                return PublishResult(False, f"unknown topic {env.topic!r}")
            if env.schema_id and env.schema_id != schema_id:
                return PublishResult(False, f"schema {env.schema_id!r} does not match topic schema {schema_id!r}")
            try:
                payload = plain(env.payload)
                canonical_json(payload)
            except (TypeError, ValueError) as exc:
                return PublishResult(False, f"payload not serializable: {exc}")
            reason = self.registry.get(schema_id).check(payload)
            if reason:
                return PublishResult(False, reason)
            key = (env.topic, env.publisher_id)
            last = self._last_seq.get(key, -1)
            seq = last + 1 if env.seq is None else int(env.seq)
            if seq <= last:
                return PublishResult(False, f"seq {seq} not increasing on {key}")
            stamp = self.clock if env.stamp is None else float(env.stamp)
            if stamp < self._last_stamp.get(key, 0.0) or stamp < 0:
                return PublishResult(False, "stamp decreases within publisher stream")
            self._last_seq[key] = seq
            self._last_stamp[key] = stamp
            final = Envelope(env.topic, payload, env.publisher_id, schema_id, seq, stamp)
            if self.lockstep:
                self._queue.append(final)
            else:
                self._deliver([final])
            return PublishResult(True, envelope=final)

    def emit(self, topic: str, payload: Any, publisher_id: str) -> PublishResult:
        return self.publish(Envelope(topic, payload, publisher_id))

    def _deliver(self, batch: list[Envelope]) -> None:
        for env in batch:
            self.trace_entries.append((self.tick_index, env))
            for sub in self._subs.get(env.topic, ()):
                sub._deliver(env)

    def tick(self, dt: float) -> int:
        if dt <= 0:
            raise ValueError("dt must be positive")
        with self._lock:
            batch = sorted(self._queue, key=lambda e: (e.topic, e.publisher_id, e.seq))
            self._queue = []
            self._deliver(batch)
            self.tick_index += 1
            self.clock += dt
            tickers = list(self._tickers)
        for fn in tickers:
            fn(self)
        return len(batch)

    def queued(self) -> int:
        return len(self._queue)

    # -- recording -----------------------------------------------------
    def subscription_map(self) -> dict[str, list[str]]:
        return {t: [s.subscriber_id for s in subs] for t, subs in sorted(self._subs.items()) if subs}

    def inbox_digests(self) -> dict[str, str]:
        out = {}
        for topic, subs in sorted(self._subs.items()):
            for i, s in enumerate(subs):
                out[f"{topic}|{s.subscriber_id}|{i}"] = s.digest()
        return out


def record(bus: Bus) -> Trace:
    return Trace(
        seed=bus.seed,
        config_digest=bus.config_digest(),
        entries=list(bus.trace_entries),
        subscriptions=bus.subscription_map(),
        topics=dict(sorted(bus.topics.items())),
    )


def replay(trace: Trace, bus: Bus, dt: float = 1.0) -> Bus:
    """Re-deliver a recorded trace on a fresh *bus*.

    The bus must carry the same schema registry and topic bindings; subscribers
    listed in the trace header are created if the bus has none of its own.
    """
    if bus.config_digest() != trace.config_digest:
        raise ConfigDigestMismatch("config digest mismatch")
    if bus.trace_entries or bus.tick_index:
        raise BusError("replay requires a fresh bus")
    if not bus.subscription_map():
        for topic, ids in trace.subscriptions.items():
            for sid in ids:
                bus.subscribe(topic, sid)
    i = 0
    entries = trace.entries
    while i < len(entries):
        target = entries[i][0]
        while bus.tick_index < target:
            bus.tick(dt)
        while i < len(entries) and entries[i][0] == target:
            res = bus.publish(entries[i][1])
            if not res:
                raise BusError(f"replayed envelope rejected: {res.reason}")
            i += 1
        bus.tick(dt)
    return bus
