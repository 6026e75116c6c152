"""Teacher-student instructional tuning of a scene-describing agent.

The Student turns camera detections into text under its constitution. The
Teacher, who sees the ground-truth scene, scores each response and appends
one constraint clause at a time until the Student reports exactly the
target's presence and location in a single short line.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import (
    AgentSpec,
    Constitution,
    ReasonerQuery,
    constraint_lines,
    inbox_payloads,
    instantiate,
    register_rule,
    retune,
)
from .bus import Bus
from .sim import Disc, SensorConfig, Vehicle, World
from .topics import standard_bus

TARGET_CLASSES = ("red ball", "pink buoy", "fishing net", "submerged obstacle")
CLUTTER_CLASSES = ("rock", "seaweed patch", "old tyre", "crab", "sand ripple", "pipe segment")
BEARING_TOL = 0.1
RANGE_TOL = 0.3
MAX_WORDS = 12
CSV_COLUMNS = ["trial", "target_class", "episode", "words", "relevance_pct", "constitution_digest"]

ONLY = "report only {cls}"
LOCATE = "include bearing and range"
TERSE = "respond in one sentence"

STUDENT = Constitution(
    core_directive="Describe what the vehicle camera sees to the operator.",
    domain_knowledge=("Detections arrive as class, bearing (rad, positive left) and range (m).",),
    reasoning_guidelines=("Mention every object you are given.", "Speak plainly."),
    output_schema_id="text",
)


@dataclass(frozen=True)
class TargetSpec:
    target_class: str
    truth: tuple[float, float] | None = None  # (bearing, range) if present
    required: tuple[str, ...] = ("presence", "location")

    def __post_init__(self):
        if not self.target_class.strip():
            raise ValueError("target class must be nonempty")

    @property
    def present(self) -> bool:
        return self.truth is not None


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    response: str
    word_count: int
    relevance: float
    constitution_digest: str = ""
    clauses: tuple[str, ...] = ()


# -- student ---------------------------------------------------------------


def _side(bearing: float) -> str:
    if bearing > 0.2:
        return "on the left"
    if bearing < -0.2:
        return "on the right"
    return "straight ahead"


def _distance(rng: float) -> str:
    if rng < 2.0:
        return "close by"
    if rng < 5.0:
        return "at mid range"
    return "far away"


def _article(noun: str) -> str:
    return "an" if noun[:1].lower() in "aeiou" else "a"


def render_description(detections: Sequence[dict], clauses: Sequence[str]) -> str:
    only = [c[len("report only "):] for c in clauses if c.startswith("report only ")]
    locate = LOCATE in clauses
    terse = TERSE in clauses
    if not only:
        lines = ["The seabed view shows several objects around us."]
        for d in detections:
            lines.append(f"There is {_article(d['class'])} {d['class']} {_side(d['bearing'])}, {_distance(d['range'])}.")
        if not detections:
            lines.append("Nothing else stands out in the murky water.")
        return " ".join(lines)
    cls = only[-1]
    hits = sorted((d for d in detections if d["class"] == cls), key=lambda d: d["range"])
    if not hits:
        return f"{cls}: not present" if terse else f"I do not see a {cls} anywhere in the scene."
    d = hits[0]
    b, r = f"{d['bearing']:.2f}", f"{d['range']:.1f}"
    if terse and locate:
        return f"{cls}: bearing {b} rad, range {r} m"
    if locate:
        return f"I can see a {cls} at bearing {b} rad and range {r} m."
    if terse:
        return f"I can see a {cls} {_side(d['bearing'])}."
    return (f"Looking carefully at the scene, I can see a {cls} sitting {_side(d['bearing'])} "
            f"{_distance(d['range'])}.")


@register_rule("student")
def _student_rule(query: ReasonerQuery) -> str:
    dets = None
    for item in inbox_payloads(query):
        payload = item.get("payload")
        if isinstance(payload, dict) and isinstance(payload.get("detections"), list):
            dets = payload["detections"]
    if dets is None:
        return "NOOP"
    text = render_description(dets, constraint_lines(query.system_text))
    return json.dumps({"text": text})


def student_describe(detections: Sequence[dict], constitution: Constitution, reasoner=None) -> str:
    """One Student reply for a set of detections, outside any bus."""
    from .agent import TemplateBackend, infer

    reasoner = reasoner or TemplateBackend()
    query = ReasonerQuery(
        system_text=constitution.render(),
        user_content=json.dumps([{"topic": "vehicle/detections", "payload": {"detections": list(detections)}}]),
        role="student",
    )
    content = infer(reasoner, query).content
    try:
        return json.loads(content)["text"]
    except (json.JSONDecodeError, KeyError, TypeError):
        return content


# -- scoring ---------------------------------------------------------------

_SENTENCE = re.compile(r"(?<=[.!?])\s+|\n+")
_NEG = re.compile(r"\b(not present|do not see|no \w+ (?:is )?visible|absent)\b")


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text.strip()) if s.strip()]


def _number_after(word: str, text: str) -> float | None:
    m = re.search(rf"\b{word}\b\D{{0,12}}?(-?\d+(?:\.\d+)?)", text)
    return float(m.group(1)) if m else None


def _fields(text: str, target: TargetSpec) -> tuple[bool, bool]:
    lower = text.lower()
    cls = target.target_class.lower()
    on = [s for s in sentences(lower) if cls in s]
    denied = any(_NEG.search(s) for s in on)
    claimed = bool(on) and not denied
    if not target.present:
        presence = denied
        location = presence
        return presence, location
    presence = claimed
    location = False
    for s in on:
        b, r = _number_after("bearing", s), _number_after("range", s)
        if b is not None and r is not None:
            tb, tr = target.truth
            if abs(b - tb) <= BEARING_TOL and abs(r - tr) <= RANGE_TOL:
                location = True
    return presence, location


def score(response: str, target: TargetSpec) -> tuple[int, float]:
    """(word count, information relevance in percent)."""
    words = len(response.split())
    sents = sentences(response)
    if not sents:
        return words, 0.0
    presence, location = _fields(response, target)
    got = {"presence": presence, "location": location}
    correct = sum(got[f] for f in target.required)
    on_target = sum(target.target_class.lower() in s.lower() for s in sents)
    return words, 100.0 * (correct / len(target.required)) * (on_target / len(sents))


# -- teacher ---------------------------------------------------------------


def teacher_feedback(record: EpisodeRecord, target: TargetSpec, constitution: Constitution) -> Constitution:
    """Append the highest-priority unmet clause, or return the constitution unchanged."""
    if record.relevance >= 100.0 and record.word_count <= MAX_WORDS:
        return constitution
    have = set(constitution.constraint_clauses)
    sents = sentences(record.response)
    cls = target.target_class.lower()
    only = ONLY.format(cls=target.target_class)
    if any(cls not in s.lower() for s in sents) and only not in have:
        return constitution.with_clause(only)
    _, location = _fields(record.response, target)
    if not location and LOCATE not in have:
        return constitution.with_clause(LOCATE)
    if record.word_count > MAX_WORDS and TERSE not in have:
        return constitution.with_clause(TERSE)
    return constitution


# -- scenes and the loop ---------------------------------------------------


@dataclass
class Scene:
    name: str
    world: World
    truth: dict[str, tuple[float, float]] = field(default_factory=dict)

    def detections(self) -> list[dict]:
        return self.world.sense("auv").detections

    def target(self, cls: str) -> TargetSpec:
        return TargetSpec(cls, self.truth.get(cls))


def make_scene(index: int, n_clutter: int = 1, seed: int | None = None) -> Scene:
    """Cluttered scene: all target classes plus clutter, placed in the camera's view."""
    rng = np.random.default_rng(1000 + index if seed is None else seed)
    labels = list(TARGET_CLASSES) + [str(c) for c in rng.choice(CLUTTER_CLASSES, n_clutter, replace=False)]
    obstacles = []
    bearings = np.linspace(-0.9, 0.9, len(labels))
    rng.shuffle(bearings)
    for label, b in zip(labels, bearings):
        r = float(rng.uniform(1.0, 8.0))
        obstacles.append(Disc((r * math.cos(b), r * math.sin(b)), 0.2, label, solid=False))
    auv = Vehicle("auv")
    sensors = SensorConfig(sigma_bearing=0.02, sigma_range=0.05)
    world = World([auv], obstacles, sensors=sensors, seed=index)
    truth = {o.label: (math.atan2(o.center[1], o.center[0]), math.hypot(*o.center)) for o in obstacles}
    return Scene(f"scene-{index}", world, truth)


STANDARD_SCENE = 0


def run_tuning(scene: Scene, target: TargetSpec | str, max_episodes: int = 6,
               start: Constitution = STUDENT, bus: Bus | None = None, reasoner=None) -> list[EpisodeRecord]:
    if max_episodes < 1:
        raise ValueError("max_episodes must be >= 1")
    if isinstance(target, str):
        target = scene.target(target)
    bus = bus or standard_bus(scene.world.seed)
    from .agent import TemplateBackend

    student = instantiate(
        AgentSpec("student", "student", start, subscriptions=("vehicle/detections",),
                  publications=("perception/description",), reasoner=reasoner or TemplateBackend()),
        bus,
    )
    listen = bus.subscribe("perception/description", "teacher")
    records: list[EpisodeRecord] = []
    dets = scene.detections()
    for episode in range(1, max_episodes + 1):
        bus.emit("vehicle/detections", {"detections": dets}, "camera")
        bus.tick(0.5)
        student.step()
        bus.tick(0.5)
        replies = listen.drain()
        response = replies[-1].payload["text"] if replies else ""
        words, rel = score(response, target) if response else (0, 0.0)
        record = EpisodeRecord(episode, response, words, rel, student.constitution.digest(),
                               student.constitution.constraint_clauses)
        records.append(record)
        updated = teacher_feedback(record, target, student.constitution)
        if updated == student.constitution:
            break
        bus.emit("teacher/constitution", {"text": updated.constraint_clauses[-1]}, "teacher")
        student = retune(student, updated)
    return records


def tuning_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in CSV_COLUMNS})
    return buf.getvalue()
