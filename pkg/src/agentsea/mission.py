"""The Commander: command interpretation, task orchestration and the twin curator.

Commands are interpreted by a small literal grammar against a goal table
carried in the Commander's constitution. Each task is planned, flown in the
simulator and checked against ground truth; failed tasks are revised by
replanning on refreshed perception until the retry budget runs out.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .agent import AgentSpec, Constitution, ReasonerQuery, SafetyLimits, inbox_payloads, instantiate, register_rule
from .bus import Bus
from .memory import RingWindow, window_slope
from .planner import (
    DetectorParams,
    GridMap,
    Infeasible,
    PlanFailure,
    Path as PlanPath,
    agent_plan,
    astar,
    parse_ascii,
    perceive_map,
    straight_path,
    swept_collision,
)
from .sim import SensorFrame, Vehicle, VehicleState, World
from .topics import standard_bus

GOAL_TOLERANCE = 0.3
RETRY_BUDGET = 3
POSE_THRESHOLD = 0.5
SLOPE_THRESHOLD = 0.02
TWIN_WINDOW = 10

VERBS = {"go to": "goto", "inspect": "inspect", "check": "inspect"}
_VERB = re.compile(r"\b(go to|inspect|check)\b")
_AVOID = re.compile(r"\bobstacles?\b|\bbox(?:es)?\b|\bon (?:the|your) way\b|\bcheck for any\b")
_CLAUSE = re.compile(r"\bthen\b|;")
_NUMBER_WORDS = {"one": "1", "two": "2", "three": "3", "four": "4", "five": "5"}


class Unparseable(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    verb: str  # goto | inspect
    goal: str
    avoid_obstacles: bool


@dataclass(frozen=True)
class TaskGraph:
    tasks: tuple[Task, ...]
    retry_budget: int = RETRY_BUDGET

    def to_json(self) -> dict:
        return {"tasks": [asdict(t) for t in self.tasks], "retry_budget": self.retry_budget}

    @classmethod
    def from_json(cls, data: dict) -> "TaskGraph":
        return cls(tuple(Task(**t) for t in data["tasks"]), int(data.get("retry_budget", RETRY_BUDGET)))


# -- interpretation --------------------------------------------------------


def _normalize(text: str) -> str:
    text = text.lower().replace("-", " ")
    text = re.sub(r"\bgoal(\d)", r"goal \1", text)
    text = re.sub(r"\bgoal (one|two|three|four|five)\b", lambda m: "goal " + _NUMBER_WORDS[m.group(1)], text)
    return re.sub(r"\s+", " ", text).strip()


def interpret(command: str, goals: Mapping[str, Sequence[float]]) -> TaskGraph:
    """Literal grammar: a verb followed by a known goal name, per clause.

    A clause asks for obstacle avoidance only if it mentions obstacles, boxes
    or "on the/your way"; otherwise the planner is told to fly direct.
    """
    if not command or not command.strip():
        raise Unparseable("empty command")
    names = sorted((n.lower() for n in goals), key=len, reverse=True)
    if not names:
        raise Unparseable("goal table is empty")
    goal_re = re.compile(r"\b(" + "|".join(re.escape(n) for n in names) + r")\b")
    canonical = {n.lower(): n for n in goals}
    tasks = []
    for clause in _CLAUSE.split(_normalize(command)):
        avoid = bool(_AVOID.search(clause))
        for m in goal_re.finditer(clause):
            verbs = list(_VERB.finditer(clause, 0, m.start()))
            if not verbs:
                continue
            tasks.append(Task(VERBS[verbs[-1].group(1)], canonical[m.group(1)], avoid))
    if not tasks:
        raise Unparseable(f"no verb and known goal in {command!r}")
    return TaskGraph(tuple(tasks))


def commander_constitution(goals: Mapping[str, Sequence[float]]) -> Constitution:
    facts = [f"location {name} = ({x:g}, {y:g}, {z:g})" for name, (x, y, z) in goals.items()]
    return Constitution(
        core_directive="Turn operator commands into an ordered list of navigation tasks.",
        domain_knowledge=tuple(facts),
        reasoning_guidelines=(
            "Only use the locations listed in your knowledge.",
            "Plan around obstacles only when the operator mentions them; otherwise fly direct.",
        ),
        output_schema_id="task_graph",
    )


_LOCATION = re.compile(r"^- location (.+?) = \((-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\)$")


def goals_from_text(system_text: str) -> dict[str, tuple[float, float, float]]:
    out = {}
    for line in system_text.splitlines():
        m = _LOCATION.match(line)
        if m:
            out[m.group(1)] = (float(m.group(2)), float(m.group(3)), float(m.group(4)))
    return out


@register_rule("commander")
def _commander_rule(query: ReasonerQuery) -> str:
    texts = [it["payload"]["text"] for it in inbox_payloads(query)
             if isinstance(it.get("payload"), dict) and isinstance(it["payload"].get("text"), str)]
    if not texts:
        return "NOOP"
    try:
        return json.dumps(interpret(texts[-1], goals_from_text(query.system_text)).to_json())
    except Unparseable:
        return "NOOP"


# the ten prompt styles used in the interpretation trials
DOCUMENTED_PROMPTS: tuple[tuple[str, tuple[Task, ...]], ...] = (
    ("Go to goal 1 and check the obstacles on the way", (Task("goto", "goal 1", True),)),
    ("Inspect goal 2 and check for any boxes on your way", (Task("inspect", "goal 2", True),)),
    ("Inspect goal 2", (Task("inspect", "goal 2", False),)),
    ("Go to goal 2", (Task("goto", "goal 2", False),)),
    ("Go to goal 2 while avoiding obstacles", (Task("goto", "goal 2", True),)),
    ("Check goal 1", (Task("inspect", "goal 1", False),)),
    ("Inspect goal 1 and watch out for the boxes", (Task("inspect", "goal 1", True),)),
    ("Go to goal 1 then inspect goal 2", (Task("goto", "goal 1", False), Task("inspect", "goal 2", False))),
    ("Please go to goal one, mind anything on your way",  (Task("goto", "goal 1", True),)),
    ("Go to goal 2 avoiding the obstacle, then check goal 1",
     (Task("goto", "goal 2", True), Task("inspect", "goal 1", False))),
)


# -- the tank ----------------------------------------------------------------

TANK_MAP = """
........................
........................
........................
..............##........
..............##........
..............##........
..............##........
........................
........................
......##................
......##................
......##................
......##................
........................
........................
........................
"""
TANK_RESOLUTION = 0.5
TANK_START = (1.25, 4.25, 2.0)
TANK_GOALS = {
    "goal 1": (10.25, 6.25, 2.0),
    "goal 2": (10.25, 1.75, 2.0),
    "goal 3": (5.25, 7.25, 2.0),
}


def tank_map() -> GridMap:
    return parse_ascii(TANK_MAP, TANK_RESOLUTION)


# -- orchestration ------------------------------------------------------------


@dataclass
class TaskOutcome:
    index: int
    task: Task
    success: bool
    retries: int
    collided: bool
    planned: bool
    planned_collision: bool
    final_error: float
    attempts: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"task": self.index, "verb": self.task.verb, "goal": self.task.goal, "success": self.success,
                "retries": self.retries, "collided": self.collided,
                "final_error": round(self.final_error, 6) if math.isfinite(self.final_error) else 1e9}


@dataclass
class MissionOutcome:
    graph: TaskGraph
    tasks: list[TaskOutcome]

    @property
    def success(self) -> bool:
        return all(t.success for t in self.tasks)


@dataclass
class MissionSetup:
    truth: GridMap
    goals: Mapping[str, Sequence[float]]
    start: Sequence[float]
    detector: DetectorParams = DetectorParams(0.0, 0.0, 0.0)
    perceive: Callable[[int, int], GridMap] | None = None  # (task index, attempt) -> perceived map
    clearance: int = 1
    speed: float = 0.5
    seed: int = 0
    tick_budget: int | None = None

    def perceived(self, task: int, attempt: int) -> GridMap:
        if self.perceive is not None:
            return self.perceive(task, attempt)
        return perceive_map(self.truth, self.detector, self.seed * 1000 + task * 10 + attempt)


def plan_task(task: Task, here: Sequence[float], goal: Sequence[float], perceived: GridMap,
              clearance: int = 1) -> PlanPath | PlanFailure:
    """Motion planning for one task: A* on the perceived map, or direct when not asked to avoid."""
    start = perceived.to_cell(here[0], here[1])
    goal_cell = perceived.to_cell(goal[0], goal[1])
    if not task.avoid_obstacles:
        path = straight_path(perceived, start, goal_cell)
        return PlanPath(path.cells, [tuple(here[:2]), tuple(goal[:2])], math.dist(here[:2], goal[:2]))
    res = agent_plan(perceived, start, goal_cell, clearance=clearance)
    if isinstance(res, PlanFailure) and clearance > 0:
        # the vehicle may sit inside the inflated margin after a stop
        try:
            res = astar(perceived, start, goal_cell, 0)
        except Infeasible as exc:
            return PlanFailure(str(exc))
    if isinstance(res, PlanFailure):
        return res
    wps = [tuple(here[:2])] + list(res.waypoints[1:-1]) + [tuple(goal[:2])]
    return PlanPath(res.cells, wps, res.length)


def follow(world: World, vid: str, waypoints: Sequence[Sequence[float]], z: float, speed: float = 0.5,
           dt: float = 0.1, timeout: float | None = None, on_step: Callable[[], None] | None = None) -> float:
    """Fly the waypoints with a simple pursuit law; returns the elapsed time."""
    v = world.vehicles[vid]
    pts = [np.asarray(p[:2], dtype=float) for p in waypoints]
    length = sum(float(np.linalg.norm(b - a)) for a, b in zip(pts[:-1], pts[1:]))
    timeout = timeout if timeout is not None else 2.0 * length / speed + 20.0
    i = 0
    t = 0.0
    while t < timeout and not v.collided:
        pos = v.state.position
        while i < len(pts) - 1 and np.linalg.norm(pts[i] - pos[:2]) < 0.35:
            i += 1
        d = pts[i] - pos[:2]
        dist = float(np.linalg.norm(d))
        last = i == len(pts) - 1
        if last and dist < 0.05 and np.linalg.norm(v.state.velocity[:2]) < 0.05:
            break
        sp = min(speed, 0.8 * dist) if last else speed
        vel = d / dist * sp if dist > 1e-9 else np.zeros(2)
        c, s = math.cos(v.state.yaw), math.sin(v.state.yaw)
        vz = float(np.clip(0.5 * (z - pos[2]), -0.3, 0.3))
        world.command(vid, [c * vel[0] + s * vel[1], -s * vel[0] + c * vel[1], vz, 0.0, 0.0, 0.0])
        world.step(dt)
        t += dt
        if on_step is not None:
            on_step()
    return t


def orchestrate(graph: TaskGraph, bus: Bus, setup: MissionSetup, world: World | None = None,
                vid: str = "auv", dt: float = 0.1) -> MissionOutcome:
    """Plan, fly and verify each task; revise failures on refreshed perception."""
    if world is None:
        auv = Vehicle(vid)
        auv.state.position = np.array(setup.start, dtype=float)
        world = World([auv], occupancy=setup.truth, seed=setup.seed)
    v = world.vehicles[vid]
    budget = setup.tick_budget

    def tick():
        bus.tick(dt)

    def exhausted() -> bool:
        return budget is not None and bus.tick_index >= budget

    results = []
    for k, task in enumerate(graph.tasks):
        goal = tuple(float(c) for c in setup.goals[task.goal])
        out = TaskOutcome(k, task, False, 0, False, False, False, math.nan)
        for attempt in range(graph.retry_budget + 1):
            if exhausted():
                out.attempts.append("tick budget exhausted")
                break
            out.retries = attempt
            v.collided = False
            here = tuple(float(c) for c in v.state.position)
            bus.emit("planner/goal", {"name": task.goal, "x": goal[0], "y": goal[1], "z": goal[2],
                                      "start_x": here[0], "start_y": here[1]}, "commander")
            tick()
            plan = plan_task(task, here, goal, setup.perceived(k, attempt), setup.clearance)
            if isinstance(plan, PlanFailure):
                out.attempts.append(f"plan failed: {plan.reason}")
                continue
            if attempt == 0:
                out.planned = True
                out.planned_collision = swept_collision(plan, setup.truth)
            bus.emit("planner/path", {"waypoints": [{"x": float(x), "y": float(y), "z": goal[2]}
                                                    for x, y in plan.waypoints]}, "motion_planner")
            tick()
            follow(world, vid, plan.waypoints, goal[2], setup.speed, dt, on_step=tick)
            err = math.dist(v.state.position, goal)
            out.final_error = err
            if v.collided:
                out.collided = True
                out.attempts.append("collision")
                continue
            if err <= GOAL_TOLERANCE:
                out.success = True
                out.attempts.append("ok")
                break
            out.attempts.append(f"missed goal by {err:.2f} m")
        v.collided = False
        bus.emit("mission/outcome", out.to_json(), "commander")
        tick()
        results.append(out)
    return MissionOutcome(graph, results)


def run_command(command: str, seed: int = 0, bus: Bus | None = None, setup: MissionSetup | None = None,
                reasoner=None, constitution: Constitution | None = None) -> MissionOutcome:
    """Full Commander loop on the tank: interpret on the bus, then orchestrate."""
    setup = setup or MissionSetup(tank_map(), TANK_GOALS, TANK_START, seed=seed)
    bus = bus or standard_bus(seed)
    from .agent import TemplateBackend

    commander = instantiate(AgentSpec("commander", "commander", constitution or commander_constitution(setup.goals),
                                      subscriptions=("mission/command",), publications=("mission/tasks",),
                                      reasoner=reasoner or TemplateBackend(),
                                      limits=SafetyLimits(max_speed=2.0, max_depth=50.0)), bus)
    tasks_sub = bus.subscribe("mission/tasks", "orchestrator")
    bus.emit("mission/command", {"text": command}, "operator")
    bus.tick(0.1)
    commander.step()
    bus.tick(0.1)
    got = tasks_sub.drain()
    if not got:
        raise Unparseable(f"commander could not interpret {command!r}")
    return orchestrate(TaskGraph.from_json(got[-1].payload), bus, setup)


# -- digital twin curator ----------------------------------------------------------


@dataclass(frozen=True)
class FidelityInjection:
    target: str  # vehicle_pose | current_estimate
    value: tuple[float, ...]
    cause: float

    def to_json(self) -> dict:
        return {"target": self.target, "value": list(self.value), "cause": self.cause}


class TwinCurator:
    """Watches real sensor frames against the twin and decides on corrections."""

    def __init__(self, pose_threshold: float = POSE_THRESHOLD, slope_threshold: float = SLOPE_THRESHOLD,
                 window: int = TWIN_WINDOW):
        self.pose_threshold = pose_threshold
        self.slope_threshold = slope_threshold
        self.wx = RingWindow(window)
        self.wy = RingWindow(window)
        self.current = np.zeros(3)

    def curate(self, frame: SensorFrame, virtual: VehicleState, t: float) -> list[FidelityInjection]:
        real = np.array(frame.odom[:3], dtype=float)
        div = real - virtual.position
        dist = float(np.linalg.norm(div[:2]))
        if dist > self.pose_threshold:
            self.wx.clear()
            self.wy.clear()
            return [FidelityInjection("vehicle_pose", tuple(float(c) for c in real), dist)]
        self.wx.push(t, float(div[0]))
        self.wy.push(t, float(div[1]))
        if not self.wx.full():
            return []
        slope = np.array([window_slope(self.wx), window_slope(self.wy)])
        rate = float(np.hypot(*slope))
        if rate <= self.slope_threshold:
            return []
        self.current[:2] += slope
        self.wx.clear()
        self.wy.clear()
        return [FidelityInjection("current_estimate", tuple(float(c) for c in self.current), rate)]


def apply_injection(twin: World, vid: str, inj: FidelityInjection) -> None:
    if inj.target == "vehicle_pose":
        twin.vehicles[vid].state.position = np.array(inj.value, dtype=float)
    elif inj.target == "current_estimate":
        twin.disturbance.current = tuple(inj.value)
    else:
        raise ValueError(f"unknown injection target {inj.target!r}")


def curate_twin(curator: TwinCurator, frame: SensorFrame, virtual: VehicleState, t: float) -> list[FidelityInjection]:
    return curator.curate(frame, virtual, t)


@dataclass
class TwinRun:
    mean_divergence: float
    divergences: list[float]
    injections: list[tuple[float, FidelityInjection]]


def twin_trial(seed: int, inject: bool, duration: float = 60.0, current: float = 0.05, dt: float = 0.1,
               sample_period: float = 0.5, bus: Bus | None = None) -> TwinRun:
    """Real vehicle in an unmodelled current, twin flown with identical commands."""
    rng = np.random.default_rng(seed)
    heading = float(rng.uniform(-math.pi, math.pi))
    flow = current * np.array([math.cos(heading), math.sin(heading), 0.0])
    real = World([Vehicle("auv")], seed=seed)
    real.disturbance.current = tuple(flow)
    twin = World([Vehicle("auv")], seed=seed)
    for w in (real, twin):
        w.vehicles["auv"].state.position = np.array([0.0, 0.0, 2.0])
    curator = TwinCurator()
    divs, injections = [], []
    every = int(round(sample_period / dt))
    for k in range(int(round(duration / dt))):
        twist = [0.4, 0.0, 0.0, 0.0, 0.0, 0.1 * math.sin(0.05 * k * dt)]
        for w in (real, twin):
            w.command("auv", twist)
            w.step(dt)
        if (k + 1) % every:
            continue
        t = round(real.clock, 9)
        frame = real.sense("auv")
        divs.append(float(np.linalg.norm(np.array(frame.odom[:2]) - twin.vehicles["auv"].state.position[:2])))
        if inject:
            for inj in curator.curate(frame, twin.vehicles["auv"].state, t):
                apply_injection(twin, "auv", inj)
                injections.append((t, inj))
                if bus is not None:
                    bus.emit("twin/injections", inj.to_json(), "twin_curator")
        if bus is not None:
            bus.tick(sample_period)
    return TwinRun(float(np.mean(divs)), divs, injections)
