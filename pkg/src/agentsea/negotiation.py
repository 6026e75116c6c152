"""Two-agent trajectory deconfliction by intent exchange.

Each agent shares its timed trajectory on ``intent/<id>``. Both run the same
closest-approach prediction on the latest pair of intents; on a predicted
conflict the agent with the lexicographically smaller id yields. The yielder
first tries holding in place, then an A* detour around the other's swept
corridor, and otherwise holds position and reports an abort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import Constitution
from .bus import Bus
from .planner import GridMap, Infeasible, astar
from .sim import Vehicle, World
from .topics import standard_bus

THRESHOLD = 0.2
SAMPLE_DT = 0.1
HOLD_STEP = 0.5
HOLD_MAX = 30.0
DEFAULT_RADIUS = 0.4
EVENT_TOPIC = "negotiation/events"


class ProtocolFault(Exception):
    pass


@dataclass(frozen=True)
class IntentMsg:
    agent_id: str
    trajectory: np.ndarray  # (n, 4): t, x, y, z
    radius: float = DEFAULT_RADIUS
    priority: str = ""

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=float)
        if traj.ndim != 2 or traj.shape[1] != 4 or len(traj) == 0:
            raise ValueError("trajectory must be a non-empty (n, 4) array")
        if np.any(np.diff(traj[:, 0]) <= 0):
            raise ValueError("trajectory timestamps must strictly increase")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "trajectory", traj)
        if not self.priority:
            object.__setattr__(self, "priority", self.agent_id)

    def to_json(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "trajectory": [{"t": float(t), "x": float(x), "y": float(y), "z": float(z)}
                           for t, x, y, z in self.trajectory],
            "radius": self.radius,
            "priority": self.priority,
        }

    @classmethod
    def from_json(cls, data: dict) -> "IntentMsg":
        traj = np.array([[p["t"], p["x"], p["y"], p["z"]] for p in data["trajectory"]])
        return cls(data["agent_id"], traj, data["radius"], data["priority"])


@dataclass(frozen=True)
class ConflictReport:
    t_star: float
    d_star: float
    conflicting: bool


# -- trajectories ----------------------------------------------------------


def timed(points: Sequence[Sequence[float]], speed: float, t0: float = 0.0, z: float = 2.0) -> np.ndarray:
    """Constant-speed timing of a polyline (duplicate points dropped)."""
    pts = [tuple(map(float, points[0][:2]))]
    for p in points[1:]:
        q = (float(p[0]), float(p[1]))
        if math.dist(q, pts[-1]) > 1e-9:
            pts.append(q)
    rows = [(t0, *pts[0], z)]
    for a, b in zip(pts[:-1], pts[1:]):
        rows.append((rows[-1][0] + math.dist(a, b) / speed, *b, z))
    return np.array(rows)


def position_at(traj: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Linear interpolation, held at the first/last waypoint outside the span."""
    t = np.asarray(t, dtype=float)
    return np.stack([np.interp(t, traj[:, 0], traj[:, k]) for k in (1, 2, 3)], axis=-1)


def end_time(traj: np.ndarray) -> float:
    return float(traj[-1, 0])


def predict_min_distance(
    traj_a: np.ndarray,
    traj_b: np.ndarray,
    r_a: float,
    r_b: float,
    horizon: float | None = None,
    dt: float = SAMPLE_DT,
    t0: float = 0.0,
) -> tuple[float, float]:
    """Closest approach of two spheres sampled at t0, t0+dt, ... t0+horizon.

    Returns ``(t_star, d_star)`` with d the surface-to-surface distance; the
    earliest sample wins ties.
    """
    if len(traj_a) == 0 or len(traj_b) == 0:
        raise ValueError("empty trajectory")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon is None:
        horizon = max(end_time(traj_a), end_time(traj_b), t0) - t0
    n = int(math.floor(horizon / dt + 1e-9))
    ts = t0 + dt * np.arange(n + 1)
    d = np.linalg.norm(position_at(traj_a, ts) - position_at(traj_b, ts), axis=1) - (r_a + r_b)
    i = int(np.argmin(d))
    return float(ts[i]), float(d[i])


def detect_conflict(report: ConflictReport | float, threshold: float = THRESHOLD) -> bool:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    d = report.d_star if isinstance(report, ConflictReport) else float(report)
    return d < threshold


def conflict_report(a: IntentMsg, b: IntentMsg, t0: float = 0.0, threshold: float = THRESHOLD) -> ConflictReport:
    t_star, d_star = predict_min_distance(a.trajectory, b.trajectory, a.radius, b.radius, t0=t0)
    return ConflictReport(t_star, d_star, detect_conflict(d_star, threshold))


def negotiate(own: IntentMsg, other: IntentMsg) -> str:
    """Role for ``own``: the smaller priority key yields."""
    if own.priority == other.priority:
        raise ProtocolFault(f"duplicate priority key {own.priority!r}")
    return "yield" if own.priority < other.priority else "proceed"


def hold_then(traj: np.ndarray, t_now: float, delay: float) -> np.ndarray:
    """Stop at the current reference point for ``delay`` seconds, then resume."""
    here = position_at(traj, t_now)
    past = traj[traj[:, 0] < t_now - 1e-9]
    rest = traj[traj[:, 0] > t_now + 1e-9].copy()
    rows = [*past, np.array([t_now, *here])]
    if delay > 0:
        rows.append(np.array([t_now + delay, *here]))
    rest[:, 0] += delay
    rows.extend(rest)
    return np.array(rows)


def _stationary(traj: np.ndarray, t_now: float, horizon: float) -> np.ndarray:
    here = position_at(traj, t_now)
    past = traj[traj[:, 0] < t_now - 1e-9]
    return np.array([*past, [t_now, *here], [t_now + max(horizon, SAMPLE_DT), *here]])


@dataclass
class ReplanResult:
    trajectory: np.ndarray
    mode: str  # temporal | spatial | abort
    delay: float = 0.0
    d_star: float = math.nan


def _ok(traj, other, r_own, r_other, t_now, threshold) -> tuple[bool, float]:
    _, d = predict_min_distance(traj, other, r_own, r_other, t0=t_now)
    return d >= threshold, d


def _corridor_mask(grid: GridMap, other: np.ndarray, t_now: float, inflate: float,
                   release: Sequence[Sequence[float]], release_radius: float) -> np.ndarray:
    ts = np.arange(t_now, max(end_time(other), t_now) + SAMPLE_DT, SAMPLE_DT)
    pts = position_at(other, ts)[:, :2]
    rows, cols = np.mgrid[0:grid.height, 0:grid.width]
    cx = grid.origin[0] + (cols + 0.5) * grid.resolution
    cy = grid.origin[1] + (rows + 0.5) * grid.resolution
    mask = np.zeros(grid.occupancy.shape, dtype=bool)
    for x, y in pts:
        mask |= (cx - x) ** 2 + (cy - y) ** 2 <= inflate ** 2
    for x, y in release:
        mask &= (cx - x) ** 2 + (cy - y) ** 2 > release_radius ** 2
    return mask


def replan_yield(
    own: np.ndarray,
    other: np.ndarray,
    grid: GridMap | None,
    threshold: float = THRESHOLD,
    r_own: float = DEFAULT_RADIUS,
    r_other: float = DEFAULT_RADIUS,
    t_now: float = 0.0,
    speed: float = 0.5,
    clearance: int = 2,
) -> ReplanResult:
    """New trajectory for the yielding agent that keeps clear of ``other``."""
    delay = 0.0
    while delay <= HOLD_MAX + 1e-9:
        cand = hold_then(own, t_now, delay)
        ok, d = _ok(cand, other, r_own, r_other, t_now, threshold)
        if ok:
            return ReplanResult(cand, "temporal", delay, d)
        delay += HOLD_STEP
    horizon = max(end_time(own), end_time(other)) - t_now + HOLD_MAX
    if grid is not None:
        here = position_at(own, t_now)
        goal = own[-1, 1:3]
        inflate = r_own + r_other + threshold
        blocked = grid.inflate(clearance).occupancy | _corridor_mask(
            grid, other, t_now, inflate, [here[:2], goal], inflate)
        g = GridMap(blocked, grid.resolution, grid.origin)
        try:
            path = astar(g, g.to_cell(*here[:2]), g.to_cell(*goal))
        except Infeasible:
            path = None
        if path is not None:
            pts = [tuple(here[:2]), *path.waypoints[1:-1], tuple(goal)]
            detour = timed(pts, speed, t_now, float(here[2]))
            past = own[own[:, 0] < t_now - 1e-9]
            detour = np.vstack([past, detour]) if len(past) else detour
            delay = 0.0
            while delay <= HOLD_MAX + 1e-9:
                cand = hold_then(detour, t_now, delay)
                ok, d = _ok(cand, other, r_own, r_other, t_now, threshold)
                if ok:
                    return ReplanResult(cand, "spatial", delay, d)
                delay += HOLD_STEP
    stay = _stationary(own, t_now, horizon)
    _, d = predict_min_distance(stay, other, r_own, r_other, t0=t_now)
    return ReplanResult(stay, "abort", 0.0, d)


# -- agents on the bus -----------------------------------------------------


INTENT_SCHEMA = "intent"


def constitution_for(agent_id: str, radius: float = DEFAULT_RADIUS, speed: float = 0.5) -> Constitution:
    return Constitution(
        core_directive=f"Navigate vehicle {agent_id} to its goal without coming close to other vehicles.",
        domain_knowledge=(f"vehicle_radius: {radius}", f"cruise_speed: {speed}",
                          f"safety_threshold: {THRESHOLD}"),
        reasoning_guidelines=("Share the intended trajectory every tick.",
                              "On a predicted conflict the smaller agent id yields."),
        output_schema_id="intent",
    )


@dataclass
class Negotiator:
    agent_id: str
    trajectory: np.ndarray
    constitution: Constitution
    grid: GridMap | None = None
    radius: float = field(init=False)
    speed: float = field(init=False)
    changes: int = 0
    events: list[dict] = field(default_factory=list)
    seen: set = field(default_factory=set)

    def __post_init__(self):
        self.radius = float(self.constitution.param("vehicle_radius", DEFAULT_RADIUS))
        self.speed = float(self.constitution.param("cruise_speed", 0.5))
        self.threshold = float(self.constitution.param("safety_threshold", THRESHOLD))

    def intent(self) -> IntentMsg:
        return IntentMsg(self.agent_id, self.trajectory, self.radius, self.agent_id)

    def publish(self, bus: Bus) -> None:
        bus.emit(f"intent/{self.agent_id}", self.intent().to_json(), self.agent_id)

    def _event(self, bus: Bus, kind: str, data: dict) -> None:
        rec = {"kind": kind, "agent_id": self.agent_id, "data": data}
        self.events.append(rec)
        bus.emit(EVENT_TOPIC, rec, self.agent_id)

    def react(self, bus: Bus, other: IntentMsg, other_seq: int, t_now: float) -> None:
        own = self.intent()
        key = (self.changes, other_seq)
        if key in self.seen:
            return
        self.seen.add(key)
        rep = conflict_report(own, other, t_now, self.threshold)
        if not rep.conflicting:
            return
        role = negotiate(own, other)
        self._event(bus, "conflict", {"t_star": rep.t_star, "d_star": rep.d_star, "other": other.agent_id})
        self._event(bus, "role", {"role": role, "other": other.agent_id})
        if role == "proceed":
            return
        res = replan_yield(self.trajectory, other.trajectory, self.grid, self.threshold, self.radius,
                           other.radius, t_now, self.speed)
        self.trajectory = res.trajectory
        self.changes += 1
        self.seen.add((self.changes, other_seq))
        if res.mode == "abort":
            self._event(bus, "abort", {"d_star": res.d_star})
        else:
            self._event(bus, "replan", {"mode": res.mode, "delay": res.delay, "d_star": res.d_star})
            self._event(bus, "resolved", {"d_star": res.d_star})


# -- scenarios -------------------------------------------------------------

RES = 0.25
SIZE = 20.0


def _open_map() -> np.ndarray:
    n = int(SIZE / RES)
    occ = np.zeros((n, n), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return occ


def _fill(occ: np.ndarray, x0: float, x1: float, y0: float, y1: float) -> None:
    occ[int(round(y0 / RES)):int(round(y1 / RES)), int(round(x0 / RES)):int(round(x1 / RES))] = True


@dataclass
class Scenario:
    name: str
    paths: dict[str, list[tuple[float, float]]]
    speeds: dict[str, float]
    occupancy: np.ndarray
    tight: bool = False
    start_delay: dict[str, float] = field(default_factory=dict)

    def grid(self) -> GridMap:
        return GridMap(self.occupancy, RES)


def scenarios() -> list[Scenario]:
    out = []
    out.append(Scenario("crossing", {"A": [(2, 10), (18, 10)], "B": [(10, 2), (10, 18)]},
                        {"A": 0.5, "B": 0.5}, _open_map()))
    out.append(Scenario("head_on", {"A": [(3, 10), (17, 10)], "B": [(16, 10), (4, 10)]},
                        {"A": 0.5, "B": 0.5}, _open_map()))
    out.append(Scenario("parallel", {"A": [(2, 6), (18, 6)], "B": [(2, 14), (18, 14)]},
                        {"A": 0.5, "B": 0.5}, _open_map()))
    corridor = _open_map()
    _fill(corridor, 0, 20, 0, 8.75)
    _fill(corridor, 0, 20, 11.25, 20)
    out.append(Scenario("tight_corridor", {"A": [(1, 9.475), (19, 9.475)], "B": [(19, 10.525), (1, 10.525)]},
                        {"A": 0.5, "B": 0.5}, corridor, tight=True))
    out.append(Scenario("overtake", {"A": [(6, 10), (15, 10)], "B": [(1, 10), (18.5, 10)]},
                        {"A": 0.3, "B": 0.7}, _open_map()))
    out.append(Scenario("oblique", {"A": [(3, 3), (17, 17)], "B": [(3, 17), (17, 3)]},
                        {"A": 0.5, "B": 0.5}, _open_map()))
    maze = _open_map()
    _fill(maze, 6, 14, 0, 9.25)   # narrow passage between y=9.25 and 10.75
    _fill(maze, 6, 14, 10.75, 15)  # wide route above y=15
    out.append(Scenario("maze_detour", {"A": [(2, 10), (18, 10)], "B": [(17, 10), (10, 10)]},
                        {"A": 0.5, "B": 0.5}, maze))
    out.append(Scenario("offset_head_on", {"A": [(3, 10), (17, 10)], "B": [(17, 10.9), (3, 10.9)]},
                        {"A": 0.5, "B": 0.5}, _open_map()))
    return out


@dataclass
class NegotiationRun:
    scenario: str
    seed: int
    min_clearance: float
    predicted: float
    yields: dict[str, int]
    conflicts: int
    modes: list[str]
    collided: bool
    arrival: dict[str, float]
    negotiation_ticks: int


def _track(world: World, vid: str, traj: np.ndarray, t: float, gain: float = 1.0) -> None:
    v = world.vehicles[vid]
    ref = position_at(traj, t)
    ref_next = position_at(traj, t + SAMPLE_DT)
    vel = (ref_next - ref) / SAMPLE_DT + gain * (ref - v.state.position)
    c, s = math.cos(v.state.yaw), math.sin(v.state.yaw)
    body = [c * vel[0] + s * vel[1], -s * vel[0] + c * vel[1], vel[2], 0.0, 0.0, -v.state.yaw]
    world.command(vid, body)


def run_scenario(scn: Scenario, seed: int, bus: Bus | None = None, dt: float = SAMPLE_DT) -> NegotiationRun:
    rng = np.random.default_rng(seed)
    ids = sorted(scn.paths)
    bus = bus or standard_bus(seed)
    for aid in ids:
        if f"intent/{aid}" not in bus.topics:
            bus.register_topic(f"intent/{aid}", INTENT_SCHEMA)
    grid = scn.grid()
    agents: dict[str, Negotiator] = {}
    for aid in ids:
        jitter = 0.05 * rng.uniform(-1, 1)
        speed = scn.speeds[aid] * (1.0 + jitter)
        delay = scn.start_delay.get(aid, 0.0) + float(rng.uniform(0.0, 1.0))
        traj = timed(scn.paths[aid], speed, delay)
        traj = np.vstack([[0.0, *traj[0, 1:]], traj]) if delay > 0 else traj
        agents[aid] = Negotiator(aid, traj, constitution_for(aid, speed=round(speed, 6)), grid)
    subs = {aid: bus.subscribe(f"intent/{other}", aid) for aid in ids for other in ids if other != aid}
    world = World([Vehicle(aid) for aid in ids], occupancy=grid, seed=seed)
    for aid in ids:
        world.vehicles[aid].state.position = position_at(agents[aid].trajectory, 0.0)
    latest: dict[str, tuple[IntentMsg, int]] = {}
    published: dict[str, int] = {}
    horizon = max(end_time(a.trajectory) for a in agents.values()) + HOLD_MAX + 10.0
    t = 0.0
    min_clear = math.inf
    first_conflict = None
    resolved_at = None
    r = {aid: agents[aid].radius for aid in ids}
    while t <= horizon:
        for aid in ids:
            if published.get(aid) != agents[aid].changes:
                agents[aid].publish(bus)
                published[aid] = agents[aid].changes
        bus.tick(dt)
        for aid in ids:
            for env in subs[aid].drain():
                latest[aid] = (IntentMsg.from_json(env.payload), env.seq)
        for aid in ids:
            if aid in latest:
                before = len(agents[aid].events)
                agents[aid].react(bus, latest[aid][0], latest[aid][1], t)
                kinds = [e["kind"] for e in agents[aid].events[before:]]
                if "conflict" in kinds and first_conflict is None:
                    first_conflict = t
                if first_conflict is not None and resolved_at is None and ("resolved" in kinds or "abort" in kinds):
                    resolved_at = t
        for aid in ids:
            _track(world, aid, agents[aid].trajectory, t)
        world.step(dt)
        t = round(t + dt, 9)
        pa, pb = (world.vehicles[aid].state.position for aid in ids)
        min_clear = min(min_clear, float(np.linalg.norm(pa - pb)) - r[ids[0]] - r[ids[1]])
        if all(t > end_time(a.trajectory) + 2.0 for a in agents.values()):
            break
    _, predicted = predict_min_distance(agents[ids[0]].trajectory, agents[ids[1]].trajectory,
                                        r[ids[0]], r[ids[1]])
    yields = {aid: sum(e["kind"] == "role" and e["data"]["role"] == "yield" for e in agents[aid].events)
              for aid in ids}
    conflicts = max(sum(e["kind"] == "conflict" for e in a.events) for a in agents.values())
    modes = [e["data"]["mode"] for a in agents.values() for e in a.events if e["kind"] == "replan"]
    modes += ["abort" for a in agents.values() for e in a.events if e["kind"] == "abort"]
    if first_conflict is None:
        neg_ticks = 0
    else:
        neg_ticks = int(round(((t if resolved_at is None else resolved_at) - first_conflict) / dt)) + 1
    return NegotiationRun(
        scn.name, seed, min_clear, predicted, yields, conflicts, modes,
        any(v.collided for v in world.vehicles.values()),
        {aid: end_time(agents[aid].trajectory) for aid in ids}, neg_ticks,
    )
