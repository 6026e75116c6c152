"""Experiment harnesses: one function per results table, each returning CSV-ready rows."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agent import AgentSpec, Constitution, instantiate
from .bus import Bus
from .diagnostics import WINDOW, Diagnosis, Monitor
from .planner import (
    DetectorParams,
    GridMap,
    Infeasible,
    agent_plan,
    astar,
    evaluate,
    parse_ascii,
    perceive_map,
)
from .sim import SensorConfig, Vehicle, World
from .topics import standard_bus


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})
    return buf.getvalue()


# -- diagnostics ---------------------------------------------------------------

DIAG_CASES = (
    ("All Thrusters OK", ()),
    ("Thruster 2 Disabled", (2,)),
    ("Thruster 6 Disabled", (6,)),
    ("Thrusters 2 & 3 Disabled", (2, 3)),
    ("Thrusters 2, 3, 6, 7 Disabled", (2, 3, 6, 7)),
)
DIAG_COLUMNS = ["case", "simulated_fault", "trials", "correct", "accuracy_pct"]
STATUS_PERIOD = 0.2
SIM_DT = 0.1

DIAGNOSTICIAN = Constitution(
    core_directive="Diagnose thruster health from windows of ten status samples.",
    domain_knowledge=(
        "pwm neutral: 1500",
        "pwm range: 1100 to 1900 microseconds",
        "A thruster flat at neutral while commanded to move is dead.",
    ),
    reasoning_guidelines=(
        "Compare commanded against observed PWM per thruster.",
        "Report issue, status and action on three lines.",
    ),
    output_schema_id="diagnosis",
)


def maneuver(seed: int) -> list[float]:
    """Steady surge, heave and slight turn; every thruster is well away from neutral."""
    r = np.random.default_rng(seed)
    return [0.4 * r.uniform(0.9, 1.1), 0.05 * r.uniform(-1, 1), 0.25 * r.uniform(0.9, 1.1),
            0.0, 0.0, 0.1 * r.uniform(-1, 1)]


@dataclass
class DiagnosticsRun:
    diagnoses: list[Diagnosis]
    truth: list[tuple[str, ...]]  # injected labels per status sample


class _DiagnosticsLoop:
    """Sim -> vehicle/status -> window monitor -> diagnostics agent -> diagnostics/report."""

    def __init__(self, seed: int, bus: Bus | None):
        self.bus = bus or standard_bus(seed)
        self.world = World([Vehicle("auv")], sensors=SensorConfig(pwm_noise=1.0), seed=seed)
        self.world.vehicles["auv"].state.position = np.array([0.0, 0.0, 2.0])
        self.agent = instantiate(AgentSpec("diagnostician", "diagnostics", DIAGNOSTICIAN,
                                           subscriptions=("diagnostics/window",),
                                           publications=("diagnostics/report",)), self.bus)
        self.status_sub = self.bus.subscribe("vehicle/status", "monitor")
        self.report_sub = self.bus.subscribe("diagnostics/report", "operator")
        self.monitor = Monitor()
        self.twist = maneuver(seed)
        self.steps = int(round(STATUS_PERIOD / SIM_DT))

    def sample(self) -> Diagnosis | None:
        for _ in range(self.steps):
            self.world.command("auv", self.twist)
            self.world.step(SIM_DT)
        status = self.world.status("auv")
        self.bus.emit("vehicle/status", status.to_json(), "sim")
        self.bus.tick(STATUS_PERIOD / 2)
        for env in self.status_sub.drain():
            self.monitor.push(env.payload)
        if len(self.monitor.window) == WINDOW:
            self.bus.emit("diagnostics/window", {"samples": [s.to_json() for s in self.monitor.window]}, "monitor")
        self.bus.tick(STATUS_PERIOD / 4)
        self.agent.step()
        self.bus.tick(STATUS_PERIOD / 4)
        got = self.report_sub.drain()
        if not got:
            return None
        p = got[-1].payload
        return Diagnosis(p["issue"], p["status"], p["action"], tuple(p["labels"]), status.t)


def _labels(faults: Sequence[int]) -> tuple[str, ...]:
    return tuple("dead" if i in faults else "ok" for i in range(8))


def diagnostics_trial(faults: Sequence[int], seed: int, warmup: int = 15, bus: Bus | None = None) -> Diagnosis:
    """Inject ``faults`` from the start and return the first diagnosis after warm-up."""
    loop = _DiagnosticsLoop(seed, bus)
    loop.world.inject_fault("auv", faults)
    last = None
    for _ in range(warmup):
        last = loop.sample() or last
    return last


def diagnostics_matrix(seeds: Sequence[int] = range(5)) -> list[dict]:
    rows = []
    for name, faults in DIAG_CASES:
        correct = sum(diagnostics_trial(faults, s).labels == _labels(faults) for s in seeds)
        rows.append({"case": name, "simulated_fault": ",".join(map(str, faults)) or "none",
                     "trials": len(seeds), "correct": correct,
                     "accuracy_pct": round(100.0 * correct / len(seeds), 1)})
    return rows


def transition_test(seed: int = 0, faults: Sequence[int] = (2, 3), inject_at: int = 20, clear_at: int = 50,
                    n: int = 80, bus: Bus | None = None) -> DiagnosticsRun:
    """Faults injected at sample ``inject_at`` and cleared at ``clear_at``."""
    loop = _DiagnosticsLoop(seed, bus)
    diagnoses, truth = [], []
    for k in range(n):
        if k == inject_at:
            loop.world.inject_fault("auv", faults)
        if k == clear_at:
            loop.world.clear_fault("auv", faults)
        truth.append(_labels(faults) if inject_at <= k < clear_at else _labels(()))
        diagnoses.append(loop.sample())
    return DiagnosticsRun(diagnoses, truth)


def first_match(run: DiagnosticsRun, labels: tuple[str, ...], after: int) -> int | None:
    for k in range(after, len(run.diagnoses)):
        d = run.diagnoses[k]
        if d is not None and d.labels == labels:
            return k
    return None


# -- planner -------------------------------------------------------------------

PLANNER_MAPS = {
    "m1": """
S...................
....................
....................
.......###..........
.......###..........
.......###..........
..............###...
..............###...
..............###...
...................G
""",
    "m2": """
....................
.S..................
.........#..........
.........#..........
.........#..........
.........#..........
.........#..........
.........#.........G
....................
....................
""",
    "m3": """
S.........##........
..........##........
....................
.....##.............
.....##.............
...............##...
..........##...##...
..........##........
....................
..................G.
""",
    "m4": """
....................
S...................
....................
....######..........
....................
.........######.....
....................
...............###..
...................G
....................
""",
    "m5": """
..........#.........
S.........#.........
..........#.........
....................
....................
....................
....................
..........#.........
..........#........G
..........#.........
""",
}
PLANNER_RESOLUTION = 0.5
PLANNER_COLUMNS = ["map_id", "trial", "backend", "success", "final_error_m", "error_delta_m"]


def planner_map(map_id: str) -> GridMap:
    return parse_ascii(PLANNER_MAPS[map_id], PLANNER_RESOLUTION)


def planner_trial(truth: GridMap, seed: int, detector: DetectorParams = DetectorParams()) -> dict:
    """Agent plans on its perceived map; the A* baseline sees ground truth."""
    baseline = astar(truth, truth.start, truth.goal, 1)
    perceived = perceive_map(truth, detector, seed)
    path = agent_plan(perceived, truth.start, truth.goal)
    ev = evaluate(path, truth, truth.to_world(truth.goal), baseline)
    return {"success": ev.success, "final_error_m": ev.final_error, "error_delta_m": ev.error_delta,
            "collided": ev.collided}


def planner_matrix(seeds: Sequence[int] = range(5), detector: DetectorParams = DetectorParams(),
                   map_ids: Sequence[str] = tuple(PLANNER_MAPS)) -> list[dict]:
    rows = []
    for map_id in map_ids:
        truth = planner_map(map_id)
        for s in seeds:
            r = planner_trial(truth, s, detector)
            rows.append({"map_id": map_id, "trial": s, "backend": "template", "success": int(r["success"]),
                         "final_error_m": _round(r["final_error_m"]), "error_delta_m": _round(r["error_delta_m"])})
    return rows


def _round(v: float) -> float | str:
    return "" if v is None or not math.isfinite(v) else round(float(v), 4)


def random_grid(rng: np.random.Generator, size: int = 10, density: float = 0.25) -> GridMap:
    occ = rng.random((size, size)) < density
    free = np.argwhere(~occ)
    i, j = rng.choice(len(free), 2, replace=False)
    g = GridMap(occ, 1.0)
    g.start, g.goal = tuple(int(v) for v in free[i]), tuple(int(v) for v in free[j])
    return g


def astar_cost(g: GridMap) -> float | None:
    try:
        return astar(g, g.start, g.goal).length
    except Infeasible:
        return None


# -- negotiation -----------------------------------------------------------------

NEGOTIATION_COLUMNS = ["scenario", "seed", "conflicts", "yields", "modes", "min_clearance_m", "predicted_m",
                       "collided"]


def negotiation_matrix(seeds: Sequence[int] = range(5)) -> list[dict]:
    from .negotiation import run_scenario, scenarios

    rows = []
    for scn in scenarios():
        for s in seeds:
            r = run_scenario(scn, s)
            rows.append({"scenario": scn.name, "seed": s, "conflicts": r.conflicts, "yields": sum(r.yields.values()),
                         "modes": "|".join(r.modes), "min_clearance_m": round(r.min_clearance, 4),
                         "predicted_m": _round(r.predicted), "collided": int(r.collided)})
    return rows


# -- recovery --------------------------------------------------------------------

RECOVERY_COLUMNS = ["deviation_m", "direction", "seed", "baseline_s", "memory_s"]


def recovery_matrix(seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    from .recovery import run_matrix

    return [{"deviation_m": b.deviation, "direction": b.direction, "seed": b.seed,
             "baseline_s": round(b.recovery_time, 3), "memory_s": round(m.recovery_time, 3)}
            for b, m in run_matrix(seeds=seeds)]


# -- tuning ------------------------------------------------------------------------

def tuning_matrix(scenes: Sequence[int] = range(5)) -> list[dict]:
    from .tuning import TARGET_CLASSES, make_scene, run_tuning

    rows = []
    trial = 0
    for cls in TARGET_CLASSES:
        for idx in scenes:
            for rec in run_tuning(make_scene(idx), cls):
                rows.append({"trial": trial, "target_class": cls, "episode": rec.episode, "words": rec.word_count,
                             "relevance_pct": round(rec.relevance, 2), "constitution_digest": rec.constitution_digest})
            trial += 1
    return rows


# -- codesynth ----------------------------------------------------------------------

CODESYNTH_COLUMNS = ["node", "kind", "generation_time_s", "tests_passed", "tests_total", "deployed"]
SELF_REPAIR_COLUMNS = ["seed", "kf_error_m", "dead_reckoning_error_m", "ratio"]

SYNTH_REQUESTS = (
    ("averaging", "stateful averaging filter", (("sensors/value", "scalar"),), ("filters/value", "scalar"),
     {"window": 10}),
    ("dual_odometry", "kalman fuse two odometry", (("odom/a", "position2d"), ("odom/b", "position2d")),
     ("nav/fused", "nav_estimate"), {"sigma_a": 0.1, "sigma_b": 0.2}),
    ("dvl_compass", "kalman filter dvl compass", (("vehicle/dvl", "dvl"), ("vehicle/compass", "compass")),
     ("nav/fused", "nav_estimate"), {"dt": 0.1}),
)


def codesynth_rows(bus: Bus | None = None) -> list[dict]:
    from .codesynth import NodeManager, NodeRequirement

    rows = []
    for name, kind, inputs, output, params in SYNTH_REQUESTS:
        b = bus or standard_bus(0)
        rep = NodeManager(b).handle(NodeRequirement(kind, inputs, output, {**params, "node_id": name}))
        rows.append({"node": name, "kind": kind, "generation_time_s": round(rep.generation_time, 6),
                     "tests_passed": rep.tests_passed, "tests_total": rep.tests_total, "deployed": int(rep.deployed)})
    return rows


def self_repair_rows(seeds: Sequence[int] = range(10)) -> list[dict]:
    from .codesynth import self_repair_trial

    rows = []
    for s in seeds:
        r = self_repair_trial(s)
        rows.append({"seed": s, "kf_error_m": round(r.kf_error, 4),
                     "dead_reckoning_error_m": round(r.dead_reckoning_error, 4), "ratio": round(r.ratio, 4)})
    return rows


# -- mission -------------------------------------------------------------------------

MISSION_COLUMNS = ["prompt", "interpreted", "tasks", "planned", "planned_collision", "success"]


def interpretation_rows(seed: int = 0) -> list[dict]:
    from .mission import DOCUMENTED_PROMPTS, run_command

    rows = []
    for prompt, expected in DOCUMENTED_PROMPTS:
        out = run_command(prompt, seed)
        rows.append({
            "prompt": prompt,
            "interpreted": int(out.graph.tasks == expected),
            "tasks": "; ".join(f"{t.verb}({t.goal}, avoid={str(t.avoid_obstacles).lower()})" for t in out.graph.tasks),
            "planned": int(all(t.planned for t in out.tasks)),
            "planned_collision": int(any(t.planned_collision for t in out.tasks)),
            "success": int(out.success),
        })
    return rows
