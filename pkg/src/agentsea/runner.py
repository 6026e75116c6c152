"""Scenario runner: a TOML scenario file in, CSV tables, bus traces and a summary out.

A scenario names one or more experiments, the trial seeds, the reasoner
backend and a tick budget. Every experiment writes its table, one traced trial
on a recorded bus, and a list of acceptance assertions. The bundle passes when
every assertion holds.

Example::

    [scenario]
    name = "diagnostics"
    experiments = ["diagnostics"]
    seed = 0
    seeds = [0, 1, 2, 3, 4]
    backend = "template"
    ticks = 2000

    [acceptance]
    min_accuracy_pct = 100
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import tomli

from . import experiments as ex
from .agent import Constitution, PlaybackBackend, RemoteBackend, TemplateBackend
from .bus import Bus, Trace, record, replay
from .planner import DetectorParams, GridMap, load_map
from .topics import standard_bus

EXPERIMENTS = ("diagnostics", "planner", "negotiation", "recovery", "tuning", "codesynth", "mission")
BACKENDS = ("template", "playback", "remote")
ENV_URL = "AGENTSEA_REMOTE_URL"
ENV_MODEL = "AGENTSEA_REMOTE_MODEL"

_SECTIONS = {
    "scenario": {"name", "experiments", "seed", "seeds", "backend", "ticks", "transcript"},
    "world": {"map", "resolution", "start", "goals"},
    "sensors": {"jitter_sigma", "dilation_prob", "miss_prob"},
    "agents": {"dir"},
    "mission": {"commands"},
    "acceptance": {"min_accuracy_pct", "min_success_pct", "max_success_pct", "max_repair_ratio",
                   "min_repair_fraction", "min_relevance_pct"},
}
DEFAULT_ACCEPTANCE = {
    "min_accuracy_pct": 100.0,
    "min_success_pct": 40.0,
    "max_success_pct": 100.0,
    "max_repair_ratio": 0.5,
    "min_repair_fraction": 0.9,
    "min_relevance_pct": 100.0,
}


class ConfigError(ValueError):
    """Scenario file problem; the message names the line or the field."""


@dataclass
class ScenarioConfig:
    name: str
    experiments: tuple[str, ...]
    seed: int
    seeds: tuple[int, ...]
    backend: str = "template"
    ticks: int = 100_000
    transcript: Path | None = None
    map_path: Path | None = None
    resolution: float = 0.5
    start: tuple[float, float, float] | None = None
    goals: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    detector: DetectorParams = DetectorParams()
    agents_dir: Path | None = None
    commands: tuple[str, ...] = ()
    acceptance: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_ACCEPTANCE))
    source_digest: str = ""

    def constitution(self, role: str) -> Constitution | None:
        """Constitution override for ``role`` from the agents directory, if present."""
        if self.agents_dir is None:
            return None
        for suffix in (".yaml", ".yml", ".txt"):
            p = self.agents_dir / f"{role}{suffix}"
            if p.exists():
                try:
                    return Constitution.load(p)
                except (ValueError, OSError) as exc:
                    raise ConfigError(f"agents.dir: {p.name}: {exc}") from exc
        return None

    def grid(self) -> GridMap | None:
        return None if self.map_path is None else load_map(self.map_path, self.resolution)


def _need(cond: bool, where: str, what: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {what}")


def _triple(value: Any, where: str) -> tuple[float, float, float]:
    ok = isinstance(value, list) and len(value) == 3 and all(isinstance(v, (int, float)) for v in value)
    _need(ok, where, "expected [x, y, z]")
    return tuple(float(v) for v in value)


def parse_config(text: str, base: Path = Path("."), source: str = "<scenario>") -> ScenarioConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for section, body in data.items():
        _need(section in _SECTIONS, section, "unknown section")
        _need(isinstance(body, dict), section, "expected a table")
        for key in body:
            _need(key in _SECTIONS[section], f"{section}.{key}", "unknown field")
    sc = data.get("scenario")
    _need(sc is not None, "scenario", "missing section")

    name = sc.get("name", "scenario")
    _need(isinstance(name, str), "scenario.name", "expected a string")
    exps = sc.get("experiments")
    _need(isinstance(exps, list) and exps, "scenario.experiments", "expected a non-empty list")
    for e in exps:
        _need(e in EXPERIMENTS, "scenario.experiments", f"unknown experiment {e!r}")
    seeds = sc.get("seeds")
    _need(isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds),
          "scenario.seeds", "expected a non-empty list of non-negative integers")
    seed = sc.get("seed", seeds[0])
    _need(isinstance(seed, int) and seed >= 0, "scenario.seed", "expected a non-negative integer")
    backend = sc.get("backend", "template")
    _need(backend in BACKENDS, "scenario.backend", f"expected one of {', '.join(BACKENDS)}")
    ticks = sc.get("ticks", 100_000)
    _need(isinstance(ticks, int) and ticks > 0, "scenario.ticks", "expected a positive integer")
    transcript = None
    if "transcript" in sc:
        _need(isinstance(sc["transcript"], str), "scenario.transcript", "expected a path string")
        transcript = base / sc["transcript"]
        _need(transcript.is_file(), "scenario.transcript", f"file not found: {transcript}")

    cfg = ScenarioConfig(name, tuple(exps), seed, tuple(seeds), backend, ticks, transcript)

    world = data.get("world", {})
    if "map" in world:
        _need(isinstance(world["map"], str), "world.map", "expected a path string")
        cfg.map_path = base / world["map"]
        _need(cfg.map_path.is_file(), "world.map", f"file not found: {cfg.map_path}")
    if "resolution" in world:
        r = world["resolution"]
        _need(isinstance(r, (int, float)) and r > 0, "world.resolution", "expected a positive number")
        cfg.resolution = float(r)
    if "start" in world:
        cfg.start = _triple(world["start"], "world.start")
    goals = world.get("goals", {})
    _need(isinstance(goals, dict), "world.goals", "expected a table of name = [x, y, z]")
    cfg.goals = {str(k): _triple(v, f"world.goals.{k}") for k, v in goals.items()}
    if cfg.map_path is not None:
        try:
            grid = cfg.grid()
        except (ValueError, OSError) as exc:
            raise ConfigError(f"world.map: {exc}") from exc
        for where, p in [("world.start", cfg.start)] + [(f"world.goals.{k}", v) for k, v in cfg.goals.items()]:
            if p is not None:
                _need(grid.free(grid.to_cell(p[0], p[1])), where, "outside the map or inside an obstacle")

    sensors = data.get("sensors", {})
    for k, v in sensors.items():
        _need(isinstance(v, (int, float)) and v >= 0, f"sensors.{k}", "expected a non-negative number")
        if k != "jitter_sigma":
            _need(v <= 1, f"sensors.{k}", "probability above 1")
    cfg.detector = DetectorParams(**{k: float(v) for k, v in sensors.items()})

    agents = data.get("agents", {})
    if "dir" in agents:
        _need(isinstance(agents["dir"], str), "agents.dir", "expected a path string")
        cfg.agents_dir = base / agents["dir"]
        _need(cfg.agents_dir.is_dir(), "agents.dir", f"directory not found: {cfg.agents_dir}")

    cmds = data.get("mission", {}).get("commands", [])
    _need(isinstance(cmds, list) and all(isinstance(c, str) and c.strip() for c in cmds),
          "mission.commands", "expected a list of non-empty strings")
    cfg.commands = tuple(cmds)
    if "mission" in cfg.experiments and cfg.commands:
        _need(bool(cfg.goals) and cfg.map_path is not None and cfg.start is not None, "world",
              "custom mission commands need world.map, world.start and world.goals")

    for k, v in data.get("acceptance", {}).items():
        _need(isinstance(v, (int, float)), f"acceptance.{k}", "expected a number")
        cfg.acceptance[k] = float(v)

    if backend == "playback":
        _need(transcript is not None, "scenario.transcript", "playback backend needs a transcript file")
    cfg.source_digest = hashlib.sha256(text.encode()).hexdigest()
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(text, path.parent, str(path))


def make_backend(cfg: ScenarioConfig):
    if cfg.backend == "template":
        return TemplateBackend()
    if cfg.backend == "playback":
        return PlaybackBackend.load(cfg.transcript)
    url = os.environ.get(ENV_URL)
    if not url:
        raise ConfigError(f"scenario.backend: remote backend needs {ENV_URL} in the environment")
    return RemoteBackend(url, os.environ.get(ENV_MODEL, "default"))


# -- experiments ----------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Outcome:
    tables: dict[str, tuple[list[dict], list[str]]]
    checks: list[Check]
    bus: Bus | None = None
    timing: dict = field(default_factory=dict)


def _diagnostics(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    rows = ex.diagnostics_matrix(cfg.seeds)
    lo = cfg.acceptance["min_accuracy_pct"]
    checks = [Check(f"accuracy {r['case']}", r["accuracy_pct"] >= lo, f"{r['correct']}/{r['trials']}") for r in rows]
    ex.diagnostics_trial(ex.DIAG_CASES[-1][1], cfg.seed, bus=bus)
    return Outcome({"diagnostics": (rows, ex.DIAG_COLUMNS)}, checks, bus)


def _planner(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    grid = cfg.grid()
    maps = {"custom": grid} if grid is not None else {m: ex.planner_map(m) for m in ex.PLANNER_MAPS}
    rows = []
    for map_id, truth in maps.items():
        for s in cfg.seeds:
            r = ex.planner_trial(truth, s, cfg.detector)
            rows.append({"map_id": map_id, "trial": s, "backend": cfg.backend, "success": int(r["success"]),
                         "final_error_m": ex._round(r["final_error_m"]),
                         "error_delta_m": ex._round(r["error_delta_m"])})
    lo, hi = cfg.acceptance["min_success_pct"], cfg.acceptance["max_success_pct"]
    checks = []
    for map_id in maps:
        got = [r["success"] for r in rows if r["map_id"] == map_id]
        pct = 100.0 * sum(got) / len(got)
        checks.append(Check(f"success {map_id}", lo <= pct <= hi, f"{pct:.0f}%"))
    return Outcome({"planner": (rows, ex.PLANNER_COLUMNS)}, checks)


def _negotiation(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    from .negotiation import run_scenario as run_pair, scenarios

    rows = ex.negotiation_matrix(cfg.seeds)
    checks = [
        Check("clearance positive", all(r["min_clearance_m"] > 0 and not r["collided"] for r in rows),
              f"min {min(r['min_clearance_m'] for r in rows):.3f} m"),
        Check("one yield per conflict", all(r["yields"] == r["conflicts"] for r in rows)),
    ]
    run_pair(scenarios()[0], cfg.seed, bus=bus)
    return Outcome({"negotiation": (rows, ex.NEGOTIATION_COLUMNS)}, checks, bus)


def _recovery(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    from .recovery import run_trial

    rows = ex.recovery_matrix(cfg.seeds)
    checks = [Check("memory faster", all(r["memory_s"] < r["baseline_s"] for r in rows),
                    f"{sum(r['memory_s'] < r['baseline_s'] for r in rows)}/{len(rows)}")]
    run_trial(1.5, 1, cfg.seed, memory=True, bus=bus)
    return Outcome({"recovery": (rows, ex.RECOVERY_COLUMNS)}, checks, bus)


TUNING_COLUMNS = ["trial", "target_class", "episode", "words", "relevance_pct", "constitution_digest"]


def _tuning(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    from .tuning import STUDENT, TARGET_CLASSES, make_scene, run_tuning

    start = cfg.constitution("student") or STUDENT
    rows, finals = [], []
    trial = 0
    for cls in TARGET_CLASSES:
        for idx in cfg.seeds:
            traced = trial == 0
            recs = run_tuning(make_scene(idx), cls, start=start, reasoner=reasoner, bus=bus if traced else None)
            for rec in recs:
                rows.append({"trial": trial, "target_class": cls, "episode": rec.episode, "words": rec.word_count,
                             "relevance_pct": round(rec.relevance, 2), "constitution_digest": rec.constitution_digest})
            finals.append(recs[-1].relevance)
            trial += 1
    lo = cfg.acceptance["min_relevance_pct"]
    checks = [Check("final relevance", all(f >= lo for f in finals),
                    f"{sum(f >= lo for f in finals)}/{len(finals)} trials")]
    return Outcome({"tuning": (rows, TUNING_COLUMNS)}, checks, bus)


def _codesynth(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    from .codesynth import self_repair_trial

    suites = ex.codesynth_rows()
    repair = ex.self_repair_rows(cfg.seeds)
    ratio, frac = cfg.acceptance["max_repair_ratio"], cfg.acceptance["min_repair_fraction"]
    good = sum(r["ratio"] <= ratio for r in repair)
    checks = [Check(f"suite {r['node']}", r["tests_passed"] == r["tests_total"] and bool(r["deployed"]),
                    f"{r['tests_passed']}/{r['tests_total']}") for r in suites]
    checks.append(Check("self repair", good >= frac * len(repair), f"{good}/{len(repair)} seeds"))
    self_repair_trial(cfg.seed, bus=bus)
    # generation time is wall clock; it goes to timing.json, not the digested tables
    timing = {r["node"]: r.pop("generation_time_s") for r in suites}
    cols = [c for c in ex.CODESYNTH_COLUMNS if c != "generation_time_s"]
    return Outcome({"codesynth": (suites, cols), "self_repair": (repair, ex.SELF_REPAIR_COLUMNS)}, checks, bus,
                   {"generation_time_s": timing})


def _mission(cfg: ScenarioConfig, bus: Bus, reasoner) -> Outcome:
    from .mission import DOCUMENTED_PROMPTS, MissionSetup, Unparseable, run_command, tank_map, TANK_GOALS, TANK_START

    if cfg.commands:
        truth, goals, start = cfg.grid(), cfg.goals, cfg.start
        prompts = [(c, None) for c in cfg.commands]
    else:
        truth, goals, start = tank_map(), TANK_GOALS, TANK_START
        prompts = list(DOCUMENTED_PROMPTS)
    commander = cfg.constitution("commander")
    rows, checks = [], []
    for k, (prompt, expected) in enumerate(prompts):
        traced = k == 0
        setup = MissionSetup(truth, goals, start, detector=DetectorParams(0.0, 0.0, 0.0), seed=cfg.seed,
                             tick_budget=cfg.ticks if traced else None)
        try:
            out = run_command(prompt, cfg.seed, bus=bus if traced else None, setup=setup, reasoner=reasoner,
                              constitution=commander)
        except Unparseable:
            rows.append({"prompt": prompt, "interpreted": 0, "tasks": "", "planned": 0, "planned_collision": 0,
                         "success": 0})
            checks.append(Check(f"interpret #{k}", False, "unparseable"))
            continue
        ok = expected is None or out.graph.tasks == expected
        rows.append({
            "prompt": prompt,
            "interpreted": int(ok),
            "tasks": "; ".join(f"{t.verb}({t.goal}, avoid={str(t.avoid_obstacles).lower()})" for t in out.graph.tasks),
            "planned": int(all(t.planned for t in out.tasks)),
            "planned_collision": int(any(t.planned_collision for t in out.tasks)),
            "success": int(out.success),
        })
        checks.append(Check(f"interpret #{k}", ok and rows[-1]["planned"] == 1, rows[-1]["tasks"]))
    return Outcome({"mission": (rows, ex.MISSION_COLUMNS)}, checks, bus)


HARNESSES: dict[str, Callable[[ScenarioConfig, Bus, Any], Outcome]] = {
    "diagnostics": _diagnostics,
    "planner": _planner,
    "negotiation": _negotiation,
    "recovery": _recovery,
    "tuning": _tuning,
    "codesynth": _codesynth,
    "mission": _mission,
}


# -- bundle ---------------------------------------------------------------------------------

@dataclass
class ReportBundle:
    out_dir: Path
    artifacts: dict[str, str]  # relative file name -> sha256
    summary: dict
    passed: bool

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.artifacts, sort_keys=True).encode()).hexdigest()

    def exit_code(self) -> int:
        return 0 if self.passed else 1


def _write(out: Path, rel: str, text: str, artifacts: dict[str, str]) -> None:
    p = out / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")
    artifacts[rel] = hashlib.sha256(text.encode()).hexdigest()


def run_scenario(config: ScenarioConfig | str | Path, out_dir: str | Path, seed: int | None = None,
                 backend: str | None = None, ticks: int | None = None) -> ReportBundle:
    """Run every experiment of the scenario and write the report bundle into ``out_dir``."""
    cfg = config if isinstance(config, ScenarioConfig) else load_config(config)
    if seed is not None:
        _need(seed >= 0, "seed", "expected a non-negative integer")
        cfg.seed = seed
    if backend is not None:
        _need(backend in BACKENDS, "backend", f"expected one of {', '.join(BACKENDS)}")
        cfg.backend = backend
        _need(backend != "playback" or cfg.transcript is not None, "scenario.transcript",
              "playback backend needs a transcript file")
    if ticks is not None:
        _need(ticks > 0, "ticks", "expected a positive integer")
        cfg.ticks = ticks
    reasoner = make_backend(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    artifacts: dict[str, str] = {}
    results, timing = {}, {}
    for name in cfg.experiments:
        t0 = time.perf_counter()
        bus = standard_bus(cfg.seed)
        res = HARNESSES[name](cfg, bus, reasoner)
        timing[name] = {"wall_s": round(time.perf_counter() - t0, 3), **res.timing}
        for table, (rows, cols) in res.tables.items():
            _write(out, f"{table}.csv", ex.to_csv(rows, cols), artifacts)
        if res.bus is not None:
            ticks_used = res.bus.tick_index
            res.checks.append(Check("tick budget", ticks_used <= cfg.ticks, f"{ticks_used}/{cfg.ticks} ticks"))
            _write(out, f"traces/{name}.jsonl", record(res.bus).to_jsonl(), artifacts)
            inbox = json.dumps(res.bus.inbox_digests(), indent=1, sort_keys=True) + "\n"
            _write(out, f"traces/{name}.inbox.json", inbox, artifacts)
        results[name] = [{"check": c.name, "passed": c.passed, "detail": c.detail} for c in res.checks]

    passed = all(c["passed"] for checks in results.values() for c in checks)
    summary = {"scenario": cfg.name, "seed": cfg.seed, "seeds": list(cfg.seeds), "backend": cfg.backend,
               "ticks": cfg.ticks, "config_digest": cfg.source_digest, "experiments": results,
               "artifacts": dict(sorted(artifacts.items())), "passed": passed}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return ReportBundle(out, dict(sorted(artifacts.items())), summary, passed)


def bus_for_trace(trace: Trace) -> Bus:
    """Fresh standard bus carrying the trace's topic bindings (including dynamic ones)."""
    return standard_bus(trace.seed, extra_topics=trace.topics)


def replay_file(path: str | Path) -> tuple[Bus, dict[str, str] | None]:
    """Replay a trace file; also return the recorded inbox digests if they sit beside it."""
    path = Path(path)
    trace = Trace.load(path)
    bus = replay(trace, bus_for_trace(trace))
    side = path.with_name(path.name.removesuffix(".jsonl") + ".inbox.json")
    expected = json.loads(side.read_text()) if side.is_file() else None
    return bus, expected


def read_report(in_dir: str | Path) -> dict:
    p = Path(in_dir) / "summary.json"
    if not p.is_file():
        raise ConfigError(f"report: no summary.json in {in_dir}")
    return json.loads(p.read_text())
