"""End-to-end acceptance checks; each test records one PASS/FAIL line in the terminal summary."""

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from agentsea import experiments as ex
from agentsea.agent import VIOLATION_KINDS, AgentSpec, ReasonerReply, SafetyLimits, Constitution, instantiate
from agentsea.negotiation import scenarios
from agentsea.planner import DetectorParams, agent_plan, astar, perceive_map
from agentsea.recovery import DEVIATIONS, run_matrix
from agentsea.runner import replay_file, run_scenario
from agentsea.topics import standard_bus
from agentsea.tuning import STANDARD_SCENE, TARGET_CLASSES, make_scene, run_tuning
from oracles import dijkstra_cost

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.mark.criterion(1, "diagnostics table reproduction")
def test_diagnostics(criterion):
    rows = ex.diagnostics_matrix(range(5))
    correct = sum(r["correct"] for r in rows)
    criterion.check(correct == 25, f"{correct}/25 windows classified")
    run = ex.transition_test(faults=(2, 3), inject_at=20, clear_at=50)
    on = ex.first_match(run, ex._labels((2, 3)), 20)
    off = ex.first_match(run, ex._labels(()), 50)
    lag_on = None if on is None else on - 20
    lag_off = None if off is None else off - 50
    criterion.check(lag_on is not None and lag_on <= 10, f"fault flip after {lag_on} samples")
    criterion.check(lag_off is not None and lag_off <= 10, f"clear flip after {lag_off} samples")
    criterion.verdict()


@pytest.mark.criterion(2, "negotiation safety")
def test_negotiation(criterion):
    rows = ex.negotiation_matrix(range(5))
    safe = sum(r["min_clearance_m"] > 0 and not r["collided"] for r in rows)
    criterion.check(len(rows) == 40 and safe == 40, f"{safe}/{len(rows)} runs with positive clearance")
    tight = {s.name for s in scenarios() if s.tight}
    tight_clear = [r["min_clearance_m"] for r in rows if r["scenario"] in tight]
    criterion.check(any(0 < c < 0.5 for c in tight_clear), f"tight corridor min {min(tight_clear):.3f} m")
    one_yield = sum(r["yields"] == r["conflicts"] for r in rows)
    criterion.check(one_yield == len(rows), f"one yield per conflict in {one_yield}/{len(rows)}")
    criterion.check(sum(r["conflicts"] for r in rows) > 0, "conflicts exercised")
    criterion.verdict()


@pytest.mark.criterion(3, "experiential recovery ordering")
def test_recovery(criterion):
    pairs = run_matrix()
    faster = sum(m.recovery_time < b.recovery_time for b, m in pairs)
    criterion.check(len(pairs) == 18 and faster == 18, f"memory faster in {faster}/{len(pairs)}")
    series = defaultdict(dict)
    for b, m in pairs:
        series[(b.direction, b.seed, "baseline")][b.deviation] = b.recovery_time
        series[(m.direction, m.seed, "memory")][m.deviation] = m.recovery_time
    monotone = sum(all(s[a] < s[c] for a, c in zip(DEVIATIONS, DEVIATIONS[1:])) for s in series.values())
    criterion.check(monotone == len(series), f"monotone in deviation for {monotone}/{len(series)} series")
    means = {arm: [np.mean([s[d] for k, s in series.items() if k[2] == arm]) for d in DEVIATIONS]
             for arm in ("baseline", "memory")}
    criterion.check(True, "mean s " + ", ".join(f"{a} {'/'.join(f'{v:.1f}' for v in vs)}" for a, vs in means.items()))
    criterion.verdict()


@pytest.mark.criterion(4, "teacher-student convergence")
def test_tuning(criterion):
    good = 0
    for cls in TARGET_CLASSES:
        for idx in range(5):
            recs = run_tuning(make_scene(idx), cls)
            rel = [r.relevance for r in recs]
            words = [r.word_count for r in recs]
            good += (rel == sorted(rel) and words == sorted(words, reverse=True)
                     and rel[-1] == 100.0 and recs[-1].episode <= 6)
    criterion.check(good == 20, f"{good}/20 trials monotone and converged by episode 6")
    first = run_tuning(make_scene(STANDARD_SCENE), TARGET_CLASSES[0])[0]
    criterion.check(first.relevance <= 20 and first.word_count >= 30,
                    f"standard scene episode 1: {first.word_count} words, {first.relevance:.1f}%")
    criterion.verdict()


@pytest.mark.criterion(5, "navigation self-repair")
def test_self_repair(criterion):
    rows = ex.self_repair_rows(range(10))
    good = sum(r["ratio"] <= 0.5 for r in rows)
    criterion.check(good >= 9, f"KF/DR ratio <= 0.5 in {good}/10 seeds (worst {max(r['ratio'] for r in rows):.2f})")
    suites = {r["node"]: r for r in ex.codesynth_rows()}
    for node in ("averaging", "dual_odometry"):
        r = suites[node]
        criterion.check(r["tests_passed"] == r["tests_total"] and r["deployed"],
                        f"{node} suite {r['tests_passed']}/{r['tests_total']}")
    criterion.verdict()


@pytest.mark.criterion(6, "planner soundness and perception degradation")
def test_planner(criterion):
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(50):
        g = ex.random_grid(rng)
        got, want = ex.astar_cost(g), dijkstra_cost(g)
        agree += (got is None and want is None) or (got is not None and want is not None and abs(got - want) < 1e-9)
    criterion.check(agree == 50, f"A* equals Dijkstra on {agree}/50 maps")
    exact = 0
    for m in ex.PLANNER_MAPS:
        truth = ex.planner_map(m)
        base = astar(truth, truth.start, truth.goal, 1).length
        path = agent_plan(perceive_map(truth, DetectorParams(0, 0, 0), 0), truth.start, truth.goal)
        exact += path.length == base
    criterion.check(exact == len(ex.PLANNER_MAPS), f"zero-noise cost equals baseline on {exact}/{len(ex.PLANNER_MAPS)}")
    rows = ex.planner_matrix(range(5))
    pct = {m: 100 * sum(r["success"] for r in rows if r["map_id"] == m) / 5 for m in ex.PLANNER_MAPS}
    criterion.check(all(40 <= p <= 100 for p in pct.values()),
                    "per-map success " + " ".join(f"{m}={p:.0f}%" for m, p in pct.items()))
    agg = [sum(r["success"] for r in ex.planner_matrix(range(5), DetectorParams(miss_prob=m))) for m in (0.0, 0.1, 0.3)]
    criterion.check(agg[0] >= agg[1] >= agg[2], f"successes at miss 0/0.1/0.3: {agg[0]}/{agg[1]}/{agg[2]}")
    criterion.verdict()


@pytest.mark.criterion(7, "interpretation trials")
def test_interpretation(criterion):
    rows = ex.interpretation_rows()
    ok = sum(r["interpreted"] for r in rows)
    criterion.check(len(rows) == 10 and ok == 10, f"{ok}/{len(rows)} prompts interpreted as documented")
    direct = next(r for r in rows if r["prompt"] == "Inspect goal 2")
    criterion.check(direct["tasks"] == "inspect(goal 2, avoid=false)" and direct["planned_collision"] == 1,
                    "direct 'Inspect goal 2' plans a collision")
    planned = sum(r["planned"] for r in rows if r["interpreted"])
    criterion.check(planned == ok, f"planning success {planned}/{ok}")
    criterion.verdict()


# -- safety parser fuzz ------------------------------------------------------

MAX_SPEED = 1.0
WORKSPACE = ((0.0, 10.0), (0.0, 10.0), (0.0, 5.0))
KEYS = ("vx", "vy", "vz", "yaw_rate", "speed", "depth", "waypoints", "x", "y", "z", "name", "w")


class Scripted:
    """Backend that hands out a prepared list of raw replies (str or bytes)."""

    kind = "playback"

    def __init__(self, replies):
        self.replies = iter(replies)

    def infer(self, query):
        return ReasonerReply(next(self.replies))


def random_value(rng, depth=0):
    r = rng.random()
    if depth > 3 or r < 0.35:
        return rng.choice([rng.normal(0, 3), float(rng.integers(-5, 6)), 1e308, -0.0, True, None,
                           "fast", "", int(rng.integers(-10**6, 10**6))], p=[.3, .2, .05, .05, .1, .1, .05, .05, .1])
    if r < 0.65:
        return {str(rng.choice(KEYS)): random_value(rng, depth + 1) for _ in range(rng.integers(0, 5))}
    return [random_value(rng, depth + 1) for _ in range(rng.integers(0, 4))]


def boundary_reply(rng):
    eps = float(rng.choice([-1e-9, 0.0, 1e-9, 0.5, -0.5]))
    kind = rng.integers(0, 6)
    if kind == 0:
        ang = rng.uniform(0, 2 * np.pi)
        s = MAX_SPEED + eps
        return json.dumps({"vx": s * np.cos(ang), "vy": s * np.sin(ang), "vz": 0.0})
    if kind == 1:
        return json.dumps({"vx": float(rng.normal()), "vy": 0.0, "vz": MAX_SPEED + eps, "yaw_rate": 0.1})
    if kind == 2:
        x = float(rng.choice([WORKSPACE[0][1] + eps, WORKSPACE[0][0] - eps, 5.0]))
        z = float(rng.choice([WORKSPACE[2][1] + eps, -eps, 2.0]))
        return json.dumps({"waypoints": [{"x": 1.0, "y": 1.0}, {"x": x, "y": 5.0, "z": z}]})
    if kind == 3:
        return rng.choice(['{"vx": NaN, "vy": 0}', '{"vx": Infinity, "vy": 0}', '{"vx": "0.5", "vy": 0}',
                           '{"vx": true, "vy": 0}', '{"vy": 0.1}', "[" * 5000 + "]" * 5000, "NOOP", ""])
    if kind == 4:
        return json.dumps([{"vx": 0.1, "vy": 0.1}, {"vx": 5.0, "vy": 0.0}])
    return json.dumps({"vx": 0.2, "vy": 0.1, "extra": {"speed": MAX_SPEED + abs(eps) + 1e-6}})


def fuzz_replies(n, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        mode = k % 3
        if mode == 0:
            out.append(bytes(rng.integers(0, 256, int(rng.integers(0, 40)), dtype=np.uint8)))
        elif mode == 1:
            out.append(json.dumps(random_value(rng), allow_nan=True))
        else:
            out.append(boundary_reply(rng))
    return out


def twist_ok(p):
    nums = [p.get(k) for k in ("vx", "vy", "vz", "yaw_rate") if k in p]
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) for v in nums):
        return False
    return "vx" in p and "vy" in p and np.sqrt(sum(p.get(k, 0.0) ** 2 for k in ("vx", "vy", "vz"))) <= MAX_SPEED


def path_ok(p):
    (x0, x1), (y0, y1), (z0, z1) = WORKSPACE
    pts = p.get("waypoints")
    return isinstance(pts, list) and all(
        x0 <= w["x"] <= x1 and y0 <= w["y"] <= y1 and (not isinstance(w.get("z"), (int, float)) or z0 <= w["z"] <= z1)
        for w in pts)


def expected_candidates(raw):
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError:
            return 1
    if raw.strip().upper() == "NOOP":
        return 0
    try:
        parsed = json.loads(raw)
    except (ValueError, RecursionError):
        return 1
    return len(parsed) if isinstance(parsed, list) else 1


@pytest.mark.criterion(8, "safety-parser totality")
def test_safety_fuzz(criterion):
    n = 10_000
    bus = standard_bus(0)
    limits = SafetyLimits(max_speed=MAX_SPEED, max_depth=WORKSPACE[2][1], workspace=WORKSPACE)
    agents, watchers, replies = {}, {}, {}
    for role, topic, schema in (("pilot", "vehicle/cmd", "twist_cmd"), ("planner", "planner/path", "waypoint_list")):
        replies[role] = fuzz_replies(n // 2, seed=len(role))
        agents[role] = instantiate(AgentSpec(role, role, Constitution(f"Fuzz target {role}.", output_schema_id=schema),
                                             publications=(topic,), reasoner=Scripted(replies[role]), limits=limits),
                                   bus)
        watchers[role] = bus.subscribe(topic, f"watch-{role}")
    events = bus.subscribe("safety/events", "auditor")
    crashes = 0
    published = {r: 0 for r in agents}
    for k in range(n // 2):
        for role, agent in agents.items():
            try:
                published[role] += len(agent.step())
            except Exception:
                crashes += 1
        if k % 100 == 99:
            bus.tick(0.1)
    bus.tick(0.1)
    bad = sum(not twist_ok(e.payload) for e in watchers["pilot"].drain())
    bad += sum(not path_ok(e.payload) for e in watchers["planner"].drain())
    criterion.check(crashes == 0, f"{crashes} crashes over {n} replies")
    criterion.check(bad == 0, f"{bad} bad envelopes among {sum(published.values())} published")
    blocks = [v for a in agents.values() for v in a.blocked]
    labels = events.drain()
    labelled = all(v.kind in VIOLATION_KINDS for v in blocks) and all(
        e.payload["kind"] in VIOLATION_KINDS for e in labels)
    criterion.check(labelled and len(labels) == len(blocks), f"{len(blocks)} blocks, all labelled")
    expected = sum(expected_candidates(r) for rs in replies.values() for r in rs)
    accounted = len(blocks) + sum(published.values())
    criterion.check(accounted == expected, f"{accounted}/{expected} candidates published or blocked")
    kinds = {kind: sum(v.kind == kind for v in blocks) for kind in VIOLATION_KINDS}
    criterion.check(all(kinds.values()), "blocks by kind " + " ".join(f"{k}={v}" for k, v in kinds.items()))
    criterion.verdict()


@pytest.mark.criterion(9, "determinism and replay")
def test_determinism(criterion, tmp_path):
    files = sorted(SCENARIOS.glob("*.toml"))
    identical = replayed = traces = 0
    for f in files:
        a = run_scenario(f, tmp_path / f.stem / "a")
        b = run_scenario(f, tmp_path / f.stem / "b")
        same = a.artifacts == b.artifacts and all(
            (a.out_dir / rel).read_bytes() == (b.out_dir / rel).read_bytes() for rel in a.artifacts)
        identical += same
        for rel in a.artifacts:
            if rel.endswith(".jsonl"):
                traces += 1
                bus, want = replay_file(a.out_dir / rel)
                replayed += bus.inbox_digests() == want
    criterion.check(identical == len(files), f"{identical}/{len(files)} scenarios byte-identical on re-run")
    criterion.check(traces > 0 and replayed == traces, f"{replayed}/{traces} traces replay to the same inbox digests")
    criterion.verdict()
