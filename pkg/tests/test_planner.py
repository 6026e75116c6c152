import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentsea.agent import Constitution, PlaybackBackend
from agentsea.experiments import PLANNER_MAPS, astar_cost, planner_map, planner_matrix, random_grid
from agentsea.planner import (
    DetectorParams,
    GridMap,
    Infeasible,
    MapFormatError,
    Path,
    PlanFailure,
    TetherCheck,
    agent_plan,
    astar,
    evaluate,
    evaluation_csv,
    load_map,
    parse_ascii,
    parse_pgm,
    perceive_map,
)
from agentsea.sim import tether_feasible
from oracles import dijkstra_cost


def test_ascii_examples():
    assert parse_ascii("...\n...\n...").occupancy.sum() == 0
    g = parse_ascii("...\n.#.\n...")
    assert g.occupancy.sum() == 1 and g.occupancy[1, 1]
    g = parse_ascii("S.O\n..G")
    assert g.start == (0, 0) and g.goal == (1, 2) and g.occupancy[0, 2]


def test_ascii_errors():
    with pytest.raises(MapFormatError):
        parse_ascii("...\n..")
    with pytest.raises(MapFormatError):
        parse_ascii("..x")


def test_pgm_threshold_and_errors():
    g = parse_pgm(b"P2\n# tank\n2 1\n255\n127 128\n")
    assert g.occupancy.tolist() == [[True, False]]
    raw = b"P5 2 1 255\n" + bytes([0, 200])
    assert parse_pgm(raw).occupancy.tolist() == [[True, False]]
    with pytest.raises(MapFormatError):
        parse_pgm(b"P2\n2\n")
    with pytest.raises(MapFormatError):
        parse_pgm(b"P7 1 1 255\n0")


def test_load_map_path_and_text(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("S.\n.G\n")
    assert load_map(p).goal == (1, 1)
    assert load_map(str(p)).start == (0, 0)
    assert load_map("S.\n.G").goal == (1, 1)
    with pytest.raises(FileNotFoundError):
        load_map(str(tmp_path / "missing.txt"))


def test_astar_diagonal():
    g = GridMap(np.zeros((5, 5)))
    assert astar(g, (0, 0), (4, 4)).length == pytest.approx(4 * math.sqrt(2))


def test_astar_wall_infeasible():
    occ = np.zeros((5, 5), dtype=bool)
    occ[:, 2] = True
    with pytest.raises(Infeasible):
        astar(GridMap(occ), (0, 0), (4, 4))


def test_astar_start_inside_inflation():
    occ = np.zeros((5, 5), dtype=bool)
    occ[0, 1] = True
    with pytest.raises(Infeasible):
        astar(GridMap(occ), (0, 0), (4, 4), clearance=1)


def test_astar_path_cells_are_adjacent_and_free():
    g = planner_map("m1")
    p = astar(g, g.start, g.goal, 1)
    inflated = g.inflate(1)
    for a, b in zip(p.cells[:-1], p.cells[1:]):
        assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1
        assert inflated.free(b)


def test_astar_matches_dijkstra_on_50_random_maps():
    rng = np.random.default_rng(2024)
    feasible = 0
    for _ in range(50):
        g = random_grid(rng)
        got, oracle = astar_cost(g), dijkstra_cost(g)
        assert (got is None) == (oracle is None)
        if got is not None:
            feasible += 1
            assert got == pytest.approx(oracle, abs=1e-9)
    assert feasible >= 25


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 30), st.floats(0.0, 0.4), st.integers(0, 1))
def test_astar_optimal_property(seed, size, density, clearance):
    g = random_grid(np.random.default_rng(seed), size=size, density=density)
    oracle = dijkstra_cost(g, clearance)
    try:
        got = astar(g, g.start, g.goal, clearance).length
    except Infeasible:
        got = None
    if oracle is None:
        assert got is None
    else:
        assert got == pytest.approx(oracle, abs=1e-9)


def test_tether_check_prunes():
    g = GridMap(np.zeros((1, 30)), resolution=1.0)
    tether = TetherCheck(10.0, ((0.5, 0.5),), auv_depth=2.0)
    with pytest.raises(Infeasible):
        astar(g, (0, 0), (0, 29), tether=tether)
    p = astar(g, (0, 0), (0, 8), tether=tether)
    for x, y in p.waypoints:
        assert tether_feasible((0.5, 0.5, 0.0), (x, y, 2.0), 10.0)


def test_perceive_zero_noise_and_full_miss():
    truth = planner_map("m2")
    assert np.array_equal(perceive_map(truth, DetectorParams(0, 0, 0), 3).occupancy, truth.occupancy)
    assert perceive_map(truth, DetectorParams(1.0, 0.2, 1.0), 3).occupancy.sum() == 0


def test_perceive_deterministic():
    truth = planner_map("m3")
    a = perceive_map(truth, DetectorParams(), 11).occupancy
    assert np.array_equal(a, perceive_map(truth, DetectorParams(), 11).occupancy)


def test_perceive_jitter_displacement():
    occ = np.zeros((41, 41), dtype=bool)
    occ[20, 20] = True
    truth = GridMap(occ)
    disp = []
    for seed in range(100):
        (r, c), = np.argwhere(perceive_map(truth, DetectorParams(1.0, 0.0, 0.0), seed).occupancy)
        disp.append(math.hypot(r - 20, c - 20))
    assert np.mean(disp) <= 1.3


def test_agent_plan_zero_noise_equals_baseline():
    for map_id in PLANNER_MAPS:
        g = planner_map(map_id)
        base = astar(g, g.start, g.goal, 1)
        path = agent_plan(perceive_map(g, DetectorParams(0, 0, 0), 0), g.start, g.goal)
        assert path.length == pytest.approx(base.length, abs=1e-12)
        ev = evaluate(path, g, g.to_world(g.goal), base)
        assert ev.success and ev.error_delta == pytest.approx(0.0, abs=1e-12)


def test_adversarial_perception_collides():
    truth = parse_ascii("S...#...G\n....#....\n.........")
    perceived = GridMap(np.zeros_like(truth.occupancy), 1.0, start=truth.start, goal=truth.goal)
    base = astar(truth, truth.start, truth.goal)
    path = agent_plan(perceived, truth.start, truth.goal, clearance=0)
    ev = evaluate(path, truth, truth.to_world(truth.goal), base)
    assert ev.collided and not ev.success


def test_remote_plan_out_of_workspace_fails():
    g = planner_map("m1")
    reply = json.dumps({"waypoints": [{"x": 500.0, "y": 1.0}]})
    res = agent_plan(g, g.start, g.goal, Constitution("plan", output_schema_id="waypoint_list"),
                     PlaybackBackend([reply]))
    assert isinstance(res, PlanFailure) and "safety parser" in res.reason


def test_remote_plan_snaps_waypoints():
    g = parse_ascii("S....\n.....\n....G")
    reply = json.dumps({"waypoints": [{"x": 2.5, "y": 0.5}, {"x": 4.5, "y": 2.5}]})
    res = agent_plan(g, g.start, g.goal, Constitution("plan", output_schema_id="waypoint_list"),
                     PlaybackBackend([reply]))
    assert isinstance(res, Path) and res.cells[0] == g.start and res.cells[-1] == g.goal


def test_evaluate_failure_and_collision():
    g = planner_map("m1")
    base = astar(g, g.start, g.goal, 1)
    assert not evaluate(PlanFailure("x"), g, g.to_world(g.goal), base).success
    straight = Path([g.start, g.goal], [g.to_world(g.start), g.to_world(g.goal)], 1.0)
    assert not evaluate(straight, g, g.to_world(g.goal), base).success


def test_matrix_rows_and_csv():
    rows = planner_matrix(seeds=range(5))
    assert len(rows) == 25
    text = evaluation_csv(rows)
    assert text.splitlines()[0] == "map_id,trial,backend,success,final_error_m,error_delta_m"
    for m in PLANNER_MAPS:
        pct = 100 * sum(r["success"] for r in rows if r["map_id"] == m) / 5
        assert pct in (0, 20, 40, 60, 80, 100)
