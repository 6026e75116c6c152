import math

import numpy as np
import pytest

from agentsea.agent import PlaybackBackend
from agentsea.mission import (
    DOCUMENTED_PROMPTS,
    GOAL_TOLERANCE,
    TANK_GOALS,
    TANK_START,
    FidelityInjection,
    MissionSetup,
    Task,
    TaskGraph,
    TwinCurator,
    Unparseable,
    apply_injection,
    commander_constitution,
    goals_from_text,
    interpret,
    orchestrate,
    run_command,
    tank_map,
    twin_trial,
)
from agentsea.planner import GridMap
from agentsea.sim import SensorFrame, Vehicle, VehicleState, World
from agentsea.topics import standard_bus


def test_interpret_examples():
    g = interpret("Go to goal 1 and check the obstacles on the way", TANK_GOALS)
    assert g.tasks == (Task("goto", "goal 1", True),)
    assert interpret("Inspect goal 2", TANK_GOALS).tasks == (Task("inspect", "goal 2", False),)
    assert g.retry_budget == 3


@pytest.mark.parametrize("prompt,expected", DOCUMENTED_PROMPTS)
def test_documented_prompts(prompt, expected):
    assert interpret(prompt, TANK_GOALS).tasks == expected


@pytest.mark.parametrize("text", ["flurble the wug", "", "   ", "go to the moon", "goal 1"])
def test_unparseable(text):
    with pytest.raises(Unparseable):
        interpret(text, TANK_GOALS)


def test_task_graph_roundtrip():
    g = interpret("Go to goal 2 avoiding the obstacle, then check goal 1", TANK_GOALS)
    assert TaskGraph.from_json(g.to_json()) == g


def test_goal_table_in_constitution():
    text = commander_constitution(TANK_GOALS).render()
    assert goals_from_text(text) == {k: tuple(v) for k, v in TANK_GOALS.items()}


def test_orchestrate_clear_map():
    truth = GridMap(np.zeros_like(tank_map().occupancy), 0.5)
    setup = MissionSetup(truth, TANK_GOALS, TANK_START)
    out = orchestrate(TaskGraph((Task("goto", "goal 1", True),)), standard_bus(0), setup)
    t = out.tasks[0]
    assert out.success and t.retries == 0 and t.final_error <= GOAL_TOLERANCE


def test_adversarial_perception_costs_one_retry():
    truth = tank_map()
    blind = GridMap(np.zeros_like(truth.occupancy), truth.resolution, truth.origin)
    setup = MissionSetup(truth, TANK_GOALS, TANK_START, perceive=lambda task, attempt: blind if attempt == 0 else truth)
    out = orchestrate(TaskGraph((Task("goto", "goal 2", True),)), standard_bus(0), setup)
    t = out.tasks[0]
    assert t.success and t.retries == 1 and t.attempts == ["collision", "ok"]


def test_retry_exhaustion_continues():
    truth = tank_map()
    blocked = GridMap(np.ones_like(truth.occupancy), truth.resolution, truth.origin)
    setup = MissionSetup(truth, TANK_GOALS, TANK_START,
                         perceive=lambda task, attempt: blocked if task == 0 else truth)
    graph = TaskGraph((Task("goto", "goal 1", True), Task("goto", "goal 3", True)), retry_budget=2)
    out = orchestrate(graph, standard_bus(0), setup)
    assert not out.tasks[0].success and len(out.tasks[0].attempts) == 3
    assert out.tasks[1].success and not out.success


def test_literal_direct_path_collides():
    out = run_command("Inspect goal 2")
    t = out.tasks[0]
    assert t.task.avoid_obstacles is False
    assert t.planned_collision and t.collided and not t.success


def test_documented_prompts_end_to_end():
    for prompt, expected in DOCUMENTED_PROMPTS:
        out = run_command(prompt)
        assert out.graph.tasks == expected
        assert all(t.planned for t in out.tasks)


def test_remote_commander_playback():
    reply = '{"tasks": [{"verb": "goto", "goal": "goal 3", "avoid_obstacles": true}], "retry_budget": 3}'
    out = run_command("anything", reasoner=PlaybackBackend([reply]))
    assert out.graph.tasks == (Task("goto", "goal 3", True),) and out.success


def test_commander_unknown_goal_is_unparseable():
    with pytest.raises(Unparseable):
        run_command("flurble the wug")


def frame_at(x, y, z=2.0):
    world = World([Vehicle("auv")])
    return SensorFrame(world.status("auv"), (x, y, z, 0.0), (0.0, 0.0, 0.0), 0.0, [])


def test_curator_identical_states():
    cur = TwinCurator()
    virtual = VehicleState()
    virtual.position = np.array([1.0, 2.0, 2.0])
    for k in range(30):
        assert cur.curate(frame_at(1.0, 2.0), virtual, 0.5 * k) == []


def test_curator_pose_reset_after_teleport():
    cur = TwinCurator()
    twin = World([Vehicle("auv")])
    twin.vehicles["auv"].state.position = np.array([0.0, 0.0, 2.0])
    injs = cur.curate(frame_at(1.0, 0.0), twin.vehicles["auv"].state, 0.0)
    assert [i.target for i in injs] == ["vehicle_pose"] and injs[0].cause == pytest.approx(1.0)
    apply_injection(twin, "auv", injs[0])
    div = math.dist(twin.vehicles["auv"].state.position[:2], (1.0, 0.0))
    assert div < 0.5


def test_curator_detects_constant_current():
    cur = TwinCurator()
    virtual = VehicleState()
    virtual.position = np.array([0.0, 0.0, 2.0])
    got = None
    for k in range(1, 20):
        injs = cur.curate(frame_at(0.05 * 0.5 * k, 0.0), virtual, 0.5 * k)
        if injs:
            got = k, injs[0]
            break
    assert got is not None and got[0] <= 10
    assert got[1].target == "current_estimate"
    assert got[1].value[0] == pytest.approx(0.05, rel=1e-6)


def test_injection_bad_target():
    with pytest.raises(ValueError):
        apply_injection(World([Vehicle("auv")]), "auv", FidelityInjection("mood", (1.0,), 1.0))


def test_twin_injection_reduces_divergence():
    on, off = twin_trial(0, True), twin_trial(0, False)
    assert on.mean_divergence < off.mean_divergence
    assert on.injections and all(inj.cause > 0 for _, inj in on.injections)
    assert max(on.divergences[-20:]) < 0.5
