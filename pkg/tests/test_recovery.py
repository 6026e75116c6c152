import json
import math

import pytest

from agentsea.agent import ReasonerQuery
from agentsea.recovery import TRACKER, TrackerMemory, _tracker_rule, pipeline_world, run_trial


def tracker_query(err, context=()):
    inbox = [{"topic": "vehicle/lateral", "payload": {"lateral_error": err, "sway_cmd": 0.0}}]
    return ReasonerQuery(TRACKER.render(), context=tuple(context), user_content=json.dumps(inbox),
                         role="pipeline_tracker")


def test_tracker_rule_proportional_and_capped():
    assert json.loads(_tracker_rule(tracker_query(0.5)))["vy"] == pytest.approx(-0.2)
    assert json.loads(_tracker_rule(tracker_query(-10.0)))["vy"] == pytest.approx(0.6)
    got = json.loads(_tracker_rule(tracker_query(0.0, ["disturbance_rate: 0.05"])))
    assert got["vy"] == pytest.approx(-0.05) and got["vx"] == pytest.approx(0.3)


def test_memory_rate_estimate():
    mem = TrackerMemory()
    for k in range(10):
        mem.observe(0.5 * k, 0.03 * 0.5 * k, 0.0)
    assert mem.disturbance_rate() == pytest.approx(0.03)
    assert len(mem.store) == 10


def test_memory_rate_needs_full_window():
    mem = TrackerMemory()
    mem.observe(0.0, 0.1, 0.0)
    assert mem.disturbance_rate() is None


def test_pipeline_world_seeded():
    a, ra = pipeline_world(1.5, -1, 4)
    b, rb = pipeline_world(1.5, -1, 4)
    assert ra == rb < 0
    assert a.disturbance.pulses[0].start == b.disturbance.pulses[0].start


@pytest.mark.parametrize("direction", [1, -1])
def test_memory_faster_single_case(direction):
    base = run_trial(1.5, direction, 0, False)
    mem = run_trial(1.5, direction, 0, True)
    assert math.isfinite(base.recovery_time) and math.isfinite(mem.recovery_time)
    assert mem.recovery_time < base.recovery_time
    assert base.max_deviation >= 1.5
