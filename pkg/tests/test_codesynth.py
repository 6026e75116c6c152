import copy

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from agentsea.agent import PlaybackBackend
from agentsea.bus import Envelope
from agentsea.codesynth import (
    NodeDef,
    NodeDefError,
    NodeManager,
    NodeRequirement,
    SandboxViolation,
    TestCase as Case,
    TestSuite as Suite,
    UnknownKind,
    deploy,
    gen_tests,
    run_suite,
    sandbox_run,
    self_repair_trial,
    state_bytes,
    synthesize,
    validate_def,
)
from agentsea.topics import standard_bus

AVG = NodeRequirement("stateful averaging filter", (("sensors/value", "scalar"),), ("filters/value", "scalar"),
                      {"window": 10})
DUAL = NodeRequirement("kalman filter fuse two odometry", (("odom/a", "position2d"), ("odom/b", "position2d")),
                       ("nav/fused", "position2d"), {"sigma_a": 0.1, "sigma_b": 0.3})
DVL = NodeRequirement("kalman filter dvl compass", (("vehicle/dvl", "dvl"), ("vehicle/compass", "compass")),
                      ("nav/fused", "nav_estimate"))


def scalar_stream(values, topic="sensors/value", t0=0.1):
    return [Envelope(topic, {"value": float(v)}, "t", stamp=round(t0 * (i + 1), 9)) for i, v in enumerate(values)]


def outputs(res, topic="filters/value"):
    return [e.payload["value"] for e in res.outputs if e.topic == topic]


def test_template_shapes():
    d = synthesize(AVG)
    assert [n["op"] for n in d.nodes] == ["sub", "window", "mean", "pub"]
    k = synthesize(DVL)
    kf = k.node("fuse")["params"]
    assert kf["state"] == ["x", "y", "yaw", "vx", "vy"]
    assert np.asarray(kf["F"]).shape == (5, 5)
    assert synthesize(DUAL).kind == "dual_odometry"


def test_unknown_kind():
    with pytest.raises(UnknownKind):
        synthesize(NodeRequirement("teleport vehicle", (("sensors/value", "scalar"),), ("filters/value", "scalar")))


def test_remote_output_must_validate():
    good = synthesize(AVG).serialize()
    d = synthesize(AVG, PlaybackBackend([good]), node_id="remote_avg")
    assert d.node_id == "remote_avg"
    with pytest.raises(UnknownKind):
        synthesize(AVG, PlaybackBackend(['{"nodes": 3}']))


def test_averaging_values():
    d = synthesize(AVG)
    res = sandbox_run(d, scalar_stream([7.0] * 12))
    assert all(v == pytest.approx(7.0, abs=1e-9) for v in outputs(res)[9:])
    step = outputs(sandbox_run(d, scalar_stream([0.0] * 10 + [1.0] * 10)))[10:]
    assert step[2] == pytest.approx(0.3, abs=1e-12)
    assert step[-1] == pytest.approx(1.0)


def test_generated_suites_pass():
    for req in (AVG, DUAL, DVL):
        d = synthesize(req)
        suite = gen_tests(req, d)
        assert len(suite.cases) >= 2
        passed, reasons = run_suite(d, suite)
        assert passed == len(suite.cases), reasons


def test_dual_odometry_matches_reference_kf():
    """Oracle: scalar textbook KF per axis (F = H = I), sequential updates a then b."""
    d = synthesize(DUAL)
    kf = d.node("fuse")["params"]
    q = kf["Q"][0][0]
    ra, rb = kf["inputs"][0]["R"][0][0], kf["inputs"][1]["R"][0][0]
    rng = np.random.default_rng(5)
    envs, zs = [], []
    for k in range(30):
        za, zb = rng.normal([1.0, 2.0], 0.1), rng.normal([1.0, 2.0], 0.3)
        stamp = round(0.1 * (k + 1), 9)
        envs += [Envelope("odom/a", {"x": za[0], "y": za[1]}, "t", stamp=stamp),
                 Envelope("odom/b", {"x": zb[0], "y": zb[1]}, "t", stamp=stamp)]
        zs.append((za, zb))
    got = [(e.payload["x"], e.payload["y"]) for e in sandbox_run(d, envs).outputs]
    x, P = np.zeros(2), np.full(2, 10.0)
    want = []
    for k, (za, zb) in enumerate(zs):
        if k:
            P = P + q
        for z, r in ((za, ra), (zb, rb)):
            K = P / (P + r)
            x = x + K * (z - x)
            P = (1 - K) * P
        want.append(tuple(x))
    assert np.allclose(got, want, atol=1e-9)


def test_violation_undeclared_topic():
    d = synthesize(AVG)
    d.node("out")["params"]["topic"] = "vehicle/cmd"
    res = sandbox_run(d, scalar_stream([1.0]))
    assert res.violation is not None and res.violation.kind == "topic"
    assert res.outputs == []


def test_violation_state_bytes():
    d = synthesize(NodeRequirement("averaging", (("sensors/value", "scalar"),), ("filters/value", "scalar"),
                                   {"window": 10 ** 9}))
    assert state_bytes(d) == 8 * 10 ** 9
    res = sandbox_run(d, scalar_stream([1.0]))
    assert res.violation.kind == "state_bytes"


def test_violation_ops():
    res = sandbox_run(synthesize(AVG), scalar_stream([1.0]), caps={"ops": 1})
    assert res.violation.kind == "ops" and res.outputs == []


def test_validate_rejects():
    d = synthesize(AVG)
    bad = copy.deepcopy(d)
    bad.edges.append(("avg", "win"))
    with pytest.raises(NodeDefError):
        validate_def(bad)
    bad = copy.deepcopy(d)
    bad.caps["ops"] = 0
    with pytest.raises(NodeDefError):
        validate_def(bad)
    bad = copy.deepcopy(d)
    bad.nodes[1]["op"] = "exec"
    with pytest.raises(NodeDefError):
        validate_def(bad)
    bad = copy.deepcopy(d)
    bad.edges = [("src", "win"), ("win", "out")]
    bad.nodes = [n for n in bad.nodes if n["id"] != "avg"]
    with pytest.raises(NodeDefError):
        validate_def(bad)
    with pytest.raises(NodeDefError):
        NodeDef.from_json({"nodes": [{"op": "sub"}]})


def test_serialization_deterministic_and_roundtrip():
    a, b = synthesize(DVL), synthesize(DVL)
    assert a.serialize() == b.serialize()
    assert NodeDef.from_json(a.to_json()).serialize() == a.serialize()


def test_deploy_live_within_one_tick(tmp_path):
    bus = standard_bus(0)
    mgr = NodeManager(bus, tmp_path)
    rep = mgr.handle(AVG)
    assert rep.deployed and rep.tests_passed == rep.tests_total
    assert (tmp_path / f"{rep.node_id}.json").exists()
    sub = bus.subscribe("filters/value", "op")
    bus.emit("sensors/value", {"value": 4.0}, "sensor")
    bus.tick(0.1)
    bus.tick(0.1)
    got = sub.drain()
    assert [e.payload["value"] for e in got] == [4.0]
    mgr.undeploy(rep.node_id)
    bus.emit("sensors/value", {"value": 5.0}, "sensor")
    bus.tick(0.1)
    bus.tick(0.1)
    assert sub.drain() == []


def test_failing_suite_rejected():
    bus = standard_bus(0)
    d = synthesize(AVG)
    d.node("win")["params"]["n"] = 3  # suite below still expects a 10-window
    suite = gen_tests(AVG, synthesize(AVG))
    rep, mgr = deploy(d, suite, bus)
    assert not rep.deployed and rep.reason and not mgr.nodes


def test_deploy_unknown_topic_rejected():
    req = NodeRequirement("averaging", (("nowhere/x", "scalar"),), ("filters/value", "scalar"))
    rep = NodeManager(standard_bus(0)).handle(req)
    assert not rep.deployed and "unknown topic" in rep.reason


def test_suite_requires_two_cases():
    with pytest.raises(ValueError):
        Suite([Case("one", [], lambda r: (True, ""))])


def test_self_repair_single_seed():
    trial = self_repair_trial(0)
    assert trial.deployed and trial.ratio <= 0.5


TOPICS = ["sensors/value", "filters/value", "vehicle/cmd", "odom/a", "nav/fused"]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(["gain", "offset", "mean", "window"]), min_size=0, max_size=4),
       st.sampled_from(TOPICS), st.sampled_from(TOPICS), st.lists(st.sampled_from(TOPICS), max_size=3),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_sandbox_containment(chain, sub_topic, pub_topic, allowed, values):
    nodes = [{"id": "s", "op": "sub", "params": {"topic": sub_topic, "fields": ["value"]}}]
    edges = []
    prev = "s"
    for i, op in enumerate(chain):
        params = {"gain": {"k": 2.0}, "offset": {"b": 1.0}, "mean": {}, "window": {"n": 3}}[op]
        nodes.append({"id": f"n{i}", "op": op, "params": params})
        edges.append((prev, f"n{i}"))
        prev = f"n{i}"
    nodes.append({"id": "p", "op": "pub", "params": {"topic": pub_topic}})
    edges.append((prev, "p"))
    d = NodeDef("fuzz", nodes, edges, {"sub": allowed, "pub": allowed})
    try:
        validate_def(d)
    except NodeDefError:
        assume(False)
    res = sandbox_run(d, scalar_stream(values, topic=sub_topic))
    for env in res.outputs:
        assert env.topic in allowed
    if sub_topic not in allowed or pub_topic not in allowed:
        assert res.outputs == [] and isinstance(res.violation, SandboxViolation)
