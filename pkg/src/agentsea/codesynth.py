"""Runtime node synthesis: requirement -> sandboxed dataflow node -> tests -> deploy.

A synthesized node is a :class:`NodeDef`, a small acyclic graph of primitive
operators interpreted by :class:`NodeRuntime`. Nothing generated is ever
executed as host code. Every run is confined to the node's declared topic
permissions and resource caps.
"""

from __future__ import annotations

import copy
import graphlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .agent import BackendFault, ReasonerQuery, TemplateBackend, infer
from .bus import Bus, Envelope, canonical_json
from .sim import SensorConfig, Vehicle, World, wrap_angle
from .topics import standard_bus

OPS = ("sub", "window", "mean", "gain", "offset", "kf", "pub")
DEFAULT_CAPS = {"ops": 1000, "state_bytes": 1 << 20}
FLOAT_BYTES = 8


class NodeDefError(ValueError):
    pass


class UnknownKind(Exception):
    pass


class SandboxViolation(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind  # topic | ops | state_bytes
        self.detail = detail


@dataclass(frozen=True)
class NodeRequirement:
    kind: str
    inputs: tuple  # ((topic, schema_id), ...)
    output: tuple  # (topic, schema_id)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("a requirement needs at least one input")
        object.__setattr__(self, "inputs", tuple(tuple(i) for i in self.inputs))
        object.__setattr__(self, "output", tuple(self.output))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "inputs": [{"topic": t, "schema_id": s} for t, s in self.inputs],
            "output": {"topic": self.output[0], "schema_id": self.output[1]},
            "params": dict(self.params),
        }

    @classmethod
    def from_json(cls, data: dict) -> "NodeRequirement":
        return cls(
            data["kind"],
            tuple((i["topic"], i["schema_id"]) for i in data["inputs"]),
            (data["output"]["topic"], data["output"]["schema_id"]),
            dict(data.get("params", {})),
        )


@dataclass
class NodeDef:
    node_id: str
    nodes: list[dict]  # {"id", "op", "params"}
    edges: list[tuple[str, str]]
    permissions: dict  # {"sub": [...], "pub": [...]}
    caps: dict = field(default_factory=lambda: dict(DEFAULT_CAPS))
    kind: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.node_id,
            "kind": self.kind,
            "nodes": [{"id": n["id"], "op": n["op"], "params": copy.deepcopy(n.get("params", {}))} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "permissions": {"sub": list(self.permissions.get("sub", [])), "pub": list(self.permissions.get("pub", []))},
            "caps": {"ops": self.caps["ops"], "state_bytes": self.caps["state_bytes"]},
        }

    def serialize(self) -> str:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "NodeDef":
        try:
            return cls(
                node_id=str(data.get("id", "node")),
                nodes=[{"id": str(n["id"]), "op": str(n["op"]), "params": copy.deepcopy(dict(n.get("params", {})))}
                       for n in data["nodes"]],
                edges=[(str(a), str(b)) for a, b in data["edges"]],
                permissions={"sub": list(data["permissions"].get("sub", [])),
                             "pub": list(data["permissions"].get("pub", []))},
                caps={"ops": data["caps"]["ops"], "state_bytes": data["caps"]["state_bytes"]},
                kind=str(data.get("kind", "")),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise NodeDefError(f"malformed node definition: {exc}") from None

    def node(self, nid: str) -> dict:
        for n in self.nodes:
            if n["id"] == nid:
                return n
        raise KeyError(nid)

    def parents(self, nid: str) -> list[str]:
        return [a for a, b in self.edges if b == nid]


# -- validation --------------------------------------------------------------


def topo_order(d: NodeDef) -> list[str]:
    ts = graphlib.TopologicalSorter({n["id"]: set() for n in d.nodes})
    for a, b in d.edges:
        ts.add(b, a)
    try:
        return list(ts.static_order())
    except graphlib.CycleError as exc:
        raise NodeDefError(f"graph has a cycle: {exc.args[1]}") from None


def _widths(d: NodeDef, order: list[str]) -> dict[str, int]:
    w: dict[str, int] = {}
    for nid in order:
        n = d.node(nid)
        p = n["params"]
        ups = [w[u] for u in d.parents(nid)]
        if n["op"] == "sub":
            w[nid] = len(p.get("fields", ["value"]))
        elif n["op"] == "kf":
            w[nid] = len(p["state"]) + 1
        else:
            w[nid] = max(ups) if ups else 1
    return w


def state_bytes(d: NodeDef) -> int:
    order = topo_order(d)
    widths = _widths(d, order)
    total = 0
    for nid in order:
        n = d.node(nid)
        if n["op"] == "window":
            up = max((widths[u] for u in d.parents(nid)), default=1)
            total += FLOAT_BYTES * int(n["params"]["n"]) * up
        elif n["op"] == "kf":
            k = len(n["params"]["state"])
            total += FLOAT_BYTES * (k + k * k)
    return total


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_def(d: NodeDef) -> None:
    """Structural checks; topic permissions and caps are enforced by the sandbox."""
    ids = [n["id"] for n in d.nodes]
    if not ids:
        raise NodeDefError("node has no operators")
    if len(set(ids)) != len(ids):
        raise NodeDefError("duplicate operator ids")
    for a, b in d.edges:
        if a not in ids or b not in ids:
            raise NodeDefError(f"edge {a}->{b} references an unknown operator")
    for key in ("ops", "state_bytes"):
        if not isinstance(d.caps.get(key), int) or isinstance(d.caps.get(key), bool) or d.caps[key] <= 0:
            raise NodeDefError(f"cap {key!r} must be a positive integer")
    for n in d.nodes:
        op, p = n["op"], n["params"]
        if op not in OPS:
            raise NodeDefError(f"unknown operator {op!r}")
        ins = d.parents(n["id"])
        if op == "sub":
            if ins or not isinstance(p.get("topic"), str):
                raise NodeDefError(f"sub {n['id']} needs a topic and no inputs")
        elif not ins:
            raise NodeDefError(f"{op} {n['id']} has no inputs")
        if op == "pub" and not isinstance(p.get("topic"), str):
            raise NodeDefError(f"pub {n['id']} needs a topic")
        if op == "window" and not (isinstance(p.get("n"), int) and not isinstance(p.get("n"), bool) and p["n"] >= 1):
            raise NodeDefError("window size must be a positive integer")
        if op == "gain" and not _num(p.get("k")):
            raise NodeDefError("gain needs a finite k")
        if op == "offset" and not _num(p.get("b")):
            raise NodeDefError("offset needs a finite b")
        if op in ("window", "mean", "gain", "offset", "pub") and len(ins) != 1:
            raise NodeDefError(f"{op} {n['id']} takes exactly one input")
        # a window yields a list of samples; only mean reduces it
        if op != "mean" and any(d.node(u)["op"] == "window" for u in ins):
            raise NodeDefError(f"{op} {n['id']} cannot consume a window directly")
        if op == "kf":
            _check_kf(n, ins)
    topo_order(d)


def _check_kf(n: dict, ins: list[str]) -> None:
    p = n["params"]
    try:
        k = len(p["state"])
        shapes = {"x0": (k,), "P0": (k, k), "F": (k, k), "Q": (k, k)}
        for key, shape in shapes.items():
            arr = np.asarray(p[key], dtype=float)
            if arr.shape != shape or not np.all(np.isfinite(arr)):
                raise NodeDefError(f"kf {key} must be finite with shape {shape}")
        if not (_num(p["dt"]) and p["dt"] > 0):
            raise NodeDefError("kf dt must be positive")
        wired = set()
        for m in p["inputs"]:
            if m["from"] not in ins:
                raise NodeDefError(f"kf measurement from {m['from']!r} is not an input edge")
            wired.add(m["from"])
            h = np.asarray(m["H"], dtype=float)
            r = np.asarray(m["R"], dtype=float)
            dim = len(m["fields"])
            if h.shape != (dim, k) or r.shape != (dim, dim):
                raise NodeDefError("kf measurement H/R shapes do not match its fields")
        if wired != set(ins):
            raise NodeDefError("every kf input edge needs measurement wiring")
    except (KeyError, TypeError) as exc:
        raise NodeDefError(f"kf parameters incomplete: {exc}") from None


# -- interpreter -------------------------------------------------------------


class KalmanState:
    def __init__(self, p: dict):
        self.p = p
        self.x = np.asarray(p["x0"], dtype=float).copy()
        self.P = np.asarray(p["P0"], dtype=float).copy()
        self.F = np.asarray(p["F"], dtype=float)
        self.Q = np.asarray(p["Q"], dtype=float)
        self.dt = float(p["dt"])
        self.stamp: float | None = None

    def predict_to(self, stamp: float) -> int:
        if self.stamp is None:
            self.stamp = stamp
            return 0
        steps = max(0, int(round((stamp - self.stamp) / self.dt)))
        for _ in range(steps):
            self.x = self.F @ self.x
            self.P = self.F @ self.P @ self.F.T + self.Q
        self.stamp = stamp
        return steps

    def update(self, wiring: dict, values: dict) -> None:
        z = np.array([values[f] for f in wiring["fields"]], dtype=float)
        rot = wiring.get("rotate_by_state")
        if rot is not None:
            c, s = math.cos(self.x[rot]), math.sin(self.x[rot])
            z[:2] = [c * z[0] - s * z[1], s * z[0] + c * z[1]]
        H = np.asarray(wiring["H"], dtype=float)
        R = np.asarray(wiring["R"], dtype=float)
        y = z - H @ self.x
        for i in wiring.get("angles", []):
            y[i] = wrap_angle(y[i])
        S = H @ self.P @ H.T + R
        K = np.linalg.solve(S, H @ self.P).T
        self.x = self.x + K @ y
        I_KH = np.eye(len(self.x)) - K @ H
        # Joseph form keeps P symmetric positive definite
        self.P = I_KH @ self.P @ I_KH.T + K @ R @ K.T
        for i in self.p.get("angle_states", []):
            self.x[i] = wrap_angle(self.x[i])

    def output(self) -> dict:
        out = {name: float(v) for name, v in zip(self.p["state"], self.x)}
        out["cov_trace"] = float(np.trace(self.P))
        return out


class NodeRuntime:
    """Interprets a NodeDef one tick at a time inside its sandbox."""

    def __init__(self, d: NodeDef, caps: dict | None = None):
        validate_def(d)
        self.d = d
        self.caps = {**d.caps, **(caps or {})}
        self.order = topo_order(d)
        need = state_bytes(d)
        if need > self.caps["state_bytes"]:
            raise SandboxViolation("state_bytes", f"needs {need} bytes, cap {self.caps['state_bytes']}")
        self.windows: dict[str, list] = {}
        self.kfs: dict[str, KalmanState] = {}
        for n in d.nodes:
            if n["op"] == "window":
                self.windows[n["id"]] = []
            elif n["op"] == "kf":
                self.kfs[n["id"]] = KalmanState(n["params"])
        self.probes: dict[str, list[dict]] = {n["id"]: [] for n in d.nodes if n["op"] not in ("sub", "pub")}
        self.violations: list[SandboxViolation] = []

    def subscriptions(self) -> list[str]:
        return sorted({n["params"]["topic"] for n in self.d.nodes if n["op"] == "sub"})

    def _touch(self, topic: str, mode: str) -> None:
        if topic not in self.d.permissions.get(mode, []):
            raise SandboxViolation("topic", f"{mode} on undeclared topic {topic!r}")

    def _fire(self, n: dict, inputs: dict[str, Any], stamp: float, budget: list[int]) -> Any:
        op, p = n["op"], n["params"]
        cost = 1
        if op == "kf":
            cost = len(p["state"]) ** 2 * max(1, len(inputs))
        budget[0] += cost
        if budget[0] > self.caps["ops"]:
            raise SandboxViolation("ops", f"more than {self.caps['ops']} ops in one tick")
        if op == "window":
            (val,) = inputs.values()
            buf = self.windows[n["id"]]
            buf.append(dict(val))
            if len(buf) > p["n"]:
                buf.pop(0)
            return list(buf)
        if op == "mean":
            (val,) = inputs.values()
            rows = val if isinstance(val, list) else [val]
            return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        if op == "gain":
            (val,) = inputs.values()
            return {k: p["k"] * v for k, v in val.items()}
        if op == "offset":
            (val,) = inputs.values()
            return {k: v + p["b"] for k, v in val.items()}
        if op == "kf":
            kf = self.kfs[n["id"]]
            kf.predict_to(stamp)
            for wiring in p["inputs"]:
                for values in inputs.get(wiring["from"], []):
                    kf.update(wiring, values)
            return kf.output()
        raise NodeDefError(f"operator {op!r} cannot fire here")

    def step(self, messages: Sequence[Envelope]) -> list[tuple[str, dict, float]]:
        """Process one tick's messages. Returns (topic, payload, stamp) outputs.

        On a sandbox violation the tick's outputs are dropped and the
        violation is raised; internal state changes of that tick are kept.
        """
        outputs: list[tuple[str, dict, float]] = []
        groups: dict[float, list[Envelope]] = {}
        for env in messages:
            groups.setdefault(float(env.stamp or 0.0), []).append(env)
        budget = [0]
        try:
            for stamp in sorted(groups):
                fired: dict[str, Any] = {}
                for nid in self.order:
                    n = self.d.node(nid)
                    if n["op"] == "sub":
                        topic = n["params"]["topic"]
                        self._touch(topic, "sub")
                        fields = n["params"].get("fields", ["value"])
                        vals = [{f: float(e.payload[f]) for f in fields} for e in groups[stamp] if e.topic == topic]
                        if vals:
                            fired[nid] = vals
                        continue
                    ups = {u: fired[u] for u in self.d.parents(nid) if u in fired}
                    if not ups:
                        continue
                    if n["op"] == "pub":
                        self._touch(n["params"]["topic"], "pub")
                        (u, val), = ups.items()
                        # straight sub->pub forwards every message; otherwise one value
                        vals = val if self.d.node(u)["op"] == "sub" else [val]
                        for v in vals:
                            fields = n["params"].get("fields") or list(v)
                            outputs.append((n["params"]["topic"], {f: v[f] for f in fields}, stamp))
                        continue
                    if n["op"] != "kf":
                        # a sub may deliver several messages in one group; feed them in order
                        (u, val), = ups.items()
                        if self.d.node(u)["op"] == "sub":
                            out = None
                            for v in val:
                                out = self._fire(n, {u: v}, stamp, budget)
                        else:
                            out = self._fire(n, ups, stamp, budget)
                    else:
                        out = self._fire(n, ups, stamp, budget)
                    fired[nid] = out
                    self.probes[nid].append(out if not isinstance(out, list) else {"size": len(out)})
        except SandboxViolation as exc:
            self.violations.append(exc)
            raise
        return outputs


@dataclass
class SandboxResult:
    outputs: list[Envelope]
    probes: dict[str, list[dict]]
    violation: SandboxViolation | None = None


def sandbox_run(d: NodeDef, inputs: Sequence[Envelope], caps: dict | None = None) -> SandboxResult:
    """Run a node over input envelopes, one tick per distinct stamp."""
    try:
        rt = NodeRuntime(d, caps)
    except SandboxViolation as exc:
        return SandboxResult([], {}, exc)
    ticks: dict[float, list[Envelope]] = {}
    for env in inputs:
        ticks.setdefault(float(env.stamp or 0.0), []).append(env)
    outs: list[Envelope] = []
    seq: dict[str, int] = {}
    for stamp in sorted(ticks):
        try:
            produced = rt.step(ticks[stamp])
        except SandboxViolation as exc:
            return SandboxResult(outs, rt.probes, exc)
        for topic, payload, st in produced:
            s = seq.get(topic, 0)
            seq[topic] = s + 1
            outs.append(Envelope(topic, payload, d.node_id, seq=s, stamp=st))
    return SandboxResult(outs, rt.probes)


# -- templates ---------------------------------------------------------------


def _topic_fields(schema_id: str) -> list[str]:
    return {
        "scalar": ["value"],
        "position2d": ["x", "y"],
        "odom": ["x", "y"],
        "dvl": ["vx", "vy"],
        "compass": ["heading"],
        "nav_estimate": ["x", "y", "yaw", "vx", "vy"],
    }.get(schema_id, ["value"])


def _averaging(req: NodeRequirement, node_id: str) -> NodeDef:
    n = int(req.params.get("window", 10))
    (t_in, s_in), (t_out, _) = req.inputs[0], req.output
    fields = _topic_fields(s_in)
    nodes = [
        {"id": "src", "op": "sub", "params": {"topic": t_in, "fields": fields}},
        {"id": "win", "op": "window", "params": {"n": n}},
        {"id": "avg", "op": "mean", "params": {}},
        {"id": "out", "op": "pub", "params": {"topic": t_out, "fields": fields}},
    ]
    edges = [("src", "win"), ("win", "avg"), ("avg", "out")]
    return NodeDef(node_id, nodes, edges, {"sub": [t_in], "pub": [t_out]}, dict(DEFAULT_CAPS), "averaging")


def _diag(vals) -> list[list[float]]:
    return np.diag(np.asarray(vals, dtype=float)).tolist()


def _dual_odometry(req: NodeRequirement, node_id: str) -> NodeDef:
    p = req.params
    dt = float(p.get("dt", 0.1))
    (ta, _), (tb, _) = req.inputs[:2]
    t_out = req.output[0]
    ra, rb = float(p.get("sigma_a", 0.1)), float(p.get("sigma_b", 0.2))
    q = float(p.get("q", 0.01)) * dt
    kf = {
        "state": ["x", "y"],
        "x0": [float(p.get("x0", 0.0)), float(p.get("y0", 0.0))],
        "P0": _diag([10.0, 10.0]),
        "F": _diag([1.0, 1.0]),
        "Q": _diag([q, q]),
        "dt": dt,
        "inputs": [
            {"from": "odom_a", "fields": ["x", "y"], "H": _diag([1.0, 1.0]), "R": _diag([ra ** 2, ra ** 2])},
            {"from": "odom_b", "fields": ["x", "y"], "H": _diag([1.0, 1.0]), "R": _diag([rb ** 2, rb ** 2])},
        ],
    }
    nodes = [
        {"id": "odom_a", "op": "sub", "params": {"topic": ta, "fields": ["x", "y"]}},
        {"id": "odom_b", "op": "sub", "params": {"topic": tb, "fields": ["x", "y"]}},
        {"id": "fuse", "op": "kf", "params": kf},
        {"id": "out", "op": "pub", "params": {"topic": t_out, "fields": ["x", "y"]}},
    ]
    edges = [("odom_a", "fuse"), ("odom_b", "fuse"), ("fuse", "out")]
    return NodeDef(node_id, nodes, edges, {"sub": [ta, tb], "pub": [t_out]}, dict(DEFAULT_CAPS), "dual_odometry")


def _dvl_compass(req: NodeRequirement, node_id: str) -> NodeDef:
    p = req.params
    dt = float(p.get("dt", 0.1))
    topics = dict((s, t) for t, s in req.inputs)
    t_dvl, t_cmp = topics.get("dvl", "vehicle/dvl"), topics.get("compass", "vehicle/compass")
    t_out = req.output[0]
    s_dvl, s_psi = float(p.get("sigma_dvl", 0.02)), float(p.get("sigma_psi", 0.01))
    q_pos, q_psi, q_vel = float(p.get("q_pos", 1e-6)), float(p.get("q_psi", 1e-3)), float(p.get("q_vel", 1e-2))
    F = np.eye(5)
    F[0, 3] = F[1, 4] = dt
    kf = {
        "state": ["x", "y", "yaw", "vx", "vy"],
        "x0": [float(p.get("x0", 0.0)), float(p.get("y0", 0.0)), float(p.get("yaw0", 0.0)), 0.0, 0.0],
        "P0": _diag([1e-4, 1e-4, 1.0, 1.0, 1.0]),
        "F": F.tolist(),
        "Q": _diag([q_pos * dt, q_pos * dt, q_psi * dt, q_vel * dt, q_vel * dt]),
        "dt": dt,
        "angle_states": [2],
        "inputs": [
            {"from": "compass", "fields": ["heading"], "H": [[0.0, 0.0, 1.0, 0.0, 0.0]],
             "R": [[s_psi ** 2]], "angles": [0]},
            {"from": "dvl", "fields": ["vx", "vy"], "H": [[0.0, 0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0]],
             "R": _diag([s_dvl ** 2, s_dvl ** 2]), "rotate_by_state": 2},
        ],
    }
    nodes = [
        {"id": "compass", "op": "sub", "params": {"topic": t_cmp, "fields": ["heading"]}},
        {"id": "dvl", "op": "sub", "params": {"topic": t_dvl, "fields": ["vx", "vy"]}},
        {"id": "fuse", "op": "kf", "params": kf},
        {"id": "out", "op": "pub", "params": {"topic": t_out, "fields": ["x", "y", "yaw", "vx", "vy"]}},
    ]
    edges = [("compass", "fuse"), ("dvl", "fuse"), ("fuse", "out")]
    return NodeDef(node_id, nodes, edges, {"sub": [t_cmp, t_dvl], "pub": [t_out]}, dict(DEFAULT_CAPS),
                   "dvl_compass")


def template_key(kind: str) -> str | None:
    k = kind.lower()
    if "averag" in k:
        return "averaging"
    if ("kalman" in k or "fuse" in k or "fusion" in k) and "dvl" in k and "compass" in k:
        return "dvl_compass"
    if ("kalman" in k or "fuse" in k or "fusion" in k) and "odom" in k:
        return "dual_odometry"
    return None


TEMPLATES: dict[str, Callable[[NodeRequirement, str], NodeDef]] = {
    "averaging": _averaging,
    "dual_odometry": _dual_odometry,
    "dvl_compass": _dvl_compass,
}


def synthesize(req: NodeRequirement, reasoner: Any = None, node_id: str | None = None) -> NodeDef:
    node_id = node_id or req.params.get("node_id") or f"synth_{template_key(req.kind) or 'node'}"
    if reasoner is None or isinstance(reasoner, TemplateBackend):
        key = template_key(req.kind)
        if key is None:
            raise UnknownKind(f"no template for {req.kind!r}")
        d = TEMPLATES[key](req, node_id)
        validate_def(d)
        return d
    query = ReasonerQuery(
        system_text="Emit one NodeDef JSON object implementing the requirement.",
        user_content=json.dumps(req.to_json(), sort_keys=True),
        role="codesynth",
    )
    try:
        d = NodeDef.from_json(json.loads(infer(reasoner, query).content))
        d.node_id = node_id
        validate_def(d)
    except (BackendFault, json.JSONDecodeError, NodeDefError, TypeError) as exc:
        raise UnknownKind(f"no valid node for {req.kind!r}: {exc}") from None
    return d


# -- test generation ---------------------------------------------------------


@dataclass
class TestCase:
    name: str
    inputs: list[Envelope]
    check: Callable[[SandboxResult], tuple[bool, str]]


@dataclass
class TestSuite:
    cases: list[TestCase]

    def __post_init__(self):
        if len(self.cases) < 2:
            raise ValueError("a suite needs at least two cases")


def _env(topic: str, payload: dict, stamp: float) -> Envelope:
    return Envelope(topic, payload, "test", stamp=round(stamp, 9))


def _averaging_suite(d: NodeDef) -> TestSuite:
    src, out = d.node("src")["params"], d.node("out")["params"]
    n = d.node("win")["params"]["n"]
    fields = src["fields"]

    def payload(v):
        return {f: v for f in fields}

    const = [_env(src["topic"], payload(7.0), 0.1 * (i + 1)) for i in range(n + 2)]

    def check_const(res: SandboxResult):
        vals = [e.payload[fields[0]] for e in res.outputs if e.topic == out["topic"]]
        ok = len(vals) == len(const) and all(abs(v - 7.0) <= 1e-9 for v in vals[n - 1:])
        return ok, f"outputs {vals[-3:]}"

    step = [_env(src["topic"], payload(0.0), 0.1 * (i + 1)) for i in range(n)]
    step += [_env(src["topic"], payload(1.0), 0.1 * (n + i + 1)) for i in range(n)]

    def check_step(res: SandboxResult):
        vals = [e.payload[fields[0]] for e in res.outputs if e.topic == out["topic"]][n:]
        ok = len(vals) == n and all(abs(vals[k - 1] - k / n) <= 1e-9 for k in range(1, n + 1))
        return ok, f"post-step outputs {vals}"

    return TestSuite([TestCase("constant input", const, check_const), TestCase("unit step", step, check_step)])


def _kf_suite(d: NodeDef) -> TestSuite:
    kf = d.node("fuse")["params"]
    subs = {n["id"]: n["params"] for n in d.nodes if n["op"] == "sub"}
    dt = kf["dt"]
    names = kf["state"]
    x0 = np.asarray(kf["x0"], dtype=float)

    if d.kind == "dvl_compass":
        psi, speed = 0.3, 0.5
        vel = np.array([speed * math.cos(psi), speed * math.sin(psi)])

        def truth(k):
            pos = x0[:2] + vel * dt * k
            return {"x": pos[0], "y": pos[1], "yaw": psi, "vx": vel[0], "vy": vel[1]}

        def meas(sid, k):
            return {"heading": psi} if subs[sid]["fields"] == ["heading"] else {"vx": speed, "vy": 0.0}
    else:
        target = {"x": 3.0, "y": -2.0}

        def truth(k):
            return target

        def meas(sid, k):
            return dict(target)

    steady = [_env(subs[sid]["topic"], meas(sid, k), dt * (k + 1)) for k in range(50) for sid in sorted(subs)]

    def check_steady(res: SandboxResult):
        est = res.probes["fuse"][-1]
        want = truth(49)
        err = max(abs(est[n] - want[n]) for n in names)
        return err < 0.05, f"max state error {err:.4f}"

    sid = sorted(subs)[-1]
    repeated = [_env(subs[sid]["topic"], meas(sid, 0), dt) for _ in range(10)]

    # identical updates inside one stamp: covariance trace must not grow
    def check_cov_steps(res: SandboxResult):
        rt_traces = res.probes.get("fuse_trace_steps", [])
        ok = bool(rt_traces) and all(b <= a + 1e-12 for a, b in zip(rt_traces, rt_traces[1:]))
        return ok, f"trace sequence {[round(t, 6) for t in rt_traces]}"

    return TestSuite([
        TestCase("noiseless consistent measurements", steady, check_steady),
        TestCase("repeated identical updates", repeated, check_cov_steps),
    ])


def gen_tests(req: NodeRequirement, d: NodeDef) -> TestSuite:
    validate_def(d)
    if d.kind == "averaging":
        return _averaging_suite(d)
    if d.kind in ("dual_odometry", "dvl_compass"):
        return _kf_suite(d)
    raise UnknownKind(f"no test generator for node kind {d.kind!r}")


def _run_case(d: NodeDef, case: TestCase) -> SandboxResult:
    res = sandbox_run(d, case.inputs)
    if case.name == "repeated identical updates" and res.violation is None:
        # trace after each single update, replayed on a fresh filter
        rt = NodeRuntime(d)
        traces = []
        for env in case.inputs:
            rt.step([env])
            for kf in rt.kfs.values():
                traces.append(float(np.trace(kf.P)))
        res.probes["fuse_trace_steps"] = traces
    return res


# -- deployment --------------------------------------------------------------


@dataclass
class DeployReport:
    node_id: str
    generation_time: float
    tests_passed: int
    tests_total: int
    deployed: bool
    reason: str = ""
    path: str = ""

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "generation_time": self.generation_time, "tests_passed": self.tests_passed,
                "tests_total": self.tests_total, "deployed": self.deployed, "reason": self.reason}


def run_suite(d: NodeDef, suite: TestSuite, bus: Bus | None = None) -> tuple[int, list[str]]:
    """Run every case on a fresh shadow bus; returns (passed, failure reasons)."""
    passed, reasons = 0, []
    for case in suite.cases:
        shadow = _shadow(bus) if bus is not None else None
        if shadow is not None:
            for env in case.inputs:
                if env.topic in shadow.topics and not shadow.publish(
                        Envelope(env.topic, env.payload, "shadow-test", stamp=env.stamp)):
                    reasons.append(f"{case.name}: input rejected by schema")
        res = _run_case(d, case)
        if res.violation is not None:
            reasons.append(f"{case.name}: sandbox violation {res.violation}")
            continue
        ok, detail = case.check(res)
        if ok:
            passed += 1
        else:
            reasons.append(f"{case.name}: {detail}")
    return passed, reasons


def _shadow(bus: Bus) -> Bus:
    shadow = Bus(bus.registry, seed=bus.seed)
    for topic, schema in bus.topics.items():
        shadow.register_topic(topic, schema)
    return shadow


class DeployedNode:
    def __init__(self, d: NodeDef, bus: Bus):
        self.d = d
        self.bus = bus
        self.runtime = NodeRuntime(d)
        self.subs = [bus.subscribe(t, d.node_id) for t in self.runtime.subscriptions()]
        self.active = True
        self.outputs = 0

    def __call__(self, bus: Bus) -> None:
        if not self.active:
            return
        msgs = [e for s in self.subs for e in s.drain()]
        if not msgs:
            return
        try:
            produced = self.runtime.step(msgs)
        except SandboxViolation as exc:
            self.active = False
            bus.emit("agent/faults", {"agent_id": self.d.node_id, "kind": f"sandbox_{exc.kind}",
                                      "detail": exc.detail[:500]}, self.d.node_id)
            return
        for topic, payload, stamp in produced:
            bus.publish(Envelope(topic, payload, self.d.node_id, stamp=stamp))
            self.outputs += 1


class NodeManager:
    """Owns synthesized nodes on one live bus."""

    def __init__(self, bus: Bus, out_dir: str | Path | None = None):
        self.bus = bus
        self.out_dir = Path(out_dir) if out_dir else None
        self.nodes: dict[str, DeployedNode] = {}

    def deploy(self, d: NodeDef, suite: TestSuite, generation_time: float = 0.0) -> DeployReport:
        for topic in (*d.permissions.get("sub", []), *d.permissions.get("pub", [])):
            if topic not in self.bus.topics:
                return self._report(DeployReport(d.node_id, generation_time, 0, len(suite.cases), False,
                                                 f"unknown topic {topic!r}"))
        if d.node_id in self.nodes:
            return self._report(DeployReport(d.node_id, generation_time, 0, len(suite.cases), False,
                                             "node id already deployed"))
        passed, reasons = run_suite(d, suite, self.bus)
        if passed != len(suite.cases):
            return self._report(DeployReport(d.node_id, generation_time, passed, len(suite.cases), False,
                                             "; ".join(reasons)[:500]))
        path = ""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            p = self.out_dir / f"{d.node_id}.json"
            p.write_text(d.serialize() + "\n")
            path = str(p)
        node = DeployedNode(d, self.bus)
        self.nodes[d.node_id] = node
        self.bus.add_ticker(node)
        return self._report(DeployReport(d.node_id, generation_time, passed, len(suite.cases), True, "", path))

    def undeploy(self, node_id: str) -> None:
        node = self.nodes.pop(node_id)
        node.active = False
        self.bus.remove_ticker(node)
        for sub in node.subs:
            self.bus.unsubscribe(sub)

    def _report(self, rep: DeployReport) -> DeployReport:
        if "synthesis/report" in self.bus.topics:
            # wall-clock time stays off the bus so traces are reproducible
            payload = {k: v for k, v in rep.to_json().items() if k != "generation_time"}
            self.bus.emit("synthesis/report", payload, "codesynth")
        return rep

    def handle(self, req: NodeRequirement, reasoner: Any = None) -> DeployReport:
        """Synthesize, test and deploy one requirement."""
        t0 = time.perf_counter()
        try:
            d = synthesize(req, reasoner)
            suite = gen_tests(req, d)
        except UnknownKind as exc:
            return self._report(DeployReport(str(req.params.get("node_id", "unknown")),
                                             time.perf_counter() - t0, 0, 0, False, str(exc)))
        gen_time = time.perf_counter() - t0
        return self.deploy(d, suite, gen_time)


def deploy(d: NodeDef, suite: TestSuite, bus: Bus, out_dir: str | Path | None = None) -> tuple[DeployReport, NodeManager]:
    mgr = NodeManager(bus, out_dir)
    return mgr.deploy(d, suite), mgr


# -- navigation self-repair --------------------------------------------------


@dataclass
class SelfRepairTrial:
    seed: int
    kf_error: float
    dead_reckoning_error: float
    deployed: bool

    @property
    def ratio(self) -> float:
        return self.kf_error / self.dead_reckoning_error


INS_SENSORS = SensorConfig(odom_drift=0.05, sigma_dvl=0.02, sigma_psi=0.01)


def _survey_twist(t: float) -> list[float]:
    """Gentle survey pattern: straight legs joined by slow turns."""
    phase = t % 50.0
    yaw_rate = 0.0 if phase < 35.0 else math.pi / 15.0
    return [0.5, 0.0, 0.0, 0.0, 0.0, yaw_rate]


def self_repair_trial(seed: int, duration: float = 200.0, dt: float = 0.1, bus: Bus | None = None) -> SelfRepairTrial:
    world = World([Vehicle("auv")], sensors=INS_SENSORS, seed=seed)
    world.vehicles["auv"].state.position = np.array([0.0, 0.0, 2.0])
    rng = np.random.default_rng(seed)
    bus = bus or standard_bus(seed)
    mgr = NodeManager(bus)
    req = NodeRequirement(
        "kalman filter fuse dvl compass",
        (("vehicle/dvl", "dvl"), ("vehicle/compass", "compass")),
        ("nav/fused", "nav_estimate"),
        {"dt": dt, "sigma_dvl": INS_SENSORS.sigma_dvl, "sigma_psi": INS_SENSORS.sigma_psi, "node_id": "nav_kf"},
    )
    rep = mgr.handle(req)
    fused = bus.subscribe("nav/fused", "navigator")
    odom = None
    n = int(round(duration / dt))
    for _ in range(n):
        world.command("auv", _survey_twist(world.clock))
        world.step(dt)
        frame = world.sense("auv", rng)
        stamp = round(world.clock, 9)
        odom = frame.odom
        bus.publish(Envelope("vehicle/odom", {"x": odom[0], "y": odom[1], "z": odom[2], "yaw": odom[3]}, "sim",
                             stamp=stamp))
        bus.publish(Envelope("vehicle/dvl", {"vx": frame.dvl[0], "vy": frame.dvl[1], "vz": frame.dvl[2]}, "sim",
                             stamp=stamp))
        bus.publish(Envelope("vehicle/compass", {"heading": frame.compass}, "sim", stamp=stamp))
        bus.tick(dt)
    bus.tick(dt)
    bus.tick(dt)
    truth = world.vehicles["auv"].state.position
    est = fused.received[-1].payload if fused.received else {"x": math.nan, "y": math.nan}
    kf_err = math.hypot(est["x"] - truth[0], est["y"] - truth[1])
    dr_err = math.hypot(odom[0] - truth[0], odom[1] - truth[1])
    return SelfRepairTrial(seed, kf_err, dr_err, rep.deployed)
