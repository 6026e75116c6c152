"""Schemas and topic bindings shared by every agent and experiment."""

from __future__ import annotations

from .bus import Bus, FieldSpec as F, SchemaRegistry, TopicSchema

POINT = (F("x"), F("y"), F("z", required=False), F("speed", lo=0.0, required=False))
TIMED_POINT = (F("t", lo=0.0), F("x"), F("y"), F("z"))
THRUSTER = (F("id", "int", 0, 7), F("pwm_cmd"), F("pwm_obs"))
DETECTION = (F("class", "str"), F("bearing"), F("range", lo=0.0), F("confidence", lo=0.0, hi=1.0))
IO_BINDING = (F("topic", "str"), F("schema_id", "str"))
TASK = (F("verb", "str", enum=("goto", "inspect")), F("goal", "str"), F("avoid_obstacles", "bool"))

SCHEMAS = [
    TopicSchema("waypoint_list", (F("waypoints", "list", items=POINT),)),
    TopicSchema("goal", (F("name", "str", required=False), F("x"), F("y"), F("z", required=False),
                         F("start_x", required=False), F("start_y", required=False))),
    TopicSchema("twist_cmd", (F("vx"), F("vy"), F("vz", required=False), F("yaw_rate", required=False))),
    TopicSchema("vehicle_status", (F("t", lo=0.0), F("armed", "bool"), F("mode", "str"),
                                   F("thrusters", "list", items=THRUSTER))),
    TopicSchema("status_window", (F("samples", "list", items="dict"),)),
    TopicSchema("diagnosis", (F("issue", "str"), F("status", "str"), F("action", "str"),
                              F("labels", "list", items="str"))),
    TopicSchema("safety_event", (F("agent_id", "str"), F("kind", "str", enum=("syntax", "schema", "limit")),
                                 F("detail", "str"))),
    TopicSchema("agent_fault", (F("agent_id", "str"), F("kind", "str"), F("detail", "str"))),
    TopicSchema("stream_fault", (F("kind", "str"), F("detail", "str"))),
    TopicSchema("intent", (F("agent_id", "str"), F("trajectory", "list", items=TIMED_POINT),
                           F("radius", lo=1e-9), F("priority", "str"))),
    TopicSchema("negotiation_event", (F("kind", "str", enum=("conflict", "role", "replan", "resolved", "abort")),
                                      F("agent_id", "str"), F("data", "dict"))),
    TopicSchema("scalar", (F("value"),)),
    TopicSchema("position2d", (F("x"), F("y"))),
    TopicSchema("odom", (F("x"), F("y"), F("z"), F("yaw"))),
    TopicSchema("dvl", (F("vx"), F("vy"), F("vz"))),
    TopicSchema("compass", (F("heading"),)),
    TopicSchema("nav_estimate", (F("x"), F("y"), F("yaw", required=False),
                                 F("vx", required=False), F("vy", required=False))),
    TopicSchema("lateral_observation", (F("lateral_error"), F("sway_cmd", required=False))),
    TopicSchema("detections", (F("detections", "list", items=DETECTION),)),
    TopicSchema("text", (F("text", "str"),)),
    TopicSchema("synthesis_request", (F("kind", "str"), F("inputs", "list", items=IO_BINDING),
                                      F("output", "dict"), F("params", "dict"))),
    TopicSchema("synthesis_report", (F("node_id", "str"),
                                     F("tests_passed", "int", lo=0), F("tests_total", "int", lo=0),
                                     F("deployed", "bool"), F("reason", "str"))),
    TopicSchema("task_graph", (F("tasks", "list", items=TASK), F("retry_budget", "int", lo=0))),
    TopicSchema("task_outcome", (F("task", "int", lo=0), F("verb", "str"), F("goal", "str"),
                                 F("success", "bool"), F("retries", "int", lo=0), F("collided", "bool"),
                                 F("final_error", lo=0.0))),
    TopicSchema("fidelity_injection", (F("target", "str", enum=("vehicle_pose", "current_estimate")),
                                       F("value", "list", items="number"), F("cause"))),
]

STANDARD_TOPICS = {
    "vehicle/status": "vehicle_status",
    "vehicle/cmd": "twist_cmd",
    "vehicle/odom": "odom",
    "vehicle/dvl": "dvl",
    "vehicle/compass": "compass",
    "vehicle/detections": "detections",
    "vehicle/lateral": "lateral_observation",
    "diagnostics/window": "status_window",
    "diagnostics/report": "diagnosis",
    "diagnostics/faults": "stream_fault",
    "safety/events": "safety_event",
    "agent/faults": "agent_fault",
    "planner/goal": "goal",
    "planner/path": "waypoint_list",
    "negotiation/events": "negotiation_event",
    "perception/description": "text",
    "teacher/constitution": "text",
    "synthesis/request": "synthesis_request",
    "synthesis/report": "synthesis_report",
    "sensors/value": "scalar",
    "filters/value": "scalar",
    "odom/a": "position2d",
    "odom/b": "position2d",
    "nav/fused": "nav_estimate",
    "mission/command": "text",
    "mission/tasks": "task_graph",
    "mission/outcome": "task_outcome",
    "twin/injections": "fidelity_injection",
}


def default_registry() -> SchemaRegistry:
    return SchemaRegistry(SCHEMAS)


def standard_bus(seed: int = 0, lockstep: bool = True, extra_topics: dict[str, str] | None = None) -> Bus:
    bus = Bus(default_registry(), seed=seed, lockstep=lockstep)
    for topic, schema_id in {**STANDARD_TOPICS, **(extra_topics or {})}.items():
        bus.register_topic(topic, schema_id)
    return bus
