"""Pipeline tracking under lateral disturbance, with and without experiential memory.

A tracker agent follows a straight pipeline. A lateral gust pushes the
vehicle off to a set deviation and leaves a weak residual current behind.
The memory-enabled agent keeps a ring window of lateral-error observations,
infers the disturbance rate from its slope and cancels it; the baseline
reacts to the instantaneous error only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .agent import (
    AgentSpec,
    Constitution,
    ReasonerQuery,
    SafetyLimits,
    inbox_payloads,
    instantiate,
    register_rule,
    text_param,
)
from .bus import Bus
from .memory import MemoryRecord, MemoryStore, RingWindow, embed, window_slope
from .sim import Disturbance, Pulse, SensorConfig, Vehicle, World
from .topics import standard_bus

RECOVERY_BAND = 0.1  # m
DT = 0.1
CONTROL_PERIOD = 0.5
DEVIATIONS = (1.0, 1.5, 2.5)

TRACKER = Constitution(
    core_directive="Keep the vehicle centred over the pipeline while surveying along it.",
    domain_knowledge=(
        "cruise_speed: 0.3",
        "sway_gain: 0.4",
        "max_sway: 0.6",
        "The pipeline runs along the x axis; positive lateral error means the vehicle is left of it.",
    ),
    reasoning_guidelines=(
        "Command sway against the lateral error.",
        "When a disturbance rate is supplied in context, cancel it with an equal and opposite sway.",
    ),
    output_schema_id="twist_cmd",
)


def _context_rate(context) -> float | None:
    for item in context:
        if isinstance(item, str) and item.startswith("disturbance_rate:"):
            return float(item.split(":", 1)[1])
    return None


@register_rule("pipeline_tracker")
def _tracker_rule(query: ReasonerQuery) -> str:
    obs = [it["payload"] for it in inbox_payloads(query) if "lateral_error" in it.get("payload", {})]
    if not obs:
        return "NOOP"
    err = obs[-1]["lateral_error"]
    st = query.system_text
    speed = text_param(st, "cruise_speed", 0.3)
    gain = text_param(st, "sway_gain", 0.4)
    cap = text_param(st, "max_sway", 0.6)
    vy = -gain * err
    rate = _context_rate(query.context)
    if rate is not None:
        vy -= rate
    vy = max(-cap, min(cap, vy))
    return json.dumps({"vx": speed, "vy": round(vy, 9), "vz": 0.0, "yaw_rate": 0.0})


@dataclass
class RecoveryTrial:
    deviation: float
    direction: int
    seed: int
    memory: bool
    recovery_time: float
    pulse_end: float
    max_deviation: float


class TrackerMemory:
    """Ring window of (stamp, lateral error) plus the VDB of observations."""

    def __init__(self, capacity: int = 10):
        self.window = RingWindow(capacity)
        self.sway: list[float] = []
        self.store = MemoryStore()

    def observe(self, t: float, err: float, sway_cmd: float) -> None:
        self.window.push(t, err)
        self.sway = (self.sway + [sway_cmd])[-self.window.capacity:]
        text = f"lateral error {err:+.3f} m at t {t:.1f} s sway command {sway_cmd:+.3f}"
        self.store.upsert(MemoryRecord(f"obs-{t:.1f}", embed(text), {"text": text, "t": t, "error": err},
                                       "observation", t))

    def disturbance_rate(self) -> float | None:
        """Error rate not explained by the agent's own sway commands."""
        if not self.window.full():
            return None
        slope = window_slope(self.window)
        # the last command has not acted yet; pair each error with the command before it
        applied = self.sway[:-1]
        return slope - float(np.mean(applied))


def pipeline_world(deviation: float, direction: int, seed: int, residual: float = 0.03,
                   gust: float = 3.0, gust_start: float = 5.0) -> tuple[World, float]:
    auv = Vehicle("auv")
    auv.state.position = np.array([0.0, 0.0, 2.0])
    sign = 1.0 if direction >= 0 else -1.0
    # small seeded variations so trials differ
    rng = np.random.default_rng(seed)
    gust_accel = gust * (1.0 + 0.1 * rng.uniform(-1, 1))
    resid = residual * (1.0 + 0.2 * rng.uniform(-1, 1))
    start = gust_start + float(rng.uniform(0.0, 1.0))
    pulse = Pulse(start=start, accel=(0.0, sign * gust_accel, 0.0), until_deviation=deviation)
    return World(
        vehicles=[auv],
        pipeline=[[-10.0, 0.0], [500.0, 0.0]],
        disturbance=Disturbance(current=(0.0, 0.0, 0.0), pulses=[pulse]),
        sensors=SensorConfig(),
        seed=seed,
    ), sign * resid


def run_trial(deviation: float, direction: int, seed: int, memory: bool, horizon: float = 60.0,
              bus: Bus | None = None) -> RecoveryTrial:
    world, resid = pipeline_world(deviation, direction, seed)
    bus = bus or standard_bus(seed)
    agent = instantiate(
        AgentSpec(f"tracker-{'mem' if memory else 'base'}", "pipeline_tracker", TRACKER,
                  subscriptions=("vehicle/lateral",), publications=("vehicle/cmd",),
                  limits=SafetyLimits(max_speed=1.0, max_depth=50.0)),
        bus,
    )
    cmd_sub = bus.subscribe("vehicle/cmd", "executor")
    mem = TrackerMemory() if memory else None
    pulse = world.disturbance.pulses[0]
    twist = [0.3, 0.0, 0.0, 0.0, 0.0, 0.0]
    steps_per_ctrl = int(round(CONTROL_PERIOD / DT))
    max_dev = 0.0
    recovered_at = math.nan
    n_steps = int(round(horizon / DT))
    for k in range(n_steps):
        if k % steps_per_ctrl == 0:
            t = round(world.clock, 9)
            err = world.lateral_error("auv")
            bus.emit("vehicle/lateral", {"lateral_error": err, "sway_cmd": twist[1]}, "sim")
            bus.tick(CONTROL_PERIOD / 2)
            context = []
            if mem is not None:
                mem.observe(t, err, twist[1])
                rate = mem.disturbance_rate()
                if rate is not None:
                    context.append(f"disturbance_rate: {rate:.6f}")
            agent.step(rag_context=context)
            bus.tick(CONTROL_PERIOD / 2)
            for env in cmd_sub.drain():
                p = env.payload
                twist = [p["vx"], p["vy"], p.get("vz", 0.0), 0.0, 0.0, p.get("yaw_rate", 0.0)]
        world.command("auv", twist)
        if pulse.done:
            # residual current left behind by the gust
            world.disturbance.current = (0.0, resid, 0.0)
        world.step(DT)
        e = abs(world.lateral_error("auv"))
        max_dev = max(max_dev, e)
        if pulse.done and e <= RECOVERY_BAND:
            recovered_at = world.clock
            break
    end = pulse.end_time if pulse.end_time is not None else math.nan
    return RecoveryTrial(deviation, direction, seed, memory, recovered_at - end, end, max_dev)


def run_matrix(deviations=DEVIATIONS, directions=(1, -1), seeds=(0, 1, 2)) -> list[tuple[RecoveryTrial, RecoveryTrial]]:
    pairs = []
    for d in deviations:
        for direction in directions:
            for seed in seeds:
                pairs.append((run_trial(d, direction, seed, False), run_trial(d, direction, seed, True)))
    return pairs
