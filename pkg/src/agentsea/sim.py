"""Deterministic 2.5D underwater world.

Vehicles are integrated with semi-implicit Euler on body-frame velocities.
Thrust comes from an 8-thruster vectored layout: thrusters 0-3 are horizontal
at +/-45 deg (surge, sway, yaw) and 4-7 are vertical (heave, roll, pitch).
Roll and pitch are not integrated; their wrench rows only shape the
allocation. A linear damping term makes cruising cost sustained thrust.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

PWM_MIN = 1100.0
PWM_NEUTRAL = 1500.0
PWM_MAX = 1900.0
PWM_GAIN = 400.0
OUT_OF_RANGE_BIAS = 300.0
N_THRUSTERS = 8
HEALTH_STATES = ("ok", "dead", "out_of_range")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def _vectored_matrix() -> np.ndarray:
    c = math.sqrt(0.5)
    # (x, y) position and in-plane direction of the horizontal thrusters
    horizontal = [
        ((0.15, -0.11), (c, c)),
        ((0.15, 0.11), (c, -c)),
        ((-0.15, -0.11), (c, -c)),
        ((-0.15, 0.11), (c, c)),
    ]
    vertical = [(0.12, -0.22), (0.12, 0.22), (-0.12, -0.22), (-0.12, 0.22)]
    cols = []
    for (px, py), (dx, dy) in horizontal:
        force = np.array([dx, dy, 0.0])
        moment = np.cross([px, py, 0.0], force)
        cols.append(np.concatenate([force, moment]))
    for px, py in vertical:
        force = np.array([0.0, 0.0, 1.0])
        moment = np.cross([px, py, 0.0], force)
        cols.append(np.concatenate([force, moment]))
    return np.array(cols).T


VECTORED_A = _vectored_matrix()


@dataclass(frozen=True)
class AllocationModel:
    """Linear map from thruster effort (8) to body wrench (Fx Fy Fz Mx My Mz)."""

    matrix: np.ndarray = field(default_factory=lambda: VECTORED_A.copy())
    pwm_gain: float = PWM_GAIN

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (6, N_THRUSTERS):
            raise ValueError("allocation matrix must be 6x8")
        if np.linalg.matrix_rank(m) < 6:
            raise ValueError("allocation matrix must have full row rank")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "pinv", np.linalg.pinv(m))

    def efforts(self, wrench: Sequence[float]) -> np.ndarray:
        """Saturated thruster efforts for a desired wrench."""
        return np.clip(self.pinv @ np.asarray(wrench, dtype=float), -1.0, 1.0)

    def pwm(self, wrench: Sequence[float]) -> np.ndarray:
        return PWM_NEUTRAL + self.pwm_gain * self.efforts(wrench)

    def wrench(self, efforts: Sequence[float]) -> np.ndarray:
        return self.matrix @ np.asarray(efforts, dtype=float)


def expected_pwm(wrench: Sequence[float], allocation: AllocationModel | None = None) -> np.ndarray:
    """Healthy-thruster PWM for a commanded wrench; shared by sim and diagnostics."""
    return (allocation or AllocationModel()).pwm(wrench)


@dataclass
class VehicleState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # body frame
    yaw_rate: float = 0.0

    def copy(self) -> "VehicleState":
        return VehicleState(self.position.copy(), self.yaw, self.velocity.copy(), self.yaw_rate)

    def world_velocity(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        vx, vy, vz = self.velocity
        return np.array([c * vx - s * vy, s * vx + c * vy, vz])


@dataclass
class ThrusterBank:
    pwm_cmd: np.ndarray = field(default_factory=lambda: np.full(N_THRUSTERS, PWM_NEUTRAL))
    pwm_obs: np.ndarray = field(default_factory=lambda: np.full(N_THRUSTERS, PWM_NEUTRAL))
    health: list[str] = field(default_factory=lambda: ["ok"] * N_THRUSTERS)

    def effective_efforts(self) -> np.ndarray:
        """Effort actually delivered to the water, derived from observed PWM."""
        return (self.pwm_obs - PWM_NEUTRAL) / PWM_GAIN


@dataclass
class VehicleParams:
    thrust_gain: float = 0.3  # m/s^2 per unit body force
    yaw_gain: float = 1.0  # rad/s^2 per unit yaw moment
    damping: float = 1.0  # 1/s, linear
    yaw_damping: float = 1.0
    kp: tuple = (8.0, 8.0, 8.0, 0.0, 0.0, 6.0)
    kd: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Vehicle:
    id: str
    kind: str = "auv"
    state: VehicleState = field(default_factory=VehicleState)
    thrusters: ThrusterBank = field(default_factory=ThrusterBank)
    params: VehicleParams = field(default_factory=VehicleParams)
    armed: bool = True
    mode: str = "GUIDED"
    collided: bool = False
    odom_drift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    last_sense: float | None = None
    prev_error: np.ndarray | None = None


@dataclass(frozen=True)
class Disc:
    center: tuple
    radius: float
    label: str = "obstacle"
    solid: bool = True

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    def contains(self, x: float, y: float) -> bool:
        return math.hypot(x - self.center[0], y - self.center[1]) <= self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    label: str = "obstacle"
    solid: bool = True

    @property
    def center(self) -> tuple:
        return ((self.lo[0] + self.hi[0]) / 2, (self.lo[1] + self.hi[1]) / 2)

    def contains(self, x: float, y: float) -> bool:
        return self.lo[0] <= x <= self.hi[0] and self.lo[1] <= y <= self.hi[1]


@dataclass
class Pulse:
    """Lateral force pulse; ends after ``duration`` or once ``until_deviation`` is reached."""

    start: float
    accel: tuple  # world-frame acceleration, m/s^2
    duration: float | None = None
    until_deviation: float | None = None
    vehicle: str | None = None
    done: bool = False
    end_time: float | None = None


@dataclass
class Disturbance:
    current: tuple = (0.0, 0.0, 0.0)  # world-frame water velocity, m/s
    pulses: list[Pulse] = field(default_factory=list)


@dataclass
class SensorConfig:
    odom_drift: float = 0.0  # m / sqrt(s)
    sigma_dvl: float = 0.0
    sigma_psi: float = 0.0
    pwm_noise: float = 0.0
    fov: float = math.radians(120.0)
    max_range: float = 10.0
    p_fn: float = 0.0
    p_fp: float = 0.0
    sigma_bearing: float = 0.0
    sigma_range: float = 0.0
    clutter_labels: tuple = ("clutter",)


@dataclass
class VehicleStatus:
    t: float
    armed: bool
    mode: str
    thrusters: list[dict]

    def __post_init__(self):
        if len(self.thrusters) != N_THRUSTERS or [th["id"] for th in self.thrusters] != list(range(N_THRUSTERS)):
            raise ValueError("status must list thrusters 0..7 in order")

    def to_json(self) -> dict:
        return {"t": self.t, "armed": self.armed, "mode": self.mode, "thrusters": [dict(th) for th in self.thrusters]}

    @classmethod
    def from_json(cls, data: dict) -> "VehicleStatus":
        return cls(
            t=float(data["t"]),
            armed=bool(data["armed"]),
            mode=str(data["mode"]),
            thrusters=[{"id": int(th["id"]), "pwm_cmd": float(th["pwm_cmd"]), "pwm_obs": float(th["pwm_obs"])}
                       for th in data["thrusters"]],
        )

    def cmd(self) -> np.ndarray:
        return np.array([th["pwm_cmd"] for th in self.thrusters])

    def obs(self) -> np.ndarray:
        return np.array([th["pwm_obs"] for th in self.thrusters])


@dataclass
class SensorFrame:
    status: VehicleStatus
    odom: tuple  # (x, y, z, yaw)
    dvl: tuple  # body velocity
    compass: float
    detections: list[dict]


def tether_feasible(asv: Sequence[float], auv: Sequence[float], length: float) -> bool:
    """Necessary condition: straight-line ASV-AUV distance within 95% of the cable."""
    if length <= 0:
        raise ValueError("tether length must be positive")
    d = math.dist([float(v) for v in asv[:3]], [float(v) for v in auv[:3]])
    return d <= 0.95 * length


def lateral_error(polyline: np.ndarray, x: float, y: float) -> float:
    """Signed distance from the nearest pipeline segment (positive = left of travel)."""
    pts = np.asarray(polyline, dtype=float)
    best = None
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        denom = float(ab @ ab)
        s = 0.0 if denom == 0 else min(1.0, max(0.0, float((np.array([x, y]) - a) @ ab) / denom))
        foot = a + s * ab
        dist = math.hypot(x - foot[0], y - foot[1])
        cross = ab[0] * (y - a[1]) - ab[1] * (x - a[0])
        signed = dist if cross >= 0 else -dist
        if best is None or dist < abs(best):
            best = signed
    return float(best)


class World:
    def __init__(
        self,
        vehicles: Sequence[Vehicle] = (),
        obstacles: Sequence[Disc | Box] = (),
        pipeline: Sequence[Sequence[float]] | None = None,
        tether_length: float = 10.0,
        disturbance: Disturbance | None = None,
        sensors: SensorConfig | None = None,
        allocation: AllocationModel | None = None,
        occupancy: Any = None,
        seed: int = 0,
    ):
        self.vehicles: dict[str, Vehicle] = {v.id: v for v in vehicles}
        self.obstacles = list(obstacles)
        self.pipeline = None if pipeline is None else np.asarray(pipeline, dtype=float)
        self.tether_length = tether_length
        self.disturbance = disturbance or Disturbance()
        self.sensors = sensors or SensorConfig()
        self.allocation = allocation or AllocationModel()
        self.occupancy = occupancy
        self.clock = 0.0
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def add_vehicle(self, vehicle: Vehicle) -> None:
        self.vehicles[vehicle.id] = vehicle

    def _vehicle(self, vid: str) -> Vehicle:
        try:
            return self.vehicles[vid]
        except KeyError:
            raise KeyError(f"unknown vehicle {vid!r}") from None

    # -- actuation -----------------------------------------------------
    def command(self, vid: str, twist: Sequence[float]) -> ThrusterBank:
        """Track a desired body twist (vx vy vz p q r) through the thrusters."""
        v = self._vehicle(vid)
        p = v.params
        desired = np.asarray(twist, dtype=float)
        actual = np.array([*v.state.velocity, 0.0, 0.0, v.state.yaw_rate])
        err = desired - actual
        derr = np.zeros(6) if v.prev_error is None else err - v.prev_error
        v.prev_error = err
        # damping feed-forward keeps steady cruising on target
        ff = np.zeros(6)
        ff[:3] = p.damping * desired[:3] / p.thrust_gain
        ff[5] = p.yaw_damping * desired[5] / p.yaw_gain
        wrench = np.asarray(p.kp) * err + np.asarray(p.kd) * derr + ff
        if v.kind == "asv":
            wrench[2] = 0.0
        return self.apply_wrench(vid, wrench)

    def apply_wrench(self, vid: str, wrench: Sequence[float]) -> ThrusterBank:
        v = self._vehicle(vid)
        bank = v.thrusters
        bank.pwm_cmd = expected_pwm(wrench, self.allocation)
        obs = bank.pwm_cmd.copy()
        for i, h in enumerate(bank.health):
            if h == "dead":
                obs[i] = PWM_NEUTRAL
            elif h == "out_of_range":
                obs[i] = bank.pwm_cmd[i] + OUT_OF_RANGE_BIAS
        bank.pwm_obs = obs
        return bank

    def inject_fault(self, vid: str, ids: Sequence[int], kind: str = "dead") -> None:
        if kind not in HEALTH_STATES:
            raise ValueError(f"unknown fault kind {kind!r}")
        v = self._vehicle(vid)
        for i in ids:
            if not 0 <= int(i) < N_THRUSTERS:
                raise ValueError(f"bad thruster id {i}")
        for i in ids:
            v.thrusters.health[int(i)] = kind

    def clear_fault(self, vid: str, ids: Sequence[int]) -> None:
        self.inject_fault(vid, ids, "ok")

    # -- integration ---------------------------------------------------
    def collides(self, x: float, y: float) -> bool:
        if self.occupancy is not None and self.occupancy.occupied_at(x, y):
            return True
        return any(o.solid and o.contains(x, y) for o in self.obstacles)

    def lateral_error(self, vid: str) -> float:
        if self.pipeline is None:
            raise ValueError("world has no pipeline")
        pos = self._vehicle(vid).state.position
        return lateral_error(self.pipeline, pos[0], pos[1])

    def _pulse_accel(self, v: Vehicle) -> np.ndarray:
        total = np.zeros(3)
        for pulse in self.disturbance.pulses:
            if pulse.done or self.clock < pulse.start or (pulse.vehicle and pulse.vehicle != v.id):
                continue
            if pulse.duration is not None and self.clock >= pulse.start + pulse.duration:
                pulse.done, pulse.end_time = True, self.clock
                continue
            if pulse.until_deviation is not None and self.pipeline is not None:
                if abs(self.lateral_error(v.id)) >= pulse.until_deviation:
                    pulse.done, pulse.end_time = True, self.clock
                    continue
            total += np.asarray(pulse.accel, dtype=float)
        return total

    def step(self, dt: float) -> "World":
        if not 0 < dt <= 0.5:
            raise ValueError("dt must lie in (0, 0.5]")
        current = np.asarray(self.disturbance.current, dtype=float)
        for v in self.vehicles.values():
            p, s = v.params, v.state
            if v.collided:
                continue
            wrench = self.allocation.wrench(v.thrusters.effective_efforts())
            dist = self._pulse_accel(v)
            c, sn = math.cos(s.yaw), math.sin(s.yaw)
            dist_body = np.array([c * dist[0] + sn * dist[1], -sn * dist[0] + c * dist[1], dist[2]])
            s.yaw_rate += dt * (p.yaw_gain * wrench[5] - p.yaw_damping * s.yaw_rate)
            s.yaw = wrap_angle(s.yaw + dt * s.yaw_rate)
            s.velocity = s.velocity + dt * (p.thrust_gain * wrench[:3] - p.damping * s.velocity + dist_body)
            if v.kind == "asv":
                s.velocity[2] = 0.0
            new_pos = s.position + dt * (s.world_velocity() + current)
            if v.kind == "asv":
                new_pos[2] = 0.0
            elif new_pos[2] < 0.0:
                new_pos[2] = 0.0
                s.velocity[2] = max(0.0, s.velocity[2])
            if self.collides(new_pos[0], new_pos[1]):
                v.collided = True
                s.velocity = np.zeros(3)
                s.yaw_rate = 0.0
                continue
            s.position = new_pos
        self.clock += dt
        return self

    # -- sensing -------------------------------------------------------
    def status(self, vid: str, rng: np.random.Generator | None = None) -> VehicleStatus:
        v = self._vehicle(vid)
        rng = rng or self.rng
        obs = v.thrusters.pwm_obs.copy()
        if self.sensors.pwm_noise > 0:
            obs = obs + rng.normal(0.0, self.sensors.pwm_noise, N_THRUSTERS)
            # a working ESC never reports beyond its own range
            ok = np.array([h != "out_of_range" for h in v.thrusters.health])
            obs[ok] = np.clip(obs[ok], PWM_MIN, PWM_MAX)
        return VehicleStatus(
            t=round(self.clock, 9),
            armed=v.armed,
            mode=v.mode,
            thrusters=[{"id": i, "pwm_cmd": float(v.thrusters.pwm_cmd[i]), "pwm_obs": float(obs[i])}
                       for i in range(N_THRUSTERS)],
        )

    def sense(self, vid: str, rng: np.random.Generator | None = None) -> SensorFrame:
        v = self._vehicle(vid)
        rng = rng or self.rng
        cfg = self.sensors
        s = v.state
        elapsed = 0.0 if v.last_sense is None else self.clock - v.last_sense
        v.last_sense = self.clock
        if cfg.odom_drift > 0 and elapsed > 0:
            v.odom_drift = v.odom_drift + rng.normal(0.0, cfg.odom_drift * math.sqrt(elapsed), 2)
        odom = (s.position[0] + v.odom_drift[0], s.position[1] + v.odom_drift[1], s.position[2], s.yaw)
        dvl = s.velocity.copy()
        if cfg.sigma_dvl > 0:
            dvl = dvl + rng.normal(0.0, cfg.sigma_dvl, 3)
        compass = s.yaw
        if cfg.sigma_psi > 0:
            compass = wrap_angle(compass + rng.normal(0.0, cfg.sigma_psi))
        return SensorFrame(
            status=self.status(vid, rng),
            odom=tuple(float(x) for x in odom),
            dvl=tuple(float(x) for x in dvl),
            compass=float(compass),
            detections=self._detect(v, rng),
        )

    def _detect(self, v: Vehicle, rng: np.random.Generator) -> list[dict]:
        cfg = self.sensors
        s = v.state
        out = []
        for ob in self.obstacles:
            cx, cy = ob.center
            dx, dy = cx - s.position[0], cy - s.position[1]
            rng_m = math.hypot(dx, dy)
            bearing = wrap_angle(math.atan2(dy, dx) - s.yaw)
            if rng_m > cfg.max_range or abs(bearing) > cfg.fov / 2:
                continue
            if cfg.p_fn > 0 and rng.random() < cfg.p_fn:
                continue
            conf = 1.0
            if cfg.sigma_bearing > 0 or cfg.sigma_range > 0:
                bearing = wrap_angle(bearing + rng.normal(0.0, cfg.sigma_bearing))
                rng_m = max(0.0, rng_m + rng.normal(0.0, cfg.sigma_range))
                conf = float(np.clip(rng.normal(0.9, 0.05), 0.0, 1.0))
            out.append({"class": ob.label, "bearing": float(bearing), "range": float(rng_m), "confidence": conf})
        if cfg.p_fp > 0 and rng.random() < cfg.p_fp:
            out.append({
                "class": str(cfg.clutter_labels[int(rng.integers(len(cfg.clutter_labels)))]),
                "bearing": float(rng.uniform(-cfg.fov / 2, cfg.fov / 2)),
                "range": float(rng.uniform(0.5, cfg.max_range)),
                "confidence": float(rng.uniform(0.1, 0.5)),
            })
        return out
