"""Thruster health diagnosis over sliding windows of vehicle status samples."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .agent import ReasonerQuery, inbox_payloads, register_rule
from .sim import (
    N_THRUSTERS,
    PWM_MAX,
    PWM_MIN,
    PWM_NEUTRAL,
    AllocationModel,
    VehicleStatus,
    expected_pwm,
)

WINDOW = 10
LABELS = ("ok", "dead", "out_of_range")
ACTIONS = {
    "dead": "reduce DOF demands; replan with degraded allocation",
    "out_of_range": "clamp commands; inspect thruster",
    "none": "continue mission",
}

__all__ = [
    "WINDOW", "Thresholds", "MalformedWindow", "StreamFault", "Diagnosis",
    "expected_pwm", "check_window", "classify", "diagnose", "parse_report", "Monitor",
]


class MalformedWindow(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    dead_eps: float = 5.0
    activity: float = 50.0
    activity_count: int = 8
    deviation: float = 150.0
    deviation_count: int = 6


@dataclass(frozen=True)
class StreamFault:
    kind: str
    detail: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "detail": self.detail}


@dataclass(frozen=True)
class Diagnosis:
    issue: str
    status: str
    action: str
    labels: tuple[str, ...]
    t: float = 0.0

    def text(self) -> str:
        return "\n".join((self.issue, self.status, self.action))

    def faulty(self) -> bool:
        return any(lbl != "ok" for lbl in self.labels)

    def to_json(self) -> dict:
        return {"issue": self.issue, "status": self.status, "action": self.action, "labels": list(self.labels)}


def _as_status(sample) -> VehicleStatus:
    if isinstance(sample, VehicleStatus):
        return sample
    try:
        return VehicleStatus.from_json(sample)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedWindow(f"bad status sample: {exc}") from None


def check_window(window: Sequence) -> list[VehicleStatus]:
    samples = [_as_status(s) for s in window]
    if len(samples) != WINDOW:
        raise MalformedWindow(f"window needs exactly {WINDOW} samples, got {len(samples)}")
    ts = [s.t for s in samples]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise MalformedWindow("window timestamps must strictly increase")
    for s in samples:
        if not np.all(np.isfinite(s.cmd())) or not np.all(np.isfinite(s.obs())):
            raise MalformedWindow("non-finite pwm value")
    return samples


def classify(window: Sequence, allocation: AllocationModel | None = None,
             thresholds: Thresholds = Thresholds()) -> tuple[str, ...]:
    """Per-thruster label from observed versus commanded PWM.

    ``allocation`` is accepted for symmetry with :func:`expected_pwm`; the
    commanded values in each sample already are its healthy-path output.
    """
    samples = check_window(window)
    cmd = np.stack([s.cmd() for s in samples])
    obs = np.stack([s.obs() for s in samples])
    th = thresholds
    flat = np.all(np.abs(obs - PWM_NEUTRAL) <= th.dead_eps, axis=0)
    active = np.sum(np.abs(cmd - PWM_NEUTRAL) >= th.activity, axis=0) >= th.activity_count
    dead = flat & active
    outside = np.any((obs < PWM_MIN) | (obs > PWM_MAX), axis=0)
    deviating = np.sum(np.abs(obs - cmd) > th.deviation, axis=0) >= th.deviation_count
    oor = (outside | deviating) & ~dead
    return tuple("dead" if dead[i] else "out_of_range" if oor[i] else "ok" for i in range(N_THRUSTERS))


def _report(labels: Sequence[str], t: float = 0.0) -> Diagnosis:
    groups = []
    for kind in ("dead", "out_of_range"):
        ids = [i for i, lbl in enumerate(labels) if lbl == kind]
        if ids:
            noun = "thruster" if len(ids) == 1 else "thrusters"
            groups.append((kind, f"{noun} {','.join(map(str, ids))} {kind}"))
    nominal = sum(lbl == "ok" for lbl in labels)
    if groups:
        issue = "ISSUE: " + "; ".join(g[1] for g in groups)
        action = "ACTION: " + "; ".join(ACTIONS[g[0]] for g in groups)
    else:
        issue, action = "ISSUE: none", "ACTION: " + ACTIONS["none"]
    return Diagnosis(issue, f"STATUS: {nominal}/{N_THRUSTERS} thrusters nominal", action, tuple(labels), t)


def diagnose(window: Sequence, allocation: AllocationModel | None = None,
             thresholds: Thresholds = Thresholds()) -> Diagnosis:
    labels = classify(window, allocation, thresholds)
    return _report(labels, _as_status(window[-1]).t)


_ISSUE_PART = r"thrusters? \d(?:,\d)* (?:dead|out_of_range)"


def parse_report(text: str) -> tuple[list[int], int]:
    """Check the three-line grammar; return (faulty ids, nominal count)."""
    lines = text.split("\n")
    if len(lines) != 3:
        raise ValueError("report must have exactly three lines")
    issue, status, action = lines
    if issue != "ISSUE: none" and not re.fullmatch(rf"ISSUE: {_ISSUE_PART}(?:; {_ISSUE_PART})?", issue):
        raise ValueError(f"bad issue line {issue!r}")
    m = re.fullmatch(r"STATUS: (\d)/8 thrusters nominal", status)
    if not m:
        raise ValueError(f"bad status line {status!r}")
    if not action.startswith("ACTION: "):
        raise ValueError(f"bad action line {action!r}")
    ids = sorted(int(x) for x in re.findall(r"\d", issue))
    if ids and len(ids) + int(m.group(1)) != N_THRUSTERS:
        raise ValueError("issue and status lines disagree")
    return ids, int(m.group(1))


@dataclass
class Monitor:
    """Stateful single-consumer monitor sliding a window by one sample."""

    allocation: AllocationModel | None = None
    thresholds: Thresholds = Thresholds()
    window: deque = field(default_factory=lambda: deque(maxlen=WINDOW))

    def push(self, sample) -> Diagnosis | StreamFault | None:
        try:
            status = _as_status(sample)
        except MalformedWindow as exc:
            return StreamFault("malformed", str(exc))
        if self.window and status.t <= self.window[-1].t:
            return StreamFault("out_of_order", f"sample t={status.t} not after t={self.window[-1].t}")
        self.window.append(status)
        if len(self.window) < WINDOW:
            return None
        return diagnose(list(self.window), self.allocation, self.thresholds)

    def run(self, stream: Iterable) -> list[Diagnosis | StreamFault | None]:
        return [self.push(s) for s in stream]


def monitor(stream: Iterable, allocation: AllocationModel | None = None) -> list[Diagnosis | StreamFault | None]:
    return Monitor(allocation).run(stream)


@register_rule("diagnostics")
def _diagnostics_rule(query: ReasonerQuery) -> str:
    for item in reversed(inbox_payloads(query)):
        payload = item.get("payload")
        if isinstance(payload, dict) and isinstance(payload.get("samples"), list):
            try:
                return json.dumps(diagnose(payload["samples"]).to_json())
            except MalformedWindow:
                return "NOOP"
    return "NOOP"
