"""Command line entry point: run, replay, diagnose, synth and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bus import BusError
from .codesynth import NodeManager, NodeRequirement
from .diagnostics import Diagnosis, Monitor
from .runner import BACKENDS, ConfigError, read_report, replay_file, run_scenario
from .topics import standard_bus

log = logging.getLogger("agentsea")


def _cmd_run(args) -> int:
    bundle = run_scenario(args.scenario, args.out, seed=args.seed, backend=args.backend, ticks=args.ticks)
    for name, checks in bundle.summary["experiments"].items():
        for c in checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c['check']} {c['detail']}".rstrip())
    print(f"report digest {bundle.digest}")
    print(f"wrote {len(bundle.artifacts)} artifacts to {bundle.out_dir}")
    return bundle.exit_code()


def _cmd_replay(args) -> int:
    bus, expected = replay_file(args.trace)
    got = bus.inbox_digests()
    print(f"replayed {len(bus.trace_entries)} envelopes over {bus.tick_index} ticks")
    for key, value in got.items():
        print(f"{key} {value}")
    if expected is None:
        return 0
    bad = sorted(k for k in set(got) | set(expected) if got.get(k) != expected.get(k))
    if bad:
        print(f"MISMATCH in {len(bad)} inboxes: {', '.join(bad)}")
        return 1
    print("inbox digests match the recording")
    return 0


def _status_samples(path: Path):
    """Status samples from a JSONL log; bus trace files are accepted too."""
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{n}: {exc.msg}") from exc
        if isinstance(rec, dict) and "topic" in rec:
            if rec["topic"] == "vehicle/status":
                yield rec["payload"]
        elif isinstance(rec, dict) and "config_digest" in rec:
            continue
        else:
            yield rec


def _cmd_diagnose(args) -> int:
    mon = Monitor()
    last = None
    faults = 0
    for sample in _status_samples(Path(args.status_log)):
        res = mon.push(sample)
        if res is None:
            continue
        if isinstance(res, Diagnosis):
            if res.labels != last:
                print(f"t={res.t:.2f}")
                print(res.text())
                last = res.labels
        else:
            faults += 1
            print(f"stream fault: {res.kind}: {res.detail}")
    if last is None:
        print("not enough samples for a window")
        return 1
    return 1 if faults else 0


def _cmd_synth(args) -> int:
    try:
        req = NodeRequirement.from_json(json.loads(Path(args.request).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.request}: bad requirement: {exc}") from exc
    bus = standard_bus(0)
    for topic, schema_id in (*req.inputs, req.output):
        if topic not in bus.topics:
            bus.register_topic(topic, schema_id)
    mgr = NodeManager(bus, args.out)
    rep = mgr.handle(req)
    print(json.dumps(rep.to_json(), indent=2, sort_keys=True))
    if rep.path:
        print(f"node definition written to {rep.path}")
    return 0 if rep.deployed else 1


def _cmd_report(args) -> int:
    summary = read_report(args.input)
    print(f"scenario {summary['scenario']}  seed {summary['seed']}  backend {summary['backend']}")
    for name, checks in summary["experiments"].items():
        good = sum(c["passed"] for c in checks)
        print(f"{name}: {good}/{len(checks)} checks")
        for c in checks:
            print(f"  {'PASS' if c['passed'] else 'FAIL'}  {c['check']} {c['detail']}".rstrip())
    for rel, sha in summary["artifacts"].items():
        print(f"  {sha[:16]}  {rel}")
    print("PASSED" if summary["passed"] else "FAILED")
    return 0 if summary["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentsea", description="Multi-agent marine robotics scenario runner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file and write a report bundle")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--backend", choices=BACKENDS)
    r.add_argument("--ticks", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_run)

    rp = sub.add_parser("replay", help="replay a recorded trace and check inbox digests")
    rp.add_argument("--trace", required=True)
    rp.set_defaults(fn=_cmd_replay)

    d = sub.add_parser("diagnose", help="diagnose thruster health from a status log")
    d.add_argument("--status-log", required=True)
    d.set_defaults(fn=_cmd_diagnose)

    s = sub.add_parser("synth", help="synthesize, test and deploy a node from a requirement")
    s.add_argument("--request", required=True)
    s.add_argument("--out", help="directory for the deployed node definition")
    s.set_defaults(fn=_cmd_synth)

    rep = sub.add_parser("report", help="summarize a report bundle")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(fn=_cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, BusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
