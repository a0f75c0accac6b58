"""Reports derived from a Timeline, plus Chrome-trace export and timeline files."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import SimError
from .events import Event, EventKey, EventKind, Phase
from .ir import ValidatedPlan
from .modeler import TimedInstance, Timeline

US = 1e6


def batch_time(t: Timeline) -> float:
    """Iteration time: latest end over all devices, measured from t = 0."""
    if len(t) == 0:
        raise SimError("empty timeline")
    return t.makespan


@dataclass(frozen=True)
class DeviceActivity:
    busy_time: float
    idle_spans: tuple[tuple[float, float], ...]
    utilization: float
    first_start: float
    last_end: float


@dataclass(frozen=True)
class ActivityReport:
    makespan: float
    devices: dict[int, DeviceActivity]

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "devices": {
                str(r): {
                    "busy_time": a.busy_time,
                    "utilization": a.utilization,
                    "first_start": a.first_start,
                    "last_end": a.last_end,
                    "idle_spans": [list(s) for s in a.idle_spans],
                }
                for r, a in self.devices.items()
            },
        }


def _gaps(insts: list[TimedInstance], until: float) -> list[tuple[float, float]]:
    spans, cursor = [], 0.0
    for inst in insts:
        if inst.start > cursor:
            spans.append((cursor, inst.start))
        cursor = max(cursor, inst.end)
    if until > cursor:
        spans.append((cursor, until))
    return spans


def activity(t: Timeline) -> ActivityReport:
    """Per-device busy/idle decomposition.

    Idle spans cover [0, last_end) of each device; utilization divides by
    the global makespan, so a device that finishes early is charged for it.
    """
    makespan = batch_time(t)
    out = {}
    for rank, insts in t.devices.items():
        busy = sum(i.end - i.start for i in insts)
        last_end = max((i.end for i in insts), default=0.0)
        first_start = min((i.start for i in insts), default=0.0)
        out[rank] = DeviceActivity(
            busy_time=busy,
            idle_spans=tuple(_gaps(insts, last_end)),
            utilization=busy / makespan if makespan > 0 else 1.0,
            first_start=first_start,
            last_end=last_end,
        )
    return ActivityReport(makespan, out)


@dataclass(frozen=True)
class Bubble:
    start: float
    end: float
    kind: str  # warmup | drain | interior

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class BubbleReport:
    makespan: float
    # rank -> bubbles; grouped by stage via ``by_stage``
    devices: dict[int, tuple[Bubble, ...]] = field(default_factory=dict)
    stage_of: dict[int, int] = field(default_factory=dict)

    def by_stage(self) -> dict[int, dict[int, tuple[Bubble, ...]]]:
        grouped: dict[int, dict[int, tuple[Bubble, ...]]] = defaultdict(dict)
        for rank, bubbles in self.devices.items():
            grouped[self.stage_of[rank]][rank] = bubbles
        return dict(sorted(grouped.items()))

    def total(self, rank: int, kind: str | None = None) -> float:
        return sum(b.length for b in self.devices.get(rank, ()) if kind is None or b.kind == kind)

    def fraction(self) -> float:
        """Share of device-time spent in bubbles."""
        if not self.devices:
            return 0.0
        idle = sum(self.total(r) for r in self.devices)
        return idle / (len(self.devices) * self.makespan)

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "stages": {
                str(s): {
                    str(r): [{"start": b.start, "end": b.end, "kind": b.kind} for b in bubbles]
                    for r, bubbles in ranks.items()
                }
                for s, ranks in self.by_stage().items()
            },
        }


def bubble_report(t: Timeline) -> BubbleReport:
    """Attribute every idle span (including the tail up to the makespan).

    warmup: idle ending no later than the device's first backward work;
    drain: remaining idle starting after the device's last forward work;
    interior: everything else.
    """
    if t.plan.pp == 1:
        return BubbleReport(batch_time(t))
    makespan = batch_time(t)
    devices, stage_of = {}, {}
    for rank, insts in t.devices.items():
        stage_of[rank] = t.plan.rank_grid[rank].pp_idx
        first_b = min((i.start for i in insts if i.phase is Phase.BACKWARD), default=makespan)
        last_f = max((i.end for i in insts if i.phase is Phase.FORWARD), default=0.0)
        bubbles = []
        for start, end in _gaps(insts, makespan):
            if end <= first_b:
                kind = "warmup"
            elif start >= last_f:
                kind = "drain"
            else:
                kind = "interior"
            bubbles.append(Bubble(start, end, kind))
        devices[rank] = tuple(bubbles)
    return BubbleReport(makespan, devices, stage_of)


@dataclass(frozen=True)
class StageTiming:
    start: float
    end: float
    per_device: dict[int, tuple[float, float]]


def stage_report(t: Timeline) -> dict[tuple[int, int, Phase], StageTiming]:
    """Start/end of every (stage, micro-batch, phase) execution.

    Only the composed compute/MP all-reduce work counts; P2P sends and the
    gradient all-reduce are excluded.
    """
    spans: dict[tuple, dict[int, list[float]]] = defaultdict(dict)
    for inst in t.instances():
        if inst.micro_batch is None or inst.event.key.kind is EventKind.P2P:
            continue
        ident = (inst.stage, inst.micro_batch, inst.phase)
        cur = spans[ident].get(inst.device)
        if cur is None:
            spans[ident][inst.device] = [inst.start, inst.end]
        else:
            cur[0] = min(cur[0], inst.start)
            cur[1] = max(cur[1], inst.end)
    report = {}
    for ident in sorted(spans, key=lambda k: (k[0], k[1], k[2] is Phase.BACKWARD)):
        per_dev = {r: (v[0], v[1]) for r, v in sorted(spans[ident].items())}
        report[ident] = StageTiming(
            min(v[0] for v in per_dev.values()), max(v[1] for v in per_dev.values()), per_dev
        )
    return report


def stage_report_records(report: dict) -> list[dict]:
    return [
        {
            "stage": s,
            "micro_batch": m,
            "phase": phase.value,
            "start": st.start,
            "end": st.end,
            "devices": {str(r): list(v) for r, v in st.per_device.items()},
        }
        for (s, m, phase), st in report.items()
    ]


# -- Chrome trace ------------------------------------------------------------------

def _trace_sort_key(rec: dict):
    return (rec["ts"], rec["tid"], rec["ts"] + rec["dur"], rec["name"])


def export_trace(t: Timeline) -> list[dict]:
    """Chrome trace events ("ph": "X"), one per timed instance.

    pid is the node, tid the device rank, ts/dur in microseconds. Exact
    start/end seconds ride along in ``args`` so the trace parses back losslessly.
    """
    records = []
    for inst in t.instances():
        args = {
            "micro_batch": inst.micro_batch,
            "stage": inst.stage,
            "phase": inst.phase.value,
            "start_s": inst.start,
            "end_s": inst.end,
        }
        if inst.event.source_layer is not None:
            args["layer"] = inst.event.source_layer
        records.append(
            {
                "name": inst.event.key.canonical(),
                "cat": inst.event.key.kind.value,
                "ph": "X",
                "ts": inst.start * US,
                "dur": (inst.end - inst.start) * US,
                "pid": t.plan.node_of(inst.device),
                "tid": inst.device,
                "args": args,
            }
        )
    records.sort(key=_trace_sort_key)
    return records


def parse_trace(records: Iterable[dict], plan: ValidatedPlan) -> Timeline:
    devices: dict[int, list[TimedInstance]] = {r: [] for r in plan.rank_grid}
    for rec in records:
        if rec.get("ph") != "X":
            continue
        args = rec["args"]
        event = Event(EventKey.parse(rec["name"]), args.get("layer"))
        devices[rec["tid"]].append(
            TimedInstance(
                event, args["start_s"], args["end_s"], rec["tid"],
                args["stage"], args["micro_batch"], Phase(args["phase"]),
            )
        )
    return Timeline(devices, plan)


_TRACE_FIELDS = {"name": str, "ph": str, "ts": (int, float), "dur": (int, float), "pid": int, "tid": int, "args": dict}


def validate_trace(records: list[dict]) -> list[str]:
    """Return a list of problems (empty when the trace is valid)."""
    problems = []
    if not isinstance(records, list):
        return ["trace must be a JSON array"]
    last: dict[tuple, tuple[float, float]] = {}
    for i, rec in enumerate(records):
        bad = [
            name for name, typ in _TRACE_FIELDS.items()
            if not isinstance(rec.get(name), typ) or isinstance(rec.get(name), bool)
        ]
        if bad:
            problems.append(f"record {i}: field {bad[0]!r} missing or mistyped")
            continue
        if rec["ph"] != "X":
            problems.append(f"record {i}: expected complete event 'X', got {rec['ph']!r}")
            continue
        if rec["dur"] < 0:
            problems.append(f"record {i}: negative duration")
        thread = (rec["pid"], rec["tid"])
        prev = last.get(thread)
        if prev is not None:
            prev_ts, prev_end = prev
            if rec["ts"] < prev_ts:
                problems.append(f"record {i}: ts not monotone on thread {thread}")
            # tolerate float rounding from the seconds -> microseconds conversion
            if rec["ts"] < prev_end - 1e-9 * max(1.0, abs(prev_end)):
                problems.append(f"record {i}: overlaps previous event on thread {thread}")
        last[thread] = (rec["ts"], rec["ts"] + rec["dur"])
    return problems


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_trace(t: Timeline, path: str | Path) -> None:
    Path(path).write_text(dumps_json(export_trace(t)))


# -- timeline files ----------------------------------------------------------------

def timeline_records(t: Timeline) -> list[dict]:
    """Ordered by (rank, start, end, key)."""
    out = []
    for rank, insts in t.devices.items():
        for inst in insts:
            rec = {
                "rank": rank,
                "key": inst.event.key.canonical(),
                "start_us": inst.start * US,
                "end_us": inst.end * US,
                "start_s": inst.start,
                "end_s": inst.end,
                "micro_batch": inst.micro_batch,
                "stage": inst.stage,
                "phase": inst.phase.value,
            }
            if inst.event.source_layer is not None:
                rec["layer"] = inst.event.source_layer
            out.append(rec)
    return out


def timeline_from_records(records: Iterable[dict], plan: ValidatedPlan) -> Timeline:
    devices: dict[int, list[TimedInstance]] = {r: [] for r in plan.rank_grid}
    for rec in records:
        start = rec.get("start_s", rec["start_us"] / US)
        end = rec.get("end_s", rec["end_us"] / US)
        event = Event(EventKey.parse(rec["key"]), rec.get("layer"))
        devices[rec["rank"]].append(
            TimedInstance(event, start, end, rec["rank"], rec["stage"], rec["micro_batch"], Phase(rec["phase"]))
        )
    return Timeline(devices, plan)
