"""Hierarchical timeline construction.

Model parallelism maps each layer to a composed event (sharded compute plus
an MP all-reduce), pipeline parallelism places composed events on the
devices of one data-parallel replica following the schedule, and data
parallelism duplicates that replica and appends the gradient all-reduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .cost import CostResolver, CostTable, Policy
from .errors import DeadlockError, InvariantError, SimError
from .events import (
    Event,
    EventKey,
    EventSet,
    Phase,
    compute_event,
    dp_allreduce_event,
    mp_allreduce_event,
    p2p_event,
)
from .ir import ValidatedPlan
from .schedule import Schedule, Stage, validate_schedule

F, B = Phase.FORWARD, Phase.BACKWARD


@dataclass(frozen=True)
class ComposedEvent:
    compute: Event
    collective: Event | None
    group: tuple[int, ...]

    def elapsed(self, cost: Callable[[Event], float]) -> float:
        total = cost(self.compute)
        if self.collective is not None:
            total += cost(self.collective)
        return total


@dataclass(frozen=True)
class LayerEventMap:
    """Composed events per (pp_idx, phase), in execution order.

    ``p2p`` holds the event each MP member sends after finishing a stage in
    a given phase (absent when the stage sends nothing).
    """

    stages: Mapping[tuple[int, Phase], tuple[ComposedEvent, ...]]
    p2p: Mapping[tuple[int, Phase], tuple[Event, ...]]
    dp_idx: int = 0


@dataclass(frozen=True)
class TimedInstance:
    event: Event
    start: float
    end: float
    device: int
    stage: int
    micro_batch: int | None
    phase: Phase

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def key(self) -> EventKey:
        return self.event.key


def _sort_key(inst: TimedInstance):
    return (inst.start, inst.end, inst.event.key.canonical())


@dataclass
class Timeline:
    devices: dict[int, list[TimedInstance]]
    plan: ValidatedPlan

    def __post_init__(self):
        self.devices = {r: sorted(v, key=_sort_key) for r, v in sorted(self.devices.items())}

    def instances(self):
        for rank in self.devices:
            yield from self.devices[rank]

    def __len__(self) -> int:
        return sum(len(v) for v in self.devices.values())

    @property
    def makespan(self) -> float:
        ends = [i.end for i in self.instances()]
        if not ends:
            raise SimError("empty timeline")
        return max(ends)


# -- model parallelism ---------------------------------------------------------------

def model_mp(plan: ValidatedPlan, events: EventSet, dp_idx: int = 0) -> LayerEventMap:
    stages, p2p = {}, {}
    group = tuple(range(plan.mp))
    for s in range(plan.pp):
        layers = list(plan.stage_partition[s])
        for phase in (F, B):
            order = layers if phase is F else layers[::-1]
            composed = []
            for i in order:
                comp = compute_event(i, phase, plan)
                coll = mp_allreduce_event(i, phase, plan, dp_idx, s) if plan.mp > 1 else None
                for ev in (comp, coll):
                    if ev is not None and ev.key not in events:
                        raise SimError(f"event missing for layer {i} ({phase.value}): {ev.key}")
                composed.append(ComposedEvent(comp, coll, group))
            stages[(s, phase)] = tuple(composed)
            if (phase is F and s < plan.pp - 1) or (phase is B and s > 0):
                sends = tuple(p2p_event(plan, dp_idx, s, j, phase) for j in group)
                for ev in sends:
                    if ev.key not in events:
                        raise SimError(f"p2p event missing for stage {s} ({phase.value}): {ev.key}")
                p2p[(s, phase)] = sends
    return LayerEventMap(stages, p2p, dp_idx)


# -- pipeline parallelism -------------------------------------------------------------

def _resolver(costs, plan: ValidatedPlan, policy) -> Callable[[Event], float]:
    if isinstance(costs, CostTable):
        return CostResolver(costs, plan.cluster, policy)
    return costs


class _Builder:
    """Mutable construction state for one replica."""

    def __init__(self, schedule, layer_map, plan, cost, charge_receiver):
        self.schedule = schedule
        self.map = layer_map
        self.plan = plan
        self.cost = cost
        self.charge_receiver = charge_receiver
        self.d = layer_map.dp_idx
        self.groups = {s: plan.mp_group(self.d, s) for s in range(plan.pp)}
        self.free = {r: 0.0 for g in self.groups.values() for r in g}
        self.pos = {s: 0 for s in range(plan.pp)}
        self.stage_end: dict[tuple[int, int, Phase], float] = {}
        self.arrival: dict[tuple[int, int, Phase], float] = {}
        # (receiver stage, m, phase) -> [(mp_idx, event, send start)]
        self.pending_recv: dict[tuple[int, int, Phase], list] = {}
        self.out: dict[int, list[TimedInstance]] = {r: [] for r in self.free}

    def head(self, s: int) -> Stage | None:
        order = self.schedule.per_device_order[s]
        return order[self.pos[s]] if self.pos[s] < len(order) else None

    def ready_time(self, st: Stage) -> float:
        s, m = st.pp_idx, st.micro_batch
        t = max(self.free[r] for r in self.groups[s])
        if st.phase is F:
            if s > 0:
                t = max(t, self.arrival.get((s, m, F), math.inf))
        else:
            t = max(t, self.stage_end.get((s, m, F), math.inf))
            if s < self.plan.pp - 1:
                t = max(t, self.arrival.get((s, m, B), math.inf))
        return t

    def first_available(self) -> tuple[Stage, float]:
        best = None
        for s in range(self.plan.pp):
            st = self.head(s)
            if st is None:
                continue
            t = self.ready_time(st)
            if math.isinf(t):
                continue
            rank = (t, st.pp_idx, st.micro_batch, st.phase is B)
            if best is None or rank < best[0]:
                best = (rank, st, t)
        if best is None:
            blocked = [st for s in range(self.plan.pp) if (st := self.head(s)) is not None]
            raise DeadlockError(blocked)
        return best[1], best[2]

    def emit(self, rank, event, start, end, st: Stage):
        self.out[rank].append(TimedInstance(event, start, end, rank, st.pp_idx, st.micro_batch, st.phase))

    def place(self, st: Stage, t: float) -> None:
        s, m, phase = st.pp_idx, st.micro_batch, st.phase
        group = self.groups[s]
        if self.charge_receiver:
            for j, ev, sent in self.pending_recv.pop((s, m, phase), ()):
                r = group[j]
                start = max(self.free[r], sent)
                end = start + self.cost(ev)
                self.emit(r, ev, start, end, st)
                self.free[r] = end
            t = max([t] + [self.free[r] for r in group])
        for composed in self.map.stages[(s, phase)]:
            for ev in (composed.compute, composed.collective):
                if ev is None:
                    continue
                end = t + self.cost(ev)
                for r in group:
                    self.emit(r, ev, t, end, st)
                t = end
        for r in group:
            self.free[r] = t
        self.stage_end[(s, m, phase)] = t
        sends = self.map.p2p.get((s, phase))
        if sends:
            peer = s + 1 if phase is F else s - 1
            arrival = t
            for j, ev in enumerate(sends):
                end = t + self.cost(ev)
                self.emit(group[j], ev, t, end, st)
                self.free[group[j]] = end
                arrival = max(arrival, end)
            self.arrival[(peer, m, phase)] = arrival
            if self.charge_receiver:
                self.pending_recv[(peer, m, phase)] = [(j, ev, t) for j, ev in enumerate(sends)]

    def run(self) -> dict[int, list[TimedInstance]]:
        remaining = sum(len(v) for v in self.schedule.per_device_order.values())
        while remaining:
            st, t = self.first_available()
            self.place(st, t)
            self.pos[st.pp_idx] += 1
            remaining -= 1
        return self.out


def build_pipeline(
    schedule: Schedule,
    layer_map: LayerEventMap,
    plan: ValidatedPlan,
    costs,
    policy: Policy | str = Policy.STRICT,
    charge_receiver: bool = False,
) -> Timeline:
    """Event-driven construction of one data-parallel replica (mp * pp devices).

    ``costs`` is a CostTable (resolved under ``policy``) or any callable
    mapping an Event to its elapsed seconds.
    """
    report = validate_schedule(schedule)
    if not report:
        raise SimError(f"invalid schedule: {report.constraint} at {report.stage}")
    if schedule.pp != plan.pp or schedule.num_micro_batches != plan.num_micro_batches:
        raise SimError("schedule does not match the plan's pp / micro-batch count")
    builder = _Builder(schedule, layer_map, plan, _resolver(costs, plan, policy), charge_receiver)
    return Timeline(builder.run(), plan)


# -- data parallelism ----------------------------------------------------------------

def replica_signature(plan: ValidatedPlan, dp_idx: int) -> tuple[int, ...]:
    """Node layout of a replica's ranks, relabelled by first appearance.

    Replicas with equal signatures produce identical event keys.
    """
    labels: dict[int, int] = {}
    out = []
    for s in range(plan.pp):
        for r in plan.mp_group(dp_idx, s):
            node = plan.node_of(r)
            out.append(labels.setdefault(node, len(labels)))
    return tuple(out)


def expand_dp(
    replica: Timeline,
    plan: ValidatedPlan,
    costs,
    policy: Policy | str = Policy.STRICT,
    extra_replicas: Mapping[int, Timeline] | None = None,
) -> Timeline:
    """Duplicate replica 0 to all dp replicas and append the gradient all-reduce.

    Replicas whose node layout differs from replica 0 (so their P2P / MP
    localities differ) must be passed pre-built in ``extra_replicas``.
    """
    extra_replicas = dict(extra_replicas or {})
    cost = _resolver(costs, plan, policy)
    width = plan.mp * plan.pp
    expected = set(range(width))
    if set(replica.devices) != expected:
        raise SimError("replica must cover ranks 0 .. mp*pp-1")
    devices: dict[int, list[TimedInstance]] = {}
    for d in range(plan.dp):
        if d in extra_replicas:
            for r, insts in extra_replicas[d].devices.items():
                devices[r] = list(insts)
            continue
        if d and replica_signature(plan, d) != replica_signature(plan, 0):
            raise SimError(f"replica {d} has a different node layout; build it explicitly")
        offset = d * width
        for r, insts in replica.devices.items():
            devices[r + offset] = [
                TimedInstance(i.event, i.start, i.end, r + offset, i.stage, i.micro_batch, i.phase)
                for i in insts
            ]
    if plan.dp > 1:
        for r in sorted(devices):
            slot = plan.rank_grid[r]
            ev = dp_allreduce_event(plan, slot.pp_idx, slot.mp_idx)
            start = max((i.end for i in devices[r]), default=0.0)
            devices[r].append(
                TimedInstance(ev, start, start + cost(ev), r, slot.pp_idx, None, Phase.NONE)
            )
    return Timeline(devices, plan)


# -- checks -------------------------------------------------------------------------

def check_timeline(t: Timeline, cost: Callable[[Event], float] | None = None) -> None:
    """Raise InvariantError unless per-device instances are disjoint and well-formed."""
    for rank, insts in t.devices.items():
        prev_end = 0.0
        for inst in insts:
            if inst.device != rank:
                raise InvariantError(f"instance on device {inst.device} filed under {rank}")
            if inst.start < 0 or inst.end < inst.start:
                raise InvariantError(f"bad interval [{inst.start}, {inst.end}) on {rank}")
            if inst.start < prev_end:
                raise InvariantError(
                    f"overlap on device {rank} at {inst.start} ({inst.event.key})"
                )
            if cost is not None and abs(inst.duration - cost(inst.event)) > 1e-9 * max(1.0, inst.end):
                raise InvariantError(f"duration mismatch for {inst.event.key} on {rank}")
            prev_end = inst.end
    if set(t.devices) != set(t.plan.rank_grid):
        raise InvariantError("timeline does not cover every rank")
