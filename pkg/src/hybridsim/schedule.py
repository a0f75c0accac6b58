"""Per-stage execution orders for synchronous pipeline schedules."""

from __future__ import annotations

from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter

from .errors import ScheduleError
from .events import Phase
from .ir import PipelineAlgorithm

F, B = Phase.FORWARD, Phase.BACKWARD


@dataclass(frozen=True, order=True)
class Stage:
    pp_idx: int
    micro_batch: int
    phase: Phase

    def token(self) -> str:
        return f"{self.phase.value[0]}{self.micro_batch}"

    def __str__(self):
        return f"{self.token()}@stage{self.pp_idx}"


@dataclass(frozen=True)
class Schedule:
    per_device_order: dict[int, tuple[Stage, ...]]
    algorithm: PipelineAlgorithm
    pp: int
    num_micro_batches: int

    def dump(self) -> str:
        """One line per stage index: ``F0 F1 B0 B1``."""
        return "".join(
            " ".join(st.token() for st in self.per_device_order[s]) + "\n"
            for s in range(self.pp)
        )

    @classmethod
    def parse_dump(cls, text: str, algorithm=PipelineAlgorithm.GPIPE) -> "Schedule":
        order = {}
        for s, line in enumerate(l for l in text.splitlines() if l.strip()):
            stages = []
            for tok in line.split():
                phase = {"F": F, "B": B}.get(tok[0])
                if phase is None or not tok[1:].isdigit():
                    raise ScheduleError(f"bad schedule token {tok!r}")
                stages.append(Stage(s, int(tok[1:]), phase))
            order[s] = tuple(stages)
        m = max((st.micro_batch for v in order.values() for st in v), default=-1) + 1
        return cls(order, PipelineAlgorithm.parse(algorithm), len(order), m)


def _check_sizes(pp: int, M: int) -> None:
    if pp < 1 or M < 1:
        raise ScheduleError(f"pp and M must be >= 1, got pp={pp}, M={M}")


def gpipe_schedule(pp: int, M: int, reverse_backward: bool = False) -> Schedule:
    _check_sizes(pp, M)
    bwd = range(M - 1, -1, -1) if reverse_backward else range(M)
    order = {
        s: tuple(Stage(s, m, F) for m in range(M)) + tuple(Stage(s, m, B) for m in bwd)
        for s in range(pp)
    }
    return Schedule(order, PipelineAlgorithm.GPIPE, pp, M)


def one_f_one_b_order(s: int, pp: int, M: int) -> tuple[Stage, ...]:
    warmup = min(M, pp - s)
    order = [Stage(s, m, F) for m in range(warmup)]
    next_f, next_b = warmup, 0
    while next_f < M:
        order.append(Stage(s, next_b, B))
        order.append(Stage(s, next_f, F))
        next_b += 1
        next_f += 1
    order.extend(Stage(s, m, B) for m in range(next_b, M))
    return tuple(order)


def dapple_schedule(pp: int, M: int) -> Schedule:
    _check_sizes(pp, M)
    order = {s: one_f_one_b_order(s, pp, M) for s in range(pp)}
    return Schedule(order, PipelineAlgorithm.DAPPLE, pp, M)


def sequential_schedule(M: int) -> Schedule:
    _check_sizes(1, M)
    return Schedule({0: one_f_one_b_order(0, 1, M)}, PipelineAlgorithm.SEQUENTIAL, 1, M)


def make_schedule(algorithm, pp: int, M: int, reverse_backward: bool = False) -> Schedule:
    algorithm = PipelineAlgorithm.parse(algorithm)
    if algorithm is PipelineAlgorithm.GPIPE:
        return gpipe_schedule(pp, M, reverse_backward)
    if algorithm is PipelineAlgorithm.DAPPLE:
        return dapple_schedule(pp, M)
    if pp != 1:
        raise ScheduleError("the sequential schedule has exactly one stage")
    return sequential_schedule(M)


@dataclass(frozen=True)
class ScheduleReport:
    ok: bool
    constraint: str = ""
    stage: Stage | None = None
    detail: str = ""

    def __bool__(self):
        return self.ok


def stage_dependencies(st: Stage, pp: int) -> list[Stage]:
    """Cross-stage producers of ``st`` (device order edges excluded)."""
    if st.phase is F:
        return [Stage(st.pp_idx - 1, st.micro_batch, F)] if st.pp_idx > 0 else []
    deps = [Stage(st.pp_idx, st.micro_batch, F)]
    if st.pp_idx < pp - 1:
        deps.append(Stage(st.pp_idx + 1, st.micro_batch, B))
    return deps


def validate_schedule(s: Schedule) -> ScheduleReport:
    M = s.num_micro_batches
    if sorted(s.per_device_order) != list(range(s.pp)):
        return ScheduleReport(False, "device-set", None, f"expected stages 0..{s.pp - 1}")
    for d in range(s.pp):
        seen = set()
        for st in s.per_device_order[d]:
            if st.pp_idx != d or not 0 <= st.micro_batch < M:
                return ScheduleReport(False, "index-range", st)
            ident = (st.micro_batch, st.phase)
            if ident in seen:
                return ScheduleReport(False, "duplicate", st)
            if st.phase is B and (st.micro_batch, F) not in seen:
                return ScheduleReport(False, "forward-before-backward", st)
            seen.add(ident)
        if len(seen) != 2 * M:
            missing = sorted({(m, p) for m in range(M) for p in (F, B)} - seen)
            m, p = missing[0]
            return ScheduleReport(False, "completeness", Stage(d, m, p))
    graph: dict[Stage, set[Stage]] = {}
    for d in range(s.pp):
        prev = None
        for st in s.per_device_order[d]:
            preds = set(stage_dependencies(st, s.pp))
            if prev is not None:
                preds.add(prev)
            graph[st] = preds
            prev = st
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        cycle = exc.args[1]
        return ScheduleReport(False, "acyclic", cycle[0], " -> ".join(map(str, cycle)))
    return ScheduleReport(True)
