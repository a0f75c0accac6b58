"""Deduplicated compute/communication events for a validated plan.

Every operator instance of one training iteration maps to an ``EventKey``.
Instances with equal keys are the same event and are costed once; the
``EventSet`` keeps how many instances each key stands for.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .errors import ShardingError, SimError
from .ir import LayerSpec, ValidatedPlan


class EventKind(str, Enum):
    COMPUTE = "Compute"
    P2P = "P2P"
    ALLREDUCE = "AllReduce"


class Phase(str, Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"
    NONE = "None"


class Locality(str, Enum):
    INTRA = "IntraNode"
    INTER = "InterNode"
    MIXED = "Mixed"
    NONE = "None"


P2P_OP = "send_recv"
ALLREDUCE_OP = "allreduce"


@dataclass(frozen=True, order=True)
class EventKey:
    kind: EventKind
    op_name: str
    phase: Phase
    input_shape: tuple[int, ...]
    payload_bytes: int = 0
    group_size: int = 0
    locality: Locality = Locality.NONE

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "locality", Locality(self.locality))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if "|" in self.op_name:
            raise ValueError("op_name may not contain '|'")
        if self.kind is EventKind.COMPUTE:
            if self.payload_bytes or self.group_size or self.locality is not Locality.NONE:
                raise ValueError("compute keys carry no payload, group or locality")
        elif self.kind is EventKind.P2P:
            if self.group_size != 2:
                raise ValueError("P2P keys have group_size 2")
        elif self.group_size < 2:
            raise ValueError("AllReduce keys have group_size >= 2")

    def canonical(self) -> str:
        shape = "x".join(str(d) for d in self.input_shape) or "-"
        return "|".join(
            (
                self.kind.value,
                self.op_name,
                self.phase.value,
                shape,
                str(self.payload_bytes),
                str(self.group_size),
                self.locality.value,
            )
        )

    __str__ = canonical

    @classmethod
    def parse(cls, text: str) -> "EventKey":
        parts = text.split("|")
        if len(parts) != 7:
            raise ValueError(f"malformed event key {text!r}")
        kind, op, phase, shape, payload, group, locality = parts
        dims = () if shape == "-" else tuple(int(d) for d in shape.split("x"))
        return cls(
            EventKind(kind), op, Phase(phase), dims, int(payload), int(group), Locality(locality)
        )


@dataclass(frozen=True)
class Event:
    key: EventKey
    source_layer: int | None = None
    description: str = field(default="", compare=False)
    # flop count of one instance; compute events only, used by the analytical model
    flops: float | None = field(default=None, compare=False)


@dataclass
class EventSet:
    events: dict[EventKey, Event]
    multiplicity: Counter

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events.values())

    def __len__(self) -> int:
        return len(self.events)

    def __contains__(self, key: EventKey) -> bool:
        return key in self.events

    def __getitem__(self, key: EventKey) -> Event:
        return self.events[key]

    @property
    def total_instances(self) -> int:
        return sum(self.multiplicity.values())

    def keys_of(self, kind: EventKind) -> list[EventKey]:
        return [k for k in self.events if k.kind is kind]

    def to_records(self) -> list[dict]:
        return [
            {"key": key.canonical(), "multiplicity": self.multiplicity[key]}
            for key in self.events
        ]


# -- key construction ------------------------------------------------------------

def shard_shape(layer: LayerSpec, mp: int, micro_batch_size: int) -> list[int]:
    """Per-micro-batch input shape of one MP shard: batch dim prepended, last dim split."""
    if mp > 1 and not layer.mp_splittable:
        raise ShardingError(f"layer {layer.name!r} is not MP-splittable (mp={mp})")
    *lead, last = layer.input_shape
    if last % mp:
        raise ShardingError(
            f"layer {layer.name!r}: split dim {last} is not divisible by mp={mp}"
        )
    return [micro_batch_size, *lead, last // mp]


def classify_locality(
    ranks: Iterable[int], plan: ValidatedPlan, collective: bool | None = None
) -> Locality:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("empty rank list")
    nodes = set()
    for r in ranks:
        if r not in plan.rank_grid:
            raise SimError(f"unknown rank {r}")
        nodes.add(plan.rank_grid[r].node_id)
    if len(nodes) == 1:
        return Locality.INTRA
    if collective is None:
        collective = len(ranks) > 2
    return Locality.MIXED if collective else Locality.INTER


def _flops(layer: LayerSpec, phase: Phase, plan: ValidatedPlan) -> float:
    per_sample = layer.fwd_flops if phase is Phase.FORWARD else layer.bwd_flops
    return per_sample * plan.micro_batch_size / plan.mp


def compute_event(layer_idx: int, phase: Phase, plan: ValidatedPlan) -> Event:
    layer = plan.model.layers[layer_idx]
    shape = shard_shape(layer, plan.mp, plan.micro_batch_size)
    key = EventKey(EventKind.COMPUTE, layer.op_kind, phase, tuple(shape))
    return Event(
        key,
        source_layer=layer_idx,
        description=f"{phase.value.lower()} {layer.name}",
        flops=_flops(layer, phase, plan),
    )


def mp_allreduce_event(layer_idx: int, phase: Phase, plan: ValidatedPlan, dp_idx: int, pp_idx: int) -> Event:
    layer = plan.model.layers[layer_idx]
    locality = classify_locality(plan.mp_group(dp_idx, pp_idx), plan, collective=True)
    key = EventKey(
        EventKind.ALLREDUCE,
        ALLREDUCE_OP,
        phase,
        (),
        layer.output_activation_bytes * plan.micro_batch_size,
        plan.mp,
        locality,
    )
    return Event(key, source_layer=layer_idx, description=f"mp all-reduce {layer.name}")


def boundary_bytes(plan: ValidatedPlan, pp_idx: int) -> int:
    """Activation bytes crossing the boundary between stage pp_idx and pp_idx + 1."""
    last = plan.stage_partition[pp_idx][-1]
    return plan.model.layers[last].output_activation_bytes * plan.micro_batch_size


def p2p_event(plan: ValidatedPlan, dp_idx: int, pp_idx: int, mp_idx: int, phase: Phase) -> Event:
    """The P2P event *sent* by stage ``pp_idx`` in ``phase``.

    Forward sends go to pp_idx + 1, backward (activation-gradient) sends to
    pp_idx - 1; both carry the activation of the shared boundary.
    """
    if phase is Phase.FORWARD:
        peer, boundary = pp_idx + 1, pp_idx
    else:
        peer, boundary = pp_idx - 1, pp_idx - 1
    if not 0 <= peer < plan.pp:
        raise SimError(f"stage {pp_idx} sends nothing in {phase.value}")
    src = plan.rank_of(dp_idx, pp_idx, mp_idx)
    dst = plan.rank_of(dp_idx, peer, mp_idx)
    locality = classify_locality([src, dst], plan, collective=False)
    key = EventKey(EventKind.P2P, P2P_OP, phase, (), boundary_bytes(plan, boundary), 2, locality)
    return Event(key, description=f"{phase.value.lower()} p2p stage {pp_idx}->{peer}")


def gradient_bytes(plan: ValidatedPlan, pp_idx: int) -> int:
    total = sum(layer.param_bytes for layer in plan.stage_layers(pp_idx))
    return -(-total // plan.mp)


def dp_allreduce_event(plan: ValidatedPlan, pp_idx: int, mp_idx: int) -> Event:
    locality = classify_locality(plan.dp_group(pp_idx, mp_idx), plan, collective=True)
    key = EventKey(
        EventKind.ALLREDUCE, ALLREDUCE_OP, Phase.NONE, (),
        gradient_bytes(plan, pp_idx), plan.dp, locality,
    )
    return Event(key, description=f"dp gradient all-reduce stage {pp_idx}")


def iter_instances(plan: ValidatedPlan) -> Iterator[Event]:
    """Yield one Event per operator instance of the full iteration (no dedup).

    Communication instances are counted once per participating/sending device.
    """
    M = plan.num_micro_batches
    for d in range(plan.dp):
        for s in range(plan.pp):
            layers = list(plan.stage_partition[s])
            for j in range(plan.mp):
                for phase in (Phase.FORWARD, Phase.BACKWARD):
                    per_mb = []
                    for i in layers:
                        per_mb.append(compute_event(i, phase, plan))
                        if plan.mp > 1:
                            per_mb.append(mp_allreduce_event(i, phase, plan, d, s))
                    sends = (phase is Phase.FORWARD and s < plan.pp - 1) or (
                        phase is Phase.BACKWARD and s > 0
                    )
                    if sends:
                        per_mb.append(p2p_event(plan, d, s, j, phase))
                    for _ in range(M):
                        yield from per_mb
                if plan.dp > 1:
                    yield dp_allreduce_event(plan, s, j)


def generate_events(plan: ValidatedPlan) -> EventSet:
    events: dict[EventKey, Event] = {}
    counts: Counter = Counter()
    for event in iter_instances(plan):
        counts[event.key] += 1
        held = events.get(event.key)
        # keep the lowest source layer so the result is independent of visit order
        if held is None or _layer_rank(event) < _layer_rank(held):
            events[event.key] = event
    ordered = {k: events[k] for k in sorted(events, key=EventKey.canonical)}
    return EventSet(ordered, counts)


def _layer_rank(event: Event) -> int:
    return -1 if event.source_layer is None else event.source_layer
