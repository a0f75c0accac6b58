"""Event cost resolution: measured tables, ring all-reduce extrapolation, analytical fallback."""

from __future__ import annotations

import json
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import SimError, SpecError, UnresolvedEventError
from .events import Event, EventKey, EventKind, Locality
from .ir import ClusterSpec

MAX_DIRECT_GROUP = 8
US = 1e-6


class Provenance(str, Enum):
    MEASURED = "Measured"
    EXTRAPOLATED = "Extrapolated"
    ANALYTICAL = "Analytical"


class Role(str, Enum):
    SENDER = "Sender"
    RECEIVER = "Receiver"
    SINGLE = "Single"


class Policy(str, Enum):
    STRICT = "strict"
    ANALYTICAL = "analytical"


@dataclass(frozen=True)
class CostEntry:
    elapsed: float
    provenance: Provenance = Provenance.MEASURED
    base_group_size: int | None = None

    def __post_init__(self):
        # zero is allowed so that "free communication" scenarios can be expressed
        if not (math.isfinite(self.elapsed) and self.elapsed >= 0):
            raise SpecError(f"elapsed must be finite and >= 0, got {self.elapsed}")
        if self.provenance is Provenance.EXTRAPOLATED and not (
            self.base_group_size and 2 <= self.base_group_size <= MAX_DIRECT_GROUP
        ):
            raise SpecError("extrapolated entries need a base_group_size in [2, 8]")


def _text(key) -> str:
    """Canonical string for a key given as str, EventKey or Event."""
    if isinstance(key, Event):
        key = key.key
    return key.canonical() if isinstance(key, EventKey) else key


class CostTable(Mapping):
    """Immutable mapping of canonical key string -> CostEntry."""

    def __init__(self, entries: Mapping[str, CostEntry | float] | None = None):
        parsed = {}
        for key, entry in (entries or {}).items():
            key = str(_text(key))
            EventKey.parse(key)
            parsed[key] = entry if isinstance(entry, CostEntry) else CostEntry(float(entry))
        self._entries = MappingProxyType(dict(sorted(parsed.items())))

    def __getitem__(self, key) -> CostEntry:
        return self._entries[_text(key)]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return _text(key) in self._entries

    def __eq__(self, other):
        return isinstance(other, CostTable) and dict(self._entries) == dict(other._entries)

    def __repr__(self):
        return f"CostTable({len(self)} entries)"

    def __reduce__(self):
        # mappingproxy does not pickle; needed for process-pool search
        return (CostTable, (dict(self._entries),))

    def elapsed(self, key) -> float:
        return self[key].elapsed

    def merged(self, other: Mapping[str, CostEntry]) -> "CostTable":
        return CostTable({**self._entries, **dict(other)})

    def scaled(self, factor: float) -> "CostTable":
        return CostTable(
            {
                k: CostEntry(e.elapsed * factor, e.provenance, e.base_group_size)
                for k, e in self._entries.items()
            }
        )

    # -- file format: [{key, elapsed_us, provenance, base_group_size?}] ---------
    def to_records(self) -> list[dict]:
        records = []
        for key, entry in self._entries.items():
            rec = {
                "key": key,
                "elapsed_us": int(round(entry.elapsed / US)),
                "provenance": entry.provenance.value,
            }
            if entry.base_group_size is not None:
                rec["base_group_size"] = entry.base_group_size
            records.append(rec)
        return records

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "CostTable":
        entries = {}
        for i, rec in enumerate(records):
            path = f"costs[{i}]"
            unknown = set(rec) - {"key", "elapsed_us", "provenance", "base_group_size"}
            if unknown:
                raise SpecError(f"unknown key {sorted(unknown)[0]!r}", path)
            try:
                key = EventKey.parse(rec["key"]).canonical()
                us = rec["elapsed_us"]
                if isinstance(us, bool) or not isinstance(us, int):
                    raise SpecError("elapsed_us must be an integer", f"{path}.elapsed_us")
                entries[key] = CostEntry(
                    us / 1e6,
                    Provenance(rec.get("provenance", Provenance.MEASURED.value)),
                    rec.get("base_group_size"),
                )
            except KeyError as exc:
                raise SpecError(f"missing required field {exc.args[0]!r}", path) from None
            except ValueError as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(str(exc), path) from None
        return cls(entries)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CostTable":
        try:
            records = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"malformed cost table: {exc}", str(path)) from None
        if not isinstance(records, list):
            raise SpecError("cost table must be a list of records", str(path))
        return cls.from_records(records)


# -- raw measurements ---------------------------------------------------------------

@dataclass(frozen=True)
class RawMeasurement:
    key: EventKey
    samples: tuple[float, ...]
    role: Role = Role.SINGLE

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "role", Role(self.role))
        if not self.samples:
            raise SpecError("samples must be non-empty")
        if any(not s > 0 for s in self.samples):
            raise SpecError("samples must all be > 0")

    def to_record(self) -> dict:
        return {
            "key": self.key.canonical(),
            "role": self.role.value,
            "samples_us": [int(round(s / US)) for s in self.samples],
        }

    @classmethod
    def from_record(cls, rec: Mapping, path: str = "measurement") -> "RawMeasurement":
        unknown = set(rec) - {"key", "role", "samples_us"}
        if unknown:
            raise SpecError(f"unknown key {sorted(unknown)[0]!r}", path)
        try:
            return cls(
                EventKey.parse(rec["key"]),
                tuple(s / 1e6 for s in rec["samples_us"]),
                Role(rec.get("role", Role.SINGLE.value)),
            )
        except KeyError as exc:
            raise SpecError(f"missing required field {exc.args[0]!r}", path) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise SpecError(exc.message, path) from None
            raise SpecError(str(exc), path) from None


def load_measurements(path: str | Path) -> list[RawMeasurement]:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed measurements: {exc}", str(path)) from None
    if not isinstance(records, list):
        raise SpecError("measurement file must be a list of records", str(path))
    return [RawMeasurement.from_record(r, f"measurements[{i}]") for i, r in enumerate(records)]


def dump_measurements(measurements: Sequence[RawMeasurement], path: str | Path) -> None:
    Path(path).write_text(json.dumps([m.to_record() for m in measurements], indent=2) + "\n")


def aggregate(samples: Sequence[float], how: str = "median") -> float:
    if how == "median":
        return statistics.median(samples)
    if how == "mean":
        return statistics.fmean(samples)
    if how == "p95":
        ordered = sorted(samples)
        # nearest-rank percentile
        return ordered[max(0, math.ceil(0.95 * len(ordered)) - 1)]
    raise ValueError(f"unknown aggregate {how!r}")


def ingest_p2p(send: RawMeasurement, recv: RawMeasurement, how: str = "median") -> float:
    """Elapsed time of a P2P transfer: the smaller of the two sides.

    The slower side includes the time spent waiting for its peer to post the
    matching call, so only the faster side reflects the transfer itself.
    """
    if send.key != recv.key:
        raise SpecError(f"key mismatch: {send.key} vs {recv.key}")
    if send.role is not Role.SENDER or recv.role is not Role.RECEIVER:
        raise SpecError(f"role mismatch: expected Sender/Receiver, got {send.role.value}/{recv.role.value}")
    return min(aggregate(send.samples, how), aggregate(recv.samples, how))


def ring_volume_factor(n: int) -> float:
    """Per-device traffic of a ring all-reduce over n devices, in payloads."""
    return 2 * (n - 1) / n


def extrapolate_allreduce(
    measured: float, n0: int, n: int, payload: int | None = None, *, allow_direct: bool = False
) -> float:
    """Scale an all-reduce measured on ``n0`` devices to ``n`` devices.

    Only groups larger than 8 are extrapolated; smaller groups must be
    measured directly. ``allow_direct`` lifts that restriction (tests only).
    ``payload`` is accepted for symmetry with the key and does not enter the ratio.
    """
    if not measured > 0:
        raise ValueError("measured elapsed must be > 0")
    if not 2 <= n0 <= MAX_DIRECT_GROUP:
        raise ValueError(f"base group size must be in [2, {MAX_DIRECT_GROUP}], got {n0}")
    if n <= MAX_DIRECT_GROUP and not allow_direct:
        raise ValueError(f"direct measurement required for n={n} <= {MAX_DIRECT_GROUP}")
    if n < 2:
        raise ValueError("n must be >= 2")
    # exact rational ratio, so n == n0 returns ``measured`` unchanged
    return measured * float(Fraction((n - 1) * n0, n * (n0 - 1)))


def analytical_cost(event: Event | EventKey, cluster: ClusterSpec) -> float:
    key = event.key if isinstance(event, Event) else event
    if key.kind is EventKind.COMPUTE:
        flops = event.flops if isinstance(event, Event) else None
        if flops is None:
            raise SimError(f"missing flops metadata for {key}")
        return flops / (cluster.device_peak_flops * cluster.device_efficiency)
    if key.locality is Locality.INTRA:
        bandwidth, latency = cluster.intra_node_bandwidth, cluster.intra_node_latency
    elif key.locality in (Locality.INTER, Locality.MIXED):
        bandwidth, latency = cluster.inter_node_bandwidth, cluster.inter_node_latency
    else:
        raise SimError(f"missing locality for communication event {key}")
    volume = key.payload_bytes
    if key.kind is EventKind.ALLREDUCE:
        volume = ring_volume_factor(key.group_size) * key.payload_bytes
    return latency + volume / bandwidth


def _find_base(key: EventKey, table: CostTable) -> tuple[EventKey, CostEntry] | None:
    """Best direct all-reduce entry to extrapolate ``key`` from.

    Same op/phase/shape/payload with a group of at most 8; prefer the same
    locality, then the largest group.
    """
    best = None
    for text, entry in table.items():
        if entry.provenance is not Provenance.MEASURED:
            continue
        cand = EventKey.parse(text)
        if (
            cand.kind is EventKind.ALLREDUCE
            and 2 <= cand.group_size <= MAX_DIRECT_GROUP
            and (cand.op_name, cand.phase, cand.input_shape, cand.payload_bytes)
            == (key.op_name, key.phase, key.input_shape, key.payload_bytes)
        ):
            rank = (cand.locality == key.locality, cand.group_size, cand.locality.value)
            if best is None or rank > best[0]:
                best = (rank, cand, entry)
    return None if best is None else (best[1], best[2])


def resolve_entry(
    event: Event | EventKey,
    table: CostTable,
    cluster: ClusterSpec | None = None,
    policy: Policy | str = Policy.STRICT,
) -> CostEntry:
    policy = Policy(policy)
    key = event.key if isinstance(event, Event) else event
    text = key.canonical()
    if text in table:
        return table[text]
    if key.kind is EventKind.ALLREDUCE and key.group_size > MAX_DIRECT_GROUP:
        base = _find_base(key, table)
        if base is not None:
            base_key, base_entry = base
            if base_entry.elapsed > 0:
                elapsed = extrapolate_allreduce(
                    base_entry.elapsed, base_key.group_size, key.group_size, key.payload_bytes
                )
            else:
                elapsed = 0.0
            return CostEntry(elapsed, Provenance.EXTRAPOLATED, base_key.group_size)
    if policy is Policy.STRICT:
        raise UnresolvedEventError(text)
    if cluster is None:
        raise UnresolvedEventError(text, "analytical fallback needs a cluster")
    try:
        return CostEntry(analytical_cost(event, cluster), Provenance.ANALYTICAL)
    except SimError as exc:
        raise UnresolvedEventError(text, str(exc)) from None


def resolve(
    event: Event | EventKey,
    table: CostTable,
    cluster: ClusterSpec | None = None,
    policy: Policy | str = Policy.STRICT,
) -> float:
    return resolve_entry(event, table, cluster, policy).elapsed


class CostResolver:
    """Caching resolver; records every entry it resolved for later export."""

    def __init__(self, table: CostTable, cluster: ClusterSpec | None = None, policy=Policy.STRICT):
        self.table = table
        self.cluster = cluster
        self.policy = Policy(policy)
        self._resolved: dict[str, CostEntry] = {}

    def entry(self, event: Event | EventKey) -> CostEntry:
        key = event.key if isinstance(event, Event) else event
        text = key.canonical()
        hit = self._resolved.get(text)
        if hit is None:
            hit = resolve_entry(event, self.table, self.cluster, self.policy)
            self._resolved[text] = hit
        return hit

    def __call__(self, event: Event | EventKey) -> float:
        return self.entry(event).elapsed

    def resolved_table(self) -> CostTable:
        return CostTable(self._resolved)


def ingest(measurements: Sequence[RawMeasurement], how: str = "median") -> CostTable:
    """Turn raw measurements into a cost table.

    P2P keys need both a Sender and a Receiver measurement. All-reduce
    groups of at most 8 become extrapolation bases.
    """
    by_key: dict[EventKey, dict[Role, list[RawMeasurement]]] = defaultdict(lambda: defaultdict(list))
    for m in measurements:
        by_key[m.key][m.role].append(m)
    entries = {}
    for key in sorted(by_key, key=EventKey.canonical):
        roles = by_key[key]
        if key.kind is EventKind.P2P:
            if Role.SINGLE in roles:
                raise SpecError(f"p2p measurement for {key} must have role Sender or Receiver")
            if Role.RECEIVER not in roles:
                raise SpecError(f"receiver measurement required for {key}")
            if Role.SENDER not in roles:
                raise SpecError(f"sender measurement required for {key}")
            send = _pool(roles[Role.SENDER])
            recv = _pool(roles[Role.RECEIVER])
            elapsed = ingest_p2p(send, recv, how)
            base = None
        else:
            if set(roles) != {Role.SINGLE}:
                raise SpecError(f"{key.kind.value} measurement for {key} must have role Single")
            elapsed = aggregate(_pool(roles[Role.SINGLE]).samples, how)
            base = None
            if key.kind is EventKind.ALLREDUCE and key.group_size <= MAX_DIRECT_GROUP:
                base = key.group_size
        # file format stores integer microseconds
        elapsed = round(elapsed / US) / 1e6
        entries[key.canonical()] = CostEntry(elapsed, Provenance.MEASURED, base)
    return CostTable(entries)


def _pool(ms: list[RawMeasurement]) -> RawMeasurement:
    samples = tuple(s for m in ms for s in m.samples)
    return RawMeasurement(ms[0].key, samples, ms[0].role)


def analytical_table(events: Iterable[Event], cluster: ClusterSpec) -> CostTable:
    """Cost every event analytically (useful as a synthetic fixture)."""
    return CostTable(
        {e.key.canonical(): CostEntry(analytical_cost(e, cluster), Provenance.ANALYTICAL) for e in events}
    )
