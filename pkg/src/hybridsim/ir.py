"""Model, cluster and strategy descriptions, plan validation and rank placement."""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .errors import SpecError


class PipelineAlgorithm(str, Enum):
    GPIPE = "GPipe"
    DAPPLE = "Dapple"
    SEQUENTIAL = "Sequential"

    @classmethod
    def parse(cls, value: "str | PipelineAlgorithm") -> "PipelineAlgorithm":
        if isinstance(value, PipelineAlgorithm):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise SpecError(f"unknown pipeline algorithm {value!r}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    op_kind: str
    param_bytes: int
    fwd_flops: float
    bwd_flops: float
    output_activation_bytes: int
    input_shape: tuple[int, ...]
    mp_splittable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        for name in ("param_bytes", "fwd_flops", "bwd_flops", "output_activation_bytes"):
            if getattr(self, name) < 0:
                raise SpecError(f"must be >= 0, got {getattr(self, name)}", name)
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise SpecError(f"all dims must be > 0, got {list(self.input_shape)}", "input_shape")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    global_batch_size: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SpecError("layers non-empty", "layers")
        if self.global_batch_size < 1:
            raise SpecError("global_batch_size >= 1", "global_batch_size")

    @property
    def total_param_bytes(self) -> int:
        return sum(layer.param_bytes for layer in self.layers)


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int
    devices_per_node: int
    intra_node_bandwidth: float
    inter_node_bandwidth: float
    intra_node_latency: float
    inter_node_latency: float
    device_peak_flops: float
    device_efficiency: float

    def __post_init__(self):
        if self.num_nodes < 1:
            raise SpecError("num_nodes >= 1", "num_nodes")
        if self.devices_per_node < 1:
            raise SpecError("devices_per_node >= 1", "devices_per_node")
        for name in ("intra_node_bandwidth", "inter_node_bandwidth", "device_peak_flops"):
            if not getattr(self, name) > 0:
                raise SpecError("must be > 0", name)
        for name in ("intra_node_latency", "inter_node_latency"):
            if getattr(self, name) < 0:
                raise SpecError("must be >= 0", name)
        if not 0 < self.device_efficiency <= 1:
            raise SpecError("must be in (0, 1]", "device_efficiency")
        if self.intra_node_bandwidth < self.inter_node_bandwidth:
            warnings.warn(
                "intra_node_bandwidth is lower than inter_node_bandwidth",
                stacklevel=2,
            )

    @property
    def total_devices(self) -> int:
        return self.num_nodes * self.devices_per_node


@dataclass(frozen=True)
class StrategyConfig:
    mp: int
    pp: int
    dp: int
    pipeline_algorithm: PipelineAlgorithm = PipelineAlgorithm.SEQUENTIAL
    micro_batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "pipeline_algorithm", PipelineAlgorithm.parse(self.pipeline_algorithm)
        )
        for name in ("mp", "pp", "dp", "micro_batch_size"):
            if getattr(self, name) < 1:
                raise SpecError("must be >= 1", name)
        sequential = self.pipeline_algorithm is PipelineAlgorithm.SEQUENTIAL
        if sequential != (self.pp == 1):
            raise SpecError(
                f"{self.pipeline_algorithm.value} is not valid with pp={self.pp}; "
                "Sequential is used iff pp == 1",
                "pipeline_algorithm",
            )

    @property
    def size(self) -> int:
        return self.mp * self.pp * self.dp

    def __str__(self) -> str:
        return format_strategy(self)


@dataclass(frozen=True)
class RankSlot:
    dp_idx: int
    pp_idx: int
    mp_idx: int
    node_id: int
    local_device_id: int


@dataclass(frozen=True)
class ValidatedPlan:
    model: ModelSpec
    cluster: ClusterSpec
    strategy: StrategyConfig
    num_micro_batches: int
    rank_grid: Mapping[int, RankSlot]
    stage_partition: Mapping[int, range]
    _rank_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {(s.dp_idx, s.pp_idx, s.mp_idx): r for r, s in self.rank_grid.items()}
        object.__setattr__(self, "_rank_index", index)

    @property
    def mp(self) -> int:
        return self.strategy.mp

    @property
    def pp(self) -> int:
        return self.strategy.pp

    @property
    def dp(self) -> int:
        return self.strategy.dp

    @property
    def micro_batch_size(self) -> int:
        return self.strategy.micro_batch_size

    def rank_of(self, dp_idx: int, pp_idx: int, mp_idx: int) -> int:
        return self._rank_index[(dp_idx, pp_idx, mp_idx)]

    def node_of(self, rank: int) -> int:
        return self.rank_grid[rank].node_id

    def stage_layers(self, pp_idx: int) -> list[LayerSpec]:
        return [self.model.layers[i] for i in self.stage_partition[pp_idx]]

    def mp_group(self, dp_idx: int, pp_idx: int) -> list[int]:
        return [self.rank_of(dp_idx, pp_idx, j) for j in range(self.mp)]

    def dp_group(self, pp_idx: int, mp_idx: int) -> list[int]:
        return [self.rank_of(d, pp_idx, mp_idx) for d in range(self.dp)]


# -- parsing -----------------------------------------------------------------

_STRATEGY_RE = re.compile(r"^\s*(\d+)[Mm](\d+)[Pp](\d+)[Dd]\s*$")

_LAYER_FIELDS = {
    "name", "op_kind", "param_bytes", "fwd_flops", "bwd_flops",
    "output_activation_bytes", "input_shape", "mp_splittable",
}
_LAYER_OPTIONAL = {"mp_splittable"}
_MODEL_FIELDS = {"name", "layers", "global_batch_size"}
_CLUSTER_FIELDS = {
    "num_nodes", "devices_per_node", "intra_node_bandwidth", "inter_node_bandwidth",
    "intra_node_latency", "inter_node_latency", "device_peak_flops", "device_efficiency",
}
_STRATEGY_FIELDS = {"mp", "pp", "dp", "pipeline_algorithm", "micro_batch_size"}
_STRATEGY_OPTIONAL = {"pipeline_algorithm", "micro_batch_size"}
DOCUMENT_KEYS = ("model", "cluster", "strategy")


def _check_keys(doc: Any, allowed: set, required: set, path: str) -> None:
    if not isinstance(doc, Mapping):
        raise SpecError(f"expected an object, got {type(doc).__name__}", path)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise SpecError(f"unknown key {unknown[0]!r}", path)
    missing = sorted(required - set(doc))
    if missing:
        raise SpecError(f"missing required field {missing[0]!r}", path)


def _number(value: Any, path: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(f"expected a number, got {value!r}", path)
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise SpecError(f"expected an integer, got {value!r}", path)
        return int(value)
    return value


def _build(factory, kwargs: dict, path: str):
    # re-attribute invariant violations raised by constructors to the document path
    try:
        return factory(**kwargs)
    except SpecError as exc:
        sub = f"{path}.{exc.path}" if exc.path else path
        raise SpecError(exc.message, sub) from None


def parse_layer(doc: Any, path: str = "layer") -> LayerSpec:
    _check_keys(doc, _LAYER_FIELDS, _LAYER_FIELDS - _LAYER_OPTIONAL, path)
    shape = doc["input_shape"]
    if not isinstance(shape, list):
        raise SpecError("expected a list of integers", f"{path}.input_shape")
    kwargs = {
        "name": str(doc["name"]),
        "op_kind": str(doc["op_kind"]),
        "param_bytes": _number(doc["param_bytes"], f"{path}.param_bytes", integer=True),
        "fwd_flops": _number(doc["fwd_flops"], f"{path}.fwd_flops"),
        "bwd_flops": _number(doc["bwd_flops"], f"{path}.bwd_flops"),
        "output_activation_bytes": _number(
            doc["output_activation_bytes"], f"{path}.output_activation_bytes", integer=True
        ),
        "input_shape": tuple(
            _number(d, f"{path}.input_shape[{i}]", integer=True) for i, d in enumerate(shape)
        ),
        "mp_splittable": bool(doc.get("mp_splittable", True)),
    }
    return _build(LayerSpec, kwargs, path)


def parse_model_spec(doc: Any, path: str = "model") -> ModelSpec:
    """Parse the ``model`` section of a configuration document."""
    _check_keys(doc, _MODEL_FIELDS, _MODEL_FIELDS, path)
    layers = doc["layers"]
    if not isinstance(layers, list):
        raise SpecError("expected a list", f"{path}.layers")
    if not layers:
        raise SpecError("layers non-empty", f"{path}.layers")
    parsed = tuple(parse_layer(layer, f"{path}.layers[{i}]") for i, layer in enumerate(layers))
    gbs = _number(doc["global_batch_size"], f"{path}.global_batch_size", integer=True)
    return _build(
        ModelSpec,
        {"name": str(doc["name"]), "layers": parsed, "global_batch_size": gbs},
        path,
    )


def parse_cluster_spec(doc: Any, path: str = "cluster") -> ClusterSpec:
    _check_keys(doc, _CLUSTER_FIELDS, _CLUSTER_FIELDS, path)
    kwargs = {}
    for name in sorted(_CLUSTER_FIELDS):
        integer = name in ("num_nodes", "devices_per_node")
        kwargs[name] = _number(doc[name], f"{path}.{name}", integer=integer)
    return _build(ClusterSpec, kwargs, path)


def parse_strategy(
    text: str,
    micro_batch_size: int = 1,
    pipeline_algorithm: "str | PipelineAlgorithm | None" = None,
) -> StrategyConfig:
    """Parse a compact ``"<mp>M<pp>P<dp>D"`` strategy string.

    The pipeline algorithm defaults to Dapple when pp > 1. With pp == 1 the
    schedule is always Sequential, whatever was requested.
    """
    match = _STRATEGY_RE.match(text) if isinstance(text, str) else None
    if match is None:
        raise SpecError(f"strategy {text!r} does not match '<mp>M<pp>P<dp>D'", "strategy")
    mp, pp, dp = (int(g) for g in match.groups())
    for name, value in (("mp", mp), ("pp", pp), ("dp", dp)):
        if value == 0:
            raise SpecError("zero size component", f"strategy.{name}")
    if pp == 1:
        algorithm = PipelineAlgorithm.SEQUENTIAL
    elif pipeline_algorithm is None:
        algorithm = PipelineAlgorithm.DAPPLE
    else:
        algorithm = PipelineAlgorithm.parse(pipeline_algorithm)
    return _build(
        StrategyConfig,
        {
            "mp": mp, "pp": pp, "dp": dp,
            "pipeline_algorithm": algorithm,
            "micro_batch_size": micro_batch_size,
        },
        "strategy",
    )


def format_strategy(strategy: StrategyConfig) -> str:
    return f"{strategy.mp}M{strategy.pp}P{strategy.dp}D"


def parse_strategy_doc(doc: Any, path: str = "strategy") -> StrategyConfig:
    """Parse a strategy given either as a compact string or as an object."""
    if isinstance(doc, str):
        return parse_strategy(doc)
    _check_keys(doc, _STRATEGY_FIELDS, _STRATEGY_FIELDS - _STRATEGY_OPTIONAL, path)
    kwargs = {n: _number(doc[n], f"{path}.{n}", integer=True) for n in ("mp", "pp", "dp")}
    kwargs["micro_batch_size"] = _number(
        doc.get("micro_batch_size", 1), f"{path}.micro_batch_size", integer=True
    )
    if "pipeline_algorithm" in doc:
        kwargs["pipeline_algorithm"] = _build(
            PipelineAlgorithm.parse, {"value": doc["pipeline_algorithm"]},
            f"{path}.pipeline_algorithm",
        )
    elif kwargs["pp"] > 1:
        kwargs["pipeline_algorithm"] = PipelineAlgorithm.DAPPLE
    return _build(StrategyConfig, kwargs, path)


def parse_document(doc: Any) -> dict:
    """Split a configuration document into its parsed sections.

    Any subset of ``model``, ``cluster`` and ``strategy`` may be present;
    other top-level keys are rejected.
    """
    _check_keys(doc, set(DOCUMENT_KEYS), set(), "$")
    parsers = {
        "model": parse_model_spec,
        "cluster": parse_cluster_spec,
        "strategy": parse_strategy_doc,
    }
    return {key: parsers[key](doc[key], key) for key in DOCUMENT_KEYS if key in doc}


def load_document(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed document: {exc}", str(path)) from None
    return parse_document(doc)


def model_to_doc(model: ModelSpec) -> dict:
    return {
        "name": model.name,
        "global_batch_size": model.global_batch_size,
        "layers": [
            {
                "name": layer.name,
                "op_kind": layer.op_kind,
                "param_bytes": layer.param_bytes,
                "fwd_flops": layer.fwd_flops,
                "bwd_flops": layer.bwd_flops,
                "output_activation_bytes": layer.output_activation_bytes,
                "input_shape": list(layer.input_shape),
                "mp_splittable": layer.mp_splittable,
            }
            for layer in model.layers
        ],
    }


def cluster_to_doc(cluster: ClusterSpec) -> dict:
    return {name: getattr(cluster, name) for name in sorted(_CLUSTER_FIELDS)}


def strategy_to_doc(strategy: StrategyConfig) -> dict:
    return {
        "mp": strategy.mp,
        "pp": strategy.pp,
        "dp": strategy.dp,
        "pipeline_algorithm": strategy.pipeline_algorithm.value,
        "micro_batch_size": strategy.micro_batch_size,
    }


# -- plan construction ---------------------------------------------------------

def partition_stages(num_layers: int, pp: int) -> dict[int, range]:
    """Contiguous balanced split; earlier stages take the remainder."""
    base, extra = divmod(num_layers, pp)
    out, start = {}, 0
    for s in range(pp):
        size = base + (1 if s < extra else 0)
        out[s] = range(start, start + size)
        start += size
    return out


def rank_placement(strategy: StrategyConfig, cluster: ClusterSpec) -> dict[int, RankSlot]:
    """Map every rank to a physical slot.

    rank = (dp_idx * pp + pp_idx) * mp + mp_idx, and nodes are filled in rank
    order, so MP groups occupy consecutive local devices.
    """
    if strategy.size != cluster.total_devices:
        raise SpecError(
            f"mp*pp*dp = {strategy.size} != {cluster.total_devices} devices", "strategy"
        )
    grid = {}
    for d in range(strategy.dp):
        for s in range(strategy.pp):
            for j in range(strategy.mp):
                rank = (d * strategy.pp + s) * strategy.mp + j
                node, local = divmod(rank, cluster.devices_per_node)
                grid[rank] = RankSlot(d, s, j, node, local)
    return dict(sorted(grid.items()))


def validate_plan(
    model: ModelSpec, cluster: ClusterSpec, strategy: StrategyConfig
) -> ValidatedPlan:
    if strategy.size != cluster.total_devices:
        raise SpecError(
            f"device-count mismatch: mp*pp*dp = {strategy.size} "
            f"but the cluster has {cluster.total_devices} devices",
            "strategy",
        )
    if strategy.pp > len(model.layers):
        raise SpecError(
            f"pp={strategy.pp} exceeds the layer count {len(model.layers)}", "strategy.pp"
        )
    per_step = strategy.dp * strategy.micro_batch_size
    if model.global_batch_size % per_step:
        raise SpecError(
            f"global batch {model.global_batch_size} is not divisible by "
            f"dp*micro_batch_size = {per_step}",
            "model.global_batch_size",
        )
    return ValidatedPlan(
        model=model,
        cluster=cluster,
        strategy=strategy,
        num_micro_batches=model.global_batch_size // per_step,
        rank_grid=rank_placement(strategy, cluster),
        stage_partition=partition_stages(len(model.layers), strategy.pp),
    )
