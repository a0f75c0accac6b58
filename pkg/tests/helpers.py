"""Small plan/cost builders shared by the test modules."""

from __future__ import annotations

from hybridsim.cost import CostEntry, CostTable
from hybridsim.events import EventKind, Phase, generate_events
from hybridsim.ir import ClusterSpec, LayerSpec, ModelSpec, StrategyConfig, parse_strategy, validate_plan


def layer(i: int = 0, seq: int = 8, hidden: int = 16, op: str = "block", **kw) -> LayerSpec:
    fields = dict(
        name=f"l{i}", op_kind=op, param_bytes=4096, fwd_flops=1e6, bwd_flops=2e6,
        output_activation_bytes=seq * hidden * 4, input_shape=(seq, hidden),
    )
    fields.update(kw)
    return LayerSpec(**fields)


def cluster(nodes: int, per_node: int, **kw) -> ClusterSpec:
    fields = dict(
        num_nodes=nodes, devices_per_node=per_node,
        intra_node_bandwidth=100e9, inter_node_bandwidth=10e9,
        intra_node_latency=1e-6, inter_node_latency=5e-6,
        device_peak_flops=100e12, device_efficiency=0.5,
    )
    fields.update(kw)
    return ClusterSpec(**fields)


def make_plan(
    strategy: str | StrategyConfig,
    num_layers: int | None = None,
    M: int = 1,
    mbs: int = 1,
    algorithm: str | None = None,
    per_node: int | None = None,
    **layer_kw,
):
    s = strategy if isinstance(strategy, StrategyConfig) else parse_strategy(strategy, mbs, algorithm)
    num_layers = num_layers or s.pp
    model = ModelSpec("uniform", tuple(layer(i, **layer_kw) for i in range(num_layers)), s.dp * s.micro_batch_size * M)
    total = s.mp * s.pp * s.dp
    per_node = per_node or total
    return validate_plan(model, cluster(total // per_node, per_node), s)


def phase_costs(plan, tf: float, tb: float, comm: float = 0.0, grad: float | None = None) -> CostTable:
    """Every compute key costs tf/tb per layer, every communication key ``comm``.

    ``grad`` overrides the cost of the data-parallel gradient all-reduce.
    """
    out = {}
    for key in generate_events(plan).events:
        if key.kind is EventKind.COMPUTE:
            t = tf if key.phase is Phase.FORWARD else tb
        elif key.phase is Phase.NONE and grad is not None:
            t = grad
        else:
            t = comm
        out[key.canonical()] = CostEntry(t)
    return CostTable(out)
