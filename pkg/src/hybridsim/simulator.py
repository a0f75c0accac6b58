"""End-to-end simulation: events -> costs -> hierarchical model -> timeline."""

from __future__ import annotations

from dataclasses import dataclass

from .cost import CostResolver, CostTable, Policy
from .events import EventSet, generate_events
from .ir import ValidatedPlan
from .modeler import Timeline, build_pipeline, expand_dp, model_mp, replica_signature
from .schedule import Schedule, make_schedule


@dataclass
class SimulationResult:
    plan: ValidatedPlan
    events: EventSet
    schedule: Schedule
    timeline: Timeline
    resolved_costs: CostTable

    @property
    def batch_time(self) -> float:
        return self.timeline.makespan


def simulate(
    plan: ValidatedPlan,
    costs: CostTable,
    policy: Policy | str = Policy.STRICT,
    charge_receiver: bool = False,
    reverse_backward: bool = False,
) -> SimulationResult:
    events = generate_events(plan)
    resolver = CostResolver(costs, plan.cluster, policy)
    # resolve everything up front so a missing key fails before construction
    for event in events:
        resolver(event)
    schedule = make_schedule(
        plan.strategy.pipeline_algorithm, plan.pp, plan.num_micro_batches, reverse_backward
    )
    replica = build_pipeline(
        schedule, model_mp(plan, events, 0), plan, resolver, charge_receiver=charge_receiver
    )
    base = replica_signature(plan, 0)
    extra = {
        d: build_pipeline(
            schedule, model_mp(plan, events, d), plan, resolver, charge_receiver=charge_receiver
        )
        for d in range(1, plan.dp)
        if replica_signature(plan, d) != base
    }
    timeline = expand_dp(replica, plan, resolver, extra_replicas=extra)
    return SimulationResult(plan, events, schedule, timeline, resolver.resolved_table())
