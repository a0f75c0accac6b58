"""Grid search over hybrid (mp, pp, dp) strategies."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Sequence

from .cost import CostTable, Policy
from .errors import CandidateError, SimError
from .ir import (
    ClusterSpec,
    ModelSpec,
    PipelineAlgorithm,
    StrategyConfig,
    format_strategy,
    validate_plan,
)
from .simulator import simulate

DEFAULT_SIZES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class SearchSpace:
    total_devices: int
    allowed_sizes: tuple[int, ...] = DEFAULT_SIZES
    global_batch_size: int | None = None
    micro_batch_size: int = 1
    num_layers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "allowed_sizes", tuple(sorted(set(self.allowed_sizes))))
        if any(s < 1 for s in self.allowed_sizes) or self.total_devices < 1:
            raise SimError("sizes and device count must be >= 1")

    @classmethod
    def for_model(cls, model: ModelSpec, cluster: ClusterSpec, sizes=DEFAULT_SIZES, micro_batch_size=1):
        return cls(
            cluster.total_devices, tuple(sizes), model.global_batch_size,
            micro_batch_size, len(model.layers),
        )


def enumerate_candidates(space: SearchSpace) -> list[tuple[int, int, int]]:
    """Valid (mp, pp, dp) triples, ordered by (mp, pp)."""
    out = []
    for mp, pp in product(space.allowed_sizes, repeat=2):
        if space.total_devices % (mp * pp):
            continue
        dp = space.total_devices // (mp * pp)
        if dp not in space.allowed_sizes:
            continue
        if space.num_layers is not None and pp > space.num_layers:
            continue
        if space.global_batch_size is not None and space.global_batch_size % (dp * space.micro_batch_size):
            continue
        out.append((mp, pp, dp))
    if not out:
        raise SimError(f"no valid strategy for {space.total_devices} devices")
    return out


@dataclass(frozen=True)
class Candidate:
    strategy: StrategyConfig
    batch_time: float

    @property
    def throughput(self) -> float:
        return 1.0 / self.batch_time

    @property
    def name(self) -> str:
        return format_strategy(self.strategy)


@dataclass(frozen=True)
class SearchResult:
    ranked: tuple[Candidate, ...]

    @property
    def best(self) -> Candidate:
        return self.ranked[0]

    @property
    def worst(self) -> Candidate:
        return self.ranked[-1]

    @property
    def speedup(self) -> float:
        return self.worst.batch_time / self.best.batch_time

    def to_dict(self) -> dict:
        best = self.best.batch_time
        return {
            "best": self.best.name,
            "worst": self.worst.name,
            "speedup": self.speedup,
            "candidates": [
                {
                    "strategy": c.name,
                    "pipeline_algorithm": c.strategy.pipeline_algorithm.value,
                    "micro_batch_size": c.strategy.micro_batch_size,
                    "batch_time": c.batch_time,
                    "throughput": c.throughput,
                    "relative_speedup": c.batch_time / best,
                }
                for c in self.ranked
            ],
        }


def _strategy(mp, pp, dp, algorithm, mbs) -> StrategyConfig:
    alg = PipelineAlgorithm.SEQUENTIAL if pp == 1 else PipelineAlgorithm.parse(algorithm)
    return StrategyConfig(mp, pp, dp, alg, mbs)


def _run_one(args) -> Candidate:
    model, cluster, costs, strategy, policy = args
    try:
        plan = validate_plan(model, cluster, strategy)
        return Candidate(strategy, simulate(plan, costs, policy).batch_time)
    except SimError as exc:
        raise CandidateError(format_strategy(strategy), exc) from exc


def rank_candidates(candidates: Sequence[Candidate]) -> SearchResult:
    ranked = sorted(
        candidates, key=lambda c: (-c.throughput, c.strategy.mp, c.strategy.pp)
    )
    return SearchResult(tuple(ranked))


def grid_search(
    model: ModelSpec,
    cluster: ClusterSpec,
    costs: CostTable,
    space: SearchSpace | None = None,
    policy: Policy | str = Policy.STRICT,
    pipeline_algorithm: PipelineAlgorithm | str = PipelineAlgorithm.DAPPLE,
    workers: int | None = None,
) -> SearchResult:
    """Simulate every enumerated candidate and rank by throughput.

    ``workers`` > 1 fans candidates out to a process pool; the ranking does
    not depend on completion order.
    """
    space = space or SearchSpace.for_model(model, cluster)
    mbs = space.micro_batch_size
    jobs = [
        (model, cluster, costs, _strategy(mp, pp, dp, pipeline_algorithm, mbs), Policy(policy))
        for mp, pp, dp in enumerate_candidates(space)
    ]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return rank_candidates(results)
