from itertools import product
from pathlib import Path

import pytest

import gridfixture
from helpers import cluster, layer, make_plan
from hybridsim.cost import CostEntry, CostTable, Policy, analytical_table
from hybridsim.errors import CandidateError, SimError
from hybridsim.events import EventKind, generate_events
from hybridsim.ir import ModelSpec, StrategyConfig, parse_strategy, validate_plan
from hybridsim.search import (
    Candidate,
    SearchSpace,
    enumerate_candidates,
    grid_search,
    rank_candidates,
)

DATA = Path(__file__).parent / "data"
SIZES = (1, 2, 4, 8, 16)


def test_single_device():
    assert enumerate_candidates(SearchSpace(1)) == [(1, 1, 1)]


def test_layer_count_filter_matches_exhaustive():
    got = enumerate_candidates(SearchSpace(16, SIZES, num_layers=4))
    assert {pp for _, pp, _ in got} == {1, 2, 4}
    brute = [t for t in product(SIZES, repeat=3) if t[0] * t[1] * t[2] == 16 and t[1] <= 4]
    assert sorted(got) == sorted(brute)


def test_batch_filter():
    got = enumerate_candidates(SearchSpace(16, SIZES, global_batch_size=8, micro_batch_size=2))
    assert all(8 % (dp * 2) == 0 for _, _, dp in got)
    assert (1, 1, 16) not in got and (1, 4, 4) in got


def test_empty_space_and_bad_sizes():
    with pytest.raises(SimError, match="no valid strategy"):
        enumerate_candidates(SearchSpace(3, (2, 4)))
    with pytest.raises(SimError):
        SearchSpace(16, (0, 1))


def test_enumeration_order_is_by_mp_then_pp():
    got = enumerate_candidates(SearchSpace(16, SIZES))
    assert got == sorted(got)


def test_ties_broken_by_smaller_mp_then_pp():
    cands = [
        Candidate(StrategyConfig(*t, "Sequential" if t[1] == 1 else "Dapple"), 2.0)
        for t in [(4, 1, 4), (1, 4, 4), (2, 2, 4), (1, 2, 8)]
    ]
    result = rank_candidates(cands)
    assert [c.name for c in result.ranked] == ["1M2P8D", "1M4P4D", "2M2P4D", "4M1P4D"]
    assert result.speedup == 1.0


def _fixture_search(**kw):
    table = CostTable.load(DATA / "grid_search_costs.json")
    return grid_search(gridfixture.model(), gridfixture.cluster(), table, **kw)


def test_fixture_best_is_exhaustive_min():
    result = _fixture_search()
    assert result.best.name == "1M8P2D"
    assert result.best.batch_time == min(c.batch_time for c in result.ranked)
    times = [c.throughput for c in result.ranked]
    assert times == sorted(times, reverse=True)
    doc = result.to_dict()
    assert doc["best"] == "1M8P2D" and doc["worst"] == "16M1P1D"
    assert len(doc["candidates"]) == 15
    assert doc["candidates"][0]["relative_speedup"] == 1.0


def test_parallel_search_matches_serial():
    assert _fixture_search(workers=3) == _fixture_search()


def test_fixture_is_reproducible_from_its_builder():
    frozen = CostTable.load(DATA / "grid_search_costs.json")
    assert gridfixture.calibrated_table().to_records() == frozen.to_records()


def test_unresolved_event_names_candidate():
    model = ModelSpec("m", tuple(layer(i) for i in range(4)), 4)
    with pytest.raises(CandidateError) as exc:
        grid_search(model, cluster(1, 4), CostTable(), SearchSpace.for_model(model, cluster(1, 4)))
    assert exc.value.candidate == "1M1P4D"
    assert "unresolved event" in str(exc.value)


def test_analytical_policy_search():
    model = ModelSpec("m", tuple(layer(i) for i in range(8)), 8)
    result = grid_search(model, cluster(2, 4), CostTable(), policy=Policy.ANALYTICAL)
    assert len(result.ranked) == len(enumerate_candidates(SearchSpace.for_model(model, cluster(2, 4))))
    assert result.speedup >= 1.0


def test_pure_data_parallel_wins_without_communication():
    model = ModelSpec("m", tuple(layer(i, seq=8, hidden=64) for i in range(16)), 16)
    c = cluster(2, 8)
    space = SearchSpace.for_model(model, c)
    entries = {}
    for mp, pp, dp in enumerate_candidates(space):
        plan = validate_plan(model, c, parse_strategy(f"{mp}M{pp}P{dp}D"))
        for key, entry in analytical_table(generate_events(plan), c).items():
            entries[key] = entry if EventKind.COMPUTE.value in key.split("|")[0] else CostEntry(0.0)
    result = grid_search(model, c, CostTable(entries), space)
    by_name = {cand.name: cand.batch_time for cand in result.ranked}
    pure_dp = by_name["1M1P16D"]
    for cand in result.ranked:
        if cand.strategy.pp > 1:
            assert pure_dp <= cand.batch_time * (1 + 1e-12), cand.name


def test_search_is_deterministic():
    model = ModelSpec("m", tuple(layer(i) for i in range(4)), 8)
    a = grid_search(model, cluster(2, 2), CostTable(), policy="analytical")
    b = grid_search(model, cluster(2, 2), CostTable(), policy="analytical")
    assert a == b
