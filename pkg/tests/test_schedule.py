from itertools import product
from pathlib import Path

import pytest

from hybridsim.errors import ScheduleError
from hybridsim.events import Phase
from hybridsim.ir import PipelineAlgorithm
from hybridsim.schedule import (
    Schedule,
    Stage,
    dapple_schedule,
    gpipe_schedule,
    make_schedule,
    sequential_schedule,
    validate_schedule,
)

DATA = Path(__file__).parent / "data"
F, B = Phase.FORWARD, Phase.BACKWARD


def tokens(schedule, s):
    return [st.token() for st in schedule.per_device_order[s]]


def test_gpipe_examples():
    g = gpipe_schedule(2, 2)
    assert tokens(g, 0) == tokens(g, 1) == ["F0", "F1", "B0", "B1"]
    assert tokens(gpipe_schedule(1, 1), 0) == ["F0", "B0"]
    g = gpipe_schedule(4, 4)
    for s in range(4):
        assert tokens(g, s) == ["F0", "F1", "F2", "F3", "B0", "B1", "B2", "B3"]


def test_gpipe_reverse_backward_option():
    assert tokens(gpipe_schedule(2, 3, reverse_backward=True), 1) == ["F0", "F1", "F2", "B2", "B1", "B0"]
    assert validate_schedule(gpipe_schedule(3, 4, reverse_backward=True))


def test_dapple_examples():
    d = dapple_schedule(2, 4)
    assert tokens(d, 1) == ["F0", "B0", "F1", "B1", "F2", "B2", "F3", "B3"]
    assert tokens(d, 0) == ["F0", "F1", "B0", "F2", "B1", "F3", "B2", "B3"]
    assert tokens(dapple_schedule(1, 2), 0) == ["F0", "B0", "F1", "B1"]
    assert tokens(sequential_schedule(2), 0) == ["F0", "B0", "F1", "B1"]


def test_dapple_golden_dump():
    golden = (DATA / "dapple_pp4_m6.txt").read_text()
    assert dapple_schedule(4, 6).dump() == golden
    assert Schedule.parse_dump(golden, "Dapple").per_device_order == dapple_schedule(4, 6).per_device_order


def test_dapple_with_few_micro_batches_matches_gpipe():
    for pp in range(1, 6):
        assert dapple_schedule(pp, 1).per_device_order == gpipe_schedule(pp, 1).per_device_order


@pytest.mark.parametrize("pp, M", list(product(range(1, 9), range(1, 9))))
def test_schedule_properties(pp, M):
    for sched in (gpipe_schedule(pp, M), dapple_schedule(pp, M)):
        assert validate_schedule(sched)
        for s, order in sched.per_device_order.items():
            assert len(order) == 2 * M
            assert sorted(st.micro_batch for st in order if st.phase is F) == list(range(M))
            assert sorted(st.micro_batch for st in order if st.phase is B) == list(range(M))
    g = gpipe_schedule(pp, M)
    for order in g.per_device_order.values():
        assert all(st.phase is F for st in order[:M])
    d = dapple_schedule(pp, M)
    for s, order in d.per_device_order.items():
        in_flight = 0
        for st in order:
            in_flight += 1 if st.phase is F else -1
            assert in_flight <= min(M, pp - s)


def _custom(rows):
    return Schedule.parse_dump("\n".join(rows))


@pytest.mark.parametrize(
    "rows, constraint",
    [
        (["B0 F0"], "forward-before-backward"),
        (["F0 F0 B0"], "duplicate"),
        (["F0 F1 B0"], "completeness"),
        (["F0 B0", "F0 B0 F1 B1"], "completeness"),
        (["F0 B0 F1 B1", "F1 F0 B0 B1"], "acyclic"),
    ],
)
def test_validate_reports_first_violation(rows, constraint):
    report = validate_schedule(_custom(rows))
    assert not report
    assert report.constraint == constraint
    assert report.stage is not None


def test_validate_index_range_and_device_set():
    bad = Schedule({0: (Stage(0, 5, F), Stage(0, 5, B))}, PipelineAlgorithm.GPIPE, 1, 1)
    assert validate_schedule(bad).constraint == "index-range"
    missing = Schedule({0: gpipe_schedule(2, 1).per_device_order[0]}, PipelineAlgorithm.GPIPE, 2, 1)
    assert validate_schedule(missing).constraint == "device-set"


def test_make_schedule_dispatch_and_errors():
    assert make_schedule("gpipe", 2, 2).algorithm is PipelineAlgorithm.GPIPE
    assert make_schedule("Dapple", 2, 2).algorithm is PipelineAlgorithm.DAPPLE
    assert make_schedule(PipelineAlgorithm.SEQUENTIAL, 1, 3).pp == 1
    with pytest.raises(ScheduleError):
        make_schedule("Sequential", 2, 2)
    with pytest.raises(ScheduleError):
        gpipe_schedule(0, 1)
    with pytest.raises(ScheduleError, match="bad schedule token"):
        Schedule.parse_dump("F0 X1")
