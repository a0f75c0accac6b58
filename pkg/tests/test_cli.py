import json
from pathlib import Path

import pytest

from hybridsim import cli
from hybridsim.cost import RawMeasurement, Role, dump_measurements
from hybridsim.errors import InvariantError
from hybridsim.events import EventKey, EventKind, Locality, Phase

DATA = Path(__file__).parent / "data"
BERT = str(DATA / "bert_large_16gpu.json")
EXLARGE = str(DATA / "bert_exlarge_16gpu.json")
GRID = str(DATA / "grid_search_costs.json")
OUTPUTS = [
    "summary.json", "activity.json", "bubbles.json", "stages.json",
    "trace.json", "events.json", "resolved_costs.json", "timeline.json",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_writes_all_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--config", BERT, "--cost-policy", "analytical",
                       "--out-dir", str(tmp_path))
    assert code == 0
    assert "2M2P4D" in out and "devices      16" in out
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(OUTPUTS)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["devices"] == 16
    assert summary["throughput"] == pytest.approx(1 / summary["batch_time"])


def test_simulate_is_idempotent(capsys, tmp_path):
    for d in ("a", "b"):
        run(capsys, "simulate", "--config", BERT, "--cost-policy", "analytical", "--out-dir", str(tmp_path / d))
    for name in OUTPUTS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def one_device_config(tmp_path):
    doc = json.loads((DATA / "bert_large_16gpu.json").read_text())
    doc["cluster"]["num_nodes"], doc["cluster"]["devices_per_node"] = 1, 1
    del doc["strategy"]
    cfg = tmp_path / "one.json"
    cfg.write_text(json.dumps(doc))
    return str(cfg)


def test_simulate_single_device_fully_utilized(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--config", one_device_config(tmp_path), "--strategy", "1M1P1D",
                       "--cost-policy", "analytical", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["summary"]["devices"] == 1
    assert doc["activity"]["devices"]["0"]["utilization"] == 1.0


def test_strict_policy_names_missing_key(capsys, tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    code, _, err = run(capsys, "simulate", "--config", BERT, "--costs", str(empty))
    assert code == 2
    assert "unresolved event" in err and "|" in err


def test_search_fixture(capsys):
    code, out, _ = run(capsys, "search", "--config", EXLARGE, "--costs", GRID)
    assert code == 0
    rows = [l for l in out.splitlines() if l.strip()[:1].isdigit()]
    assert len(rows) == 15
    assert "best: 1M8P2D" in out


def test_search_json_and_single_device(capsys, tmp_path):
    code, out, _ = run(capsys, "search", "--config", one_device_config(tmp_path), "--cost-policy", "analytical", "--format", "json")
    assert code == 0
    result = json.loads(out)
    assert [c["strategy"] for c in result["candidates"]] == ["1M1P1D"]


P2P = EventKey(EventKind.P2P, "send_recv", Phase.FORWARD, (), 4096, 2, Locality.INTER)
AR8 = EventKey(EventKind.ALLREDUCE, "allreduce", Phase.NONE, (), 1 << 20, 8, Locality.INTRA)


def test_ingest(capsys, tmp_path):
    raw = tmp_path / "raw.json"
    dump_measurements(
        [
            RawMeasurement(P2P, (5e-3,), Role.SENDER),
            RawMeasurement(P2P, (3e-3,), Role.RECEIVER),
            RawMeasurement(AR8, (7e-3, 7.2e-3, 6.9e-3)),
        ],
        raw,
    )
    out_path = tmp_path / "costs.json"
    code, out, _ = run(capsys, "ingest", "--measurements", str(raw), "--output", str(out_path))
    assert code == 0 and "2 entries" in out
    recs = {r["key"]: r for r in json.loads(out_path.read_text())}
    assert recs[P2P.canonical()]["elapsed_us"] == 3000
    assert recs[AR8.canonical()]["base_group_size"] == 8


def test_ingest_sender_only(capsys, tmp_path):
    raw = tmp_path / "raw.json"
    dump_measurements([RawMeasurement(P2P, (5e-3,), Role.SENDER)], raw)
    code, _, err = run(capsys, "ingest", "--measurements", str(raw), "--output", str(tmp_path / "c.json"))
    assert code == 2
    assert "receiver measurement required" in err


def test_trace_from_timeline_matches_direct(capsys, tmp_path):
    run(capsys, "simulate", "--config", BERT, "--cost-policy", "analytical", "--out-dir", str(tmp_path))
    code, out, _ = run(capsys, "trace", "--timeline", str(tmp_path / "timeline.json"),
                       "--output", str(tmp_path / "t1.json"))
    assert code == 0 and "trace events" in out
    code, _, _ = run(capsys, "trace", "--config", BERT, "--cost-policy", "analytical",
                     "--output", str(tmp_path / "t2.json"))
    assert code == 0
    t1 = (tmp_path / "t1.json").read_bytes()
    assert t1 == (tmp_path / "t2.json").read_bytes() == (tmp_path / "trace.json").read_bytes()


def test_malformed_timeline(capsys, tmp_path):
    bad = tmp_path / "timeline.json"
    bad.write_text('{"config": {}}')
    code, _, err = run(capsys, "trace", "--timeline", str(bad), "--output", str(tmp_path / "t.json"))
    assert code == 2
    assert "timeline" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--config", "does/not/exist.json", "--cost-policy", "analytical"],
        ["simulate", "--config", EXLARGE, "--cost-policy", "analytical"],
        ["simulate", "--config", BERT],
        ["search", "--config", EXLARGE, "--costs", GRID, "--sizes", "a,b"],
        ["trace", "--config", BERT, "--cost-policy", "analytical"],
    ],
)
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert "error" in err


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--no-such-flag"])
    assert exc.value.code == 1


def test_invariant_error_exit_code(capsys, monkeypatch):
    def broken(*a, **kw):
        raise InvariantError("overlap on rank 0")

    monkeypatch.setattr(cli, "check_timeline", broken)
    code, _, err = run(capsys, "simulate", "--config", BERT, "--cost-policy", "analytical")
    assert code == 3
    assert "internal error" in err
