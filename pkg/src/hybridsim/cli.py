"""Command-line entry point: simulate, search, ingest, trace.

Exit codes: 0 success, 1 usage error, 2 resolution/validation error,
3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis
from .analysis import dumps_json
from .cost import CostTable, Policy, ingest, load_measurements
from .errors import InvariantError, SimError, SpecError
from .ir import (
    PipelineAlgorithm,
    cluster_to_doc,
    load_document,
    model_to_doc,
    parse_document,
    parse_strategy,
    strategy_to_doc,
    validate_plan,
)
from .modeler import check_timeline
from .search import DEFAULT_SIZES, SearchSpace, grid_search
from .simulator import simulate

EXIT_OK, EXIT_USAGE, EXIT_RESOLVE, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_inputs(p: argparse.ArgumentParser, strategy: bool = True) -> None:
    p.add_argument("--config", help="JSON document with model/cluster/strategy sections")
    p.add_argument("--model", help="JSON file with a 'model' section")
    p.add_argument("--cluster", help="JSON file with a 'cluster' section")
    if strategy:
        p.add_argument("--strategy", help="compact '<mp>M<pp>P<dp>D' string or JSON file")
    p.add_argument("--costs", help="cost table file")
    p.add_argument("--micro-batch-size", type=int)
    p.add_argument("--pipeline-alg", choices=["gpipe", "dapple"])
    p.add_argument("--cost-policy", choices=["strict", "analytical"], default="strict")
    p.add_argument("--out-dir", help="directory for machine-readable outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate one strategy")
    _add_inputs(p)
    p.add_argument("--charge-receiver", action="store_true",
                   help="also occupy the receiving device for P2P transfers")
    p.add_argument("--reverse-backward", action="store_true",
                   help="GPipe: run backward micro-batches in descending order")
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("search", help="grid-search (mp, pp, dp) strategies")
    _add_inputs(p, strategy=False)
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)),
                   help="allowed sizes per dimension, comma separated")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("ingest", help="build a cost table from raw measurements")
    p.add_argument("--measurements", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--aggregate", choices=["median", "mean", "p95"], default="median")

    p = sub.add_parser("trace", help="write a Chrome trace")
    _add_inputs(p)
    p.add_argument("--timeline", help="timeline.json written by 'simulate'")
    p.add_argument("--charge-receiver", action="store_true")
    p.add_argument("--output", help="trace file (default: <out-dir>/trace.json)")
    return parser


# -- input loading ---------------------------------------------------------------

def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def _section(path: str, key: str):
    sections = load_document(_existing(path))
    if key not in sections:
        raise SpecError(f"no '{key}' section", path)
    return sections[key]


def _load_inputs(args, need_strategy: bool = True) -> dict:
    sections = load_document(_existing(args.config)) if args.config else {}
    if args.model:
        sections["model"] = _section(args.model, "model")
    if args.cluster:
        sections["cluster"] = _section(args.cluster, "cluster")
    strategy_arg = getattr(args, "strategy", None)
    if strategy_arg:
        if Path(strategy_arg).is_file():
            sections["strategy"] = _section(strategy_arg, "strategy")
        elif strategy_arg.lower().endswith(".json"):
            raise UsageError(f"file not found: {strategy_arg}")
        else:
            sections["strategy"] = parse_strategy(strategy_arg)
    required = ["model", "cluster"] + (["strategy"] if need_strategy else [])
    missing = [k for k in required if k not in sections]
    if missing:
        raise UsageError(f"missing input: --{missing[0]} (or --config)")
    strategy = sections.get("strategy")
    if strategy is not None:
        if args.micro_batch_size:
            strategy = replace(strategy, micro_batch_size=args.micro_batch_size)
        if args.pipeline_alg and strategy.pp > 1:
            strategy = replace(strategy, pipeline_algorithm=PipelineAlgorithm.parse(args.pipeline_alg))
        sections["strategy"] = strategy
    return sections


def _load_costs(args) -> CostTable:
    if args.costs:
        return CostTable.load(_existing(args.costs))
    if args.cost_policy == "analytical":
        return CostTable()
    raise UsageError("--costs is required unless --cost-policy analytical")


def _write(out_dir: Path, name: str, obj) -> None:
    (out_dir / name).write_text(dumps_json(obj))


def _out_dir(args) -> Path | None:
    if not args.out_dir:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sections = _load_inputs(args)
    costs = _load_costs(args)
    plan = validate_plan(sections["model"], sections["cluster"], sections["strategy"])
    result = simulate(
        plan, costs, Policy(args.cost_policy),
        charge_receiver=args.charge_receiver, reverse_backward=args.reverse_backward,
    )
    t = result.timeline
    check_timeline(t, result.resolved_costs.elapsed if not args.charge_receiver else None)
    act = analysis.activity(t)
    bubbles = analysis.bubble_report(t)
    stages = analysis.stage_report(t)
    summary = {
        "strategy": str(plan.strategy),
        "pipeline_algorithm": plan.strategy.pipeline_algorithm.value,
        "micro_batch_size": plan.micro_batch_size,
        "num_micro_batches": plan.num_micro_batches,
        "devices": len(plan.rank_grid),
        "batch_time": analysis.batch_time(t),
        "throughput": 1.0 / analysis.batch_time(t),
        "event_keys": len(result.events),
        "operator_instances": result.events.total_instances,
        "bubble_fraction": bubbles.fraction(),
    }
    out = _out_dir(args)
    if out is not None:
        _write(out, "summary.json", summary)
        _write(out, "activity.json", act.to_dict())
        _write(out, "bubbles.json", bubbles.to_dict())
        _write(out, "stages.json", analysis.stage_report_records(stages))
        _write(out, "trace.json", analysis.export_trace(t))
        _write(out, "events.json", result.events.to_records())
        _write(out, "resolved_costs.json", result.resolved_costs.to_records())
        _write(out, "timeline.json", _timeline_doc(plan, t))
    if args.format == "json":
        sys.stdout.write(dumps_json({"summary": summary, "activity": act.to_dict()}))
        return EXIT_OK
    print(f"strategy     {summary['strategy']} ({summary['pipeline_algorithm']}, "
          f"M={plan.num_micro_batches}, mbs={plan.micro_batch_size})")
    print(f"devices      {summary['devices']}")
    print(f"batch time   {summary['batch_time'] * 1e3:.3f} ms")
    print(f"throughput   {summary['throughput']:.4f} iter/s")
    print()
    print(f"{'rank':>5} {'node':>5} {'stage':>5} {'busy ms':>10} {'util':>7}")
    for rank, a in act.devices.items():
        slot = plan.rank_grid[rank]
        print(f"{rank:>5} {slot.node_id:>5} {slot.pp_idx:>5} {a.busy_time * 1e3:>10.3f} {a.utilization:>7.3f}")
    return EXIT_OK


def _timeline_doc(plan, t) -> dict:
    return {
        "config": {
            "model": model_to_doc(plan.model),
            "cluster": cluster_to_doc(plan.cluster),
            "strategy": strategy_to_doc(plan.strategy),
        },
        "records": analysis.timeline_records(t),
    }


def cmd_search(args) -> int:
    sections = _load_inputs(args, need_strategy=False)
    costs = _load_costs(args)
    try:
        sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}") from None
    model, cluster = sections["model"], sections["cluster"]
    space = SearchSpace.for_model(model, cluster, sizes, args.micro_batch_size or 1)
    result = grid_search(
        model, cluster, costs, space, Policy(args.cost_policy),
        args.pipeline_alg or PipelineAlgorithm.DAPPLE, args.workers,
    )
    doc = result.to_dict()
    out = _out_dir(args)
    if out is not None:
        _write(out, "search.json", doc)
    if args.format == "json":
        sys.stdout.write(dumps_json(doc))
        return EXIT_OK
    worst = result.worst.throughput
    print(f"{'#':>3} {'strategy':>10} {'batch ms':>12} {'iter/s':>10} {'speedup':>8}")
    for i, c in enumerate(result.ranked, 1):
        print(f"{i:>3} {c.name:>10} {c.batch_time * 1e3:>12.3f} {c.throughput:>10.4f} {c.throughput / worst:>7.3f}x")
    print(f"best: {result.best.name}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    table = ingest(load_measurements(_existing(args.measurements)), args.aggregate)
    table.dump(args.output)
    print(f"wrote {len(table)} entries to {args.output}")
    return EXIT_OK


def cmd_trace(args) -> int:
    if args.timeline:
        try:
            doc = json.loads(_existing(args.timeline).read_text())
            sections = parse_document(doc["config"])
            plan = validate_plan(sections["model"], sections["cluster"], sections["strategy"])
            t = analysis.timeline_from_records(doc["records"], plan)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SimError):
                raise
            raise SpecError(f"malformed timeline file: {exc}", args.timeline) from None
    else:
        sections = _load_inputs(args)
        plan = validate_plan(sections["model"], sections["cluster"], sections["strategy"])
        t = simulate(plan, _load_costs(args), Policy(args.cost_policy),
                     charge_receiver=args.charge_receiver).timeline
    if args.output:
        path = Path(args.output)
    elif args.out_dir:
        path = _out_dir(args) / "trace.json"
    else:
        raise UsageError("--output or --out-dir is required")
    records = analysis.export_trace(t)
    problems = analysis.validate_trace(records)
    if problems:
        raise InvariantError("invalid trace: " + problems[0])
    path.write_text(dumps_json(records))
    print(f"wrote {len(records)} trace events to {path}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "search": cmd_search,
    "ingest": cmd_ingest,
    "trace": cmd_trace,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hybridsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"hybridsim: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except SimError as exc:
        print(f"hybridsim: error: {exc}", file=sys.stderr)
        return EXIT_RESOLVE


if __name__ == "__main__":
    sys.exit(main())
