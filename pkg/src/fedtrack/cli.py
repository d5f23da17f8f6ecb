"""``fedtrack`` command line: validate, run, sweep, verify, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .engine import EngineError, run_scenario
from .metrics import PHASES, SweepError, emit_timeline, load_sweep, run_sweep, summarize
from .policy import Resolver, ScenarioError, load_scenario, validate_scenario
from .provenance import verify
from .rundir import load_run

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VERIFY = 3

VIOLATION_COLUMNS = ["kind", "round", "client", "offender", "detail"]

log = logging.getLogger("fedtrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; raise instead so main() owns the exit code
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedtrack", description="Simulate federated learning with client-level disagreements.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--resolver", choices=[r.value for r in Resolver], help="override the scenario resolver")

    sp = sub.add_parser("validate", help="check a scenario file")
    sp.add_argument("scenario", type=Path)
    overrides(sp)

    sp = sub.add_parser("run", help="execute a scenario and write a run directory")
    sp.add_argument("scenario", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--persist-models", action="store_true")
    sp.add_argument("--force", action="store_true", help="replace an existing output directory")
    sp.add_argument("--threads", type=int, help="training threads (default: FEDTRACK_THREADS or 1)")
    overrides(sp)

    sp = sub.add_parser("sweep", help="run a scalability sweep")
    sp.add_argument("spec", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--parallel", action="store_true", help="run sweep scenarios in separate processes")
    sp.add_argument("--seed", type=int, help="override the base scenario seed")

    sp = sub.add_parser("verify", help="check isolation and fairness of a run")
    sp.add_argument("run_dir", type=Path)
    sp.add_argument("--expect-violations", action="store_true", help="succeed only if violations are found")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("report", help="write a track timeline and summary for a run")
    sp.add_argument("run_dir", type=Path)
    sp.add_argument("--force", action="store_true")
    return p


def _load(args: argparse.Namespace):
    if not args.scenario.exists():
        raise UsageError(f"no such scenario file: {args.scenario}")
    config = load_scenario(args.scenario)
    return config.with_overrides(seed=args.seed, resolver=args.resolver)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _require_run(run_dir: Path) -> None:
    if not (run_dir / "records.jsonl").is_file():
        raise UsageError(f"{run_dir} is not a run directory")


def cmd_validate(args: argparse.Namespace) -> int:
    config = _load(args)
    errors = validate_scenario(config)
    for e in errors:
        print(f"{args.scenario}: {e}")
    if not errors:
        print(f"{args.scenario}: ok ({config.client_count} clients, {len(config.disagreements)} disagreements)")
    return EXIT_OK if not errors else EXIT_RUNTIME


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    errors = validate_scenario(config)
    if errors:
        for e in errors:
            print(f"{args.scenario}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    _prepare_out(args.out, args.force)
    records = run_scenario(config, out_dir=args.out, persist_models=args.persist_models, threads=args.threads)
    last = records[-1] if records else None
    print(f"{config.name}: {len(records)} rounds written to {args.out}")
    if last is not None:
        for tid, m in sorted(last.metrics.items()):
            print(f"  {tid}: loss {m.loss:.4f} metric {m.metric:.4f}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    if not args.spec.exists():
        raise UsageError(f"no such sweep file: {args.spec}")
    spec = load_sweep(args.spec)
    if args.seed is not None:
        spec = replace(spec, base=spec.base.with_overrides(seed=args.seed))
    _prepare_out(args.out, args.force)
    report = run_sweep(spec, parallel=args.parallel)
    (args.out / "sweep.csv").write_text(report.to_csv())
    summary = {
        "dimension": spec.dimension.value,
        "grid": list(spec.grid),
        "repetitions": spec.repetitions,
        "exponent": report.exponent() if len(spec.grid) > 1 else None,
        "points": [
            {
                "value": p.value,
                "mean_ns": {ph: p.mean(ph) for ph in (*PHASES, "total")},
                "std_ns": {ph: p.std(ph) for ph in (*PHASES, "total")},
                "seeds": [r.seed for r in p.repetitions],
            }
            for p in report.points
        ],
    }
    (args.out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report.to_csv(), end="")
    if summary["exponent"] is not None:
        print(f"fitted exponent: {summary['exponent']:.3f}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    _require_run(args.run_dir)
    config, records = load_run(args.run_dir)
    report = verify(records, config)
    with open(args.run_dir / "violations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VIOLATION_COLUMNS)
        for v in report.violations:
            w.writerow(v.row())
    n = len(report.violations)
    print(
        f"{config.name} ({config.resolver.value}): {len(report.isolation)} isolation, "
        f"{len(report.fairness)} fairness violations, {len(report.residuals)} deep residuals"
    )
    for problem in report.influence_mismatches:
        print(f"  influence mismatch: {problem}", file=sys.stderr)
    if args.expect_violations:
        return EXIT_OK if n > 0 else EXIT_VERIFY
    if report.influence_mismatches:
        return EXIT_VERIFY
    if n and config.resolver is Resolver.ROBUST:
        return EXIT_VERIFY
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _require_run(args.run_dir)
    _, records = load_run(args.run_dir)
    csv_text, svg_text = emit_timeline(records)
    (args.run_dir / "timeline.csv").write_text(csv_text)
    (args.run_dir / "timeline.svg").write_text(svg_text)
    summary = summarize(records)
    (args.run_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"fedtrack {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, SweepError, EngineError, OSError, ValueError) as e:
        print(f"fedtrack {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
