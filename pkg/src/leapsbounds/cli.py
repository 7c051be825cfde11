"""Command-line entry point: ``leapsbounds {run,sweep,verify,gen}``."""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .core import (Censoring, InvalidParameter, ProblemSpec, RuntimeTable, SearchParams,
                   StoppingRule, TableFormatError, TableValidationError, InstanceSampler,
                   load_config_space, load_runtime_table, save_runtime_table)
from .driver import PhaseLimitReached, SearchResult, leaps_and_bounds, subsample_problem
from .oracle import (CensoringError, Constant, ExitPolicy, HeavyTail, LogNormal, SolverError,
                     SubprocessBackend, TableBackend, gen_synthetic)
from .verify import QuantileCensored, check_eps_delta_optimal, quantile_curve

log = logging.getLogger("leapsbounds")

SCHEMA_VERSION = 1
SECONDS_PER_DAY = 86400.0
# report keys that legitimately differ between identical reruns
VOLATILE_KEYS = ("timestamp", "wall_seconds")


class UsageError(Exception):
    pass


def float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def seed_type(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _add_problem_args(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("problem source")
    src.add_argument("--table", type=Path, help="runtime table CSV (with .meta.json sidecar)")
    src.add_argument("--exec-cmd", help="solver command template with {instance} and {flags}")
    src.add_argument("--instances-dir", type=Path, help="directory of instance files")
    src.add_argument("--configs-json", type=Path, help="JSON list of flag lists")
    src.add_argument("--censoring", choices=[c.value for c in Censoring], default="strict")
    src.add_argument("--wall-clock", action="store_true",
                     help="subprocess mode: time runs by wall clock instead of CPU time")
    src.add_argument("--exit-policy", choices=[e.value for e in ExitPolicy], default="fail",
                     help="subprocess mode: nonzero solver exit fails or counts as a timeout")

    alg = p.add_argument_group("search parameters")
    alg.add_argument("--epsilon", type=float, default=0.2)
    alg.add_argument("--delta", type=float, default=0.2)
    alg.add_argument("--zeta", type=float, default=0.1)
    alg.add_argument("--kappa0", type=float, help="minimum runtime; table mode defaults to the sidecar")
    alg.add_argument("--multiplier", type=float, default=2.0)
    alg.add_argument("--stopping", choices=[r.value for r in StoppingRule], default="ebg")
    alg.add_argument("--seed", type=seed_type, default=0)
    alg.add_argument("--threads", type=int, default=1)
    alg.add_argument("--resume-overhead", type=float, default=0.0,
                     help="seconds charged per resumed run in the resume ledger")
    alg.add_argument("--subsample-gamma", type=float,
                     help="search a random subset large enough to hit the fastest gamma fraction")
    alg.add_argument("--max-phases", type=int, help="abort after this many phases")
    alg.add_argument("--literal-ebg", action="store_true",
                     help="advance the EBG grid at most one step per sample")


def build_problem(args: argparse.Namespace) -> tuple[ProblemSpec, Optional[RuntimeTable], dict[str, Any]]:
    if args.table and args.exec_cmd:
        raise UsageError("--table and --exec-cmd are mutually exclusive")
    if args.table:
        table = load_runtime_table(args.table, Censoring(args.censoring))
        backend = TableBackend(table, Censoring(args.censoring))
        problem = ProblemSpec.from_table(table, backend, args.seed, args.kappa0)
        source = {"mode": "table", "table": str(args.table)}
    elif args.exec_cmd:
        if not (args.instances_dir and args.configs_json):
            raise UsageError("--exec-cmd needs --instances-dir and --configs-json")
        if args.kappa0 is None:
            raise UsageError("--kappa0 is required in subprocess mode")
        configs = load_config_space(args.configs_json)
        backend = SubprocessBackend.from_directory(
            args.exec_cmd, args.instances_dir, configs, wall_clock=args.wall_clock,
            exit_policy=ExitPolicy(args.exit_policy))
        problem = ProblemSpec(backend, list(range(len(configs))),
                              InstanceSampler(backend.n_instances, args.seed), args.kappa0,
                              labels={i: " ".join(c) for i, c in enumerate(configs)})
        table = None
        source = {"mode": "subprocess", "exec_cmd": args.exec_cmd,
                  "instances_dir": str(args.instances_dir), "configs_json": str(args.configs_json)}
    else:
        raise UsageError("one of --table or --exec-cmd is required")
    if args.subsample_gamma is not None:
        problem = subsample_problem(problem, args.subsample_gamma, args.zeta, args.seed)
    return problem, table, source


def params_from_args(args: argparse.Namespace, kappa0: float, multiplier: Optional[float] = None) -> SearchParams:
    return SearchParams(
        epsilon=args.epsilon, delta=args.delta, zeta=args.zeta, kappa0=kappa0,
        multiplier=args.multiplier if multiplier is None else multiplier,
        seed=args.seed, stopping_rule=StoppingRule(args.stopping),
    )


def build_report(result: SearchResult, problem: ProblemSpec, source: dict[str, Any],
                 wall_seconds: float) -> dict[str, Any]:
    phases = []
    prev_nr = prev_r = 0.0
    for rec in result.phases:
        ph = rec.phase
        best = rec.best_index
        nr, r = rec.ledger_after["total_no_resume"], rec.ledger_after["total_resume"]
        phases.append({
            "k": ph.k, "theta": ph.theta, "tau": ph.tau, "b": ph.b, "budget": ph.budget,
            "best_config": result.config_ids[best], "best_value": rec.estimates[best].value,
            "work_no_resume": nr - prev_nr, "work_resume": r - prev_r,
            "estimates": [
                {"config_id": e.config_id, "value": e.value, "reason": e.reason.value,
                 "samples_used": e.samples_used, "work_charged": e.work_charged}
                for e in rec.estimates
            ],
        })
        prev_nr, prev_r = nr, r
    totals = result.ledger
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": "leapsbounds",
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
        "wall_seconds": wall_seconds,
        "source": source,
        "params": result.params.to_dict(),
        "config_ids": result.config_ids,
        "chosen_config": result.chosen,
        "chosen_label": problem.labels.get(result.chosen, str(result.chosen)),
        "chosen_value": result.chosen_estimate.value,
        "final_phase": result.final_phase,
        "theta": result.theta,
        "tau": result.tau,
        "totals": {
            "no_resume_seconds": totals["total_no_resume"],
            "resume_seconds": totals["total_resume"],
            "no_resume_cpu_days": totals["total_no_resume"] / SECONDS_PER_DAY,
            "resume_cpu_days": totals["total_resume"] / SECONDS_PER_DAY,
            "run_count": totals["run_count"],
            "resume_count": totals["resume_count"],
        },
        "phases": phases,
    }


def algorithmic_fields(report: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in report.items() if k not in VOLATILE_KEYS}


def write_trace(path: Path, result: SearchResult) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "theta", "tau", "b", "config_id", "value", "reason",
                    "samples_used", "work_charged"])
        for rec in result.phases:
            ph = rec.phase
            for e in rec.estimates:
                w.writerow([ph.k, repr(ph.theta), repr(ph.tau), ph.b, e.config_id, repr(e.value),
                            e.reason.value, e.samples_used, repr(e.work_charged)])


def execute(args: argparse.Namespace, multiplier: Optional[float] = None):
    problem, table, source = build_problem(args)
    params = params_from_args(args, problem.kappa0, multiplier)
    start = time.monotonic()
    result = leaps_and_bounds(problem, params, threads=args.threads, max_phases=args.max_phases,
                              resume_overhead=args.resume_overhead, literal_ebg=args.literal_ebg)
    report = build_report(result, problem, source, time.monotonic() - start)
    return result, report


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> dict[str, Any]:
    result, report = execute(args)
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    if args.trace:
        write_trace(args.trace, result)
    t = report["totals"]
    log.info("chose config %s in phase %d; %.2f CPU-days without resume, %.2f with",
             report["chosen_config"], report["final_phase"], t["no_resume_cpu_days"], t["resume_cpu_days"])
    return report


def cmd_sweep(args: argparse.Namespace) -> list[dict[str, Any]]:
    multipliers = args.multipliers or [args.multiplier]
    rows = []
    for m in multipliers:
        _, report = execute(args, multiplier=m)
        rows.append({
            "multiplier": m,
            "total_resume": report["totals"]["resume_seconds"],
            "total_no_resume": report["totals"]["no_resume_seconds"],
            "chosen_config": report["chosen_config"],
            "phases": report["final_phase"],
        })
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["multiplier", "total_resume", "total_no_resume",
                                        "chosen_config", "phases"], lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    _emit(buf.getvalue(), args.out)
    return rows


def cmd_verify(args: argparse.Namespace) -> dict[str, Any]:
    epsilon, delta, config = args.epsilon, args.delta, args.config
    table_path = args.table
    if args.report:
        report = json.loads(Path(args.report).read_text(encoding="utf-8"))
        if report.get("source", {}).get("mode") != "table" and table_path is None:
            raise UsageError("report was not produced from a table; pass --table")
        table_path = table_path or Path(report["source"]["table"])
        config = report["chosen_config"] if config is None else config
        epsilon = report["params"]["epsilon"] if epsilon is None else epsilon
        delta = report["params"]["delta"] if delta is None else delta
    if table_path is None:
        raise UsageError("--table or --report is required")
    table = load_runtime_table(table_path, Censoring(args.censoring))
    strict = Censoring(args.censoring) is Censoring.STRICT
    out: dict[str, Any] = {}
    if config is not None:
        if epsilon is None or delta is None:
            raise UsageError("--epsilon and --delta are required without --report")
        if not 0 <= config < table.n_configs:
            raise UsageError(f"config {config} out of range for {table.n_configs} configurations")
        w = check_eps_delta_optimal(table, config, epsilon, delta, strict)
        out = {"config_id": config, "epsilon": epsilon, "delta": delta, **w.__dict__}
        sys.stdout.write(json.dumps(out, indent=2) + "\n")
    if args.curve:
        if args.out is None:
            raise UsageError("--curve needs --out as the file prefix")
        for d in args.deltas or [0.0]:
            path = Path(f"{args.out}_delta{d:g}.csv")
            with path.open("w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(["config_rank", "config_id", "value"])
                for rank, i, value in quantile_curve(table, d, strict):
                    wr.writerow([rank, i, repr(value)])
            out.setdefault("curves", []).append(str(path))
    elif config is None:
        raise UsageError("nothing to verify: give --config, --report or --curve")
    return out


def cmd_gen(args: argparse.Namespace) -> RuntimeTable:
    def per_config(values: Optional[list[float]], name: str) -> list[float]:
        if not values:
            raise UsageError(f"--{name} is required for model {args.model}")
        if len(values) == 1:
            return values * args.configs
        if len(values) != args.configs:
            raise UsageError(f"--{name} needs 1 or {args.configs} values")
        return values

    if args.model == "constant":
        models = [Constant(v) for v in per_config(args.mean, "mean")]
    elif args.model == "lognormal":
        sig = per_config(args.sigma, "sigma")
        models = [LogNormal(m, s) for m, s in zip(per_config(args.mu, "mu"), sig)]
    else:
        models = [HeavyTail(b) for b in per_config(args.b, "b")]
    table = gen_synthetic(models, args.configs, args.instances, args.cap, args.kappa0, args.seed)
    save_runtime_table(table, args.out)
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leapsbounds", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="search for an (epsilon, delta)-optimal configuration")
    _add_problem_args(run)
    run.add_argument("--out", type=Path, help="report JSON path (default: stdout)")
    run.add_argument("--trace", type=Path, help="per-phase, per-configuration CSV trace")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="repeat the search over several theta multipliers")
    _add_problem_args(sweep)
    sweep.add_argument("--multipliers", type=float_list)
    sweep.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="check optimality against a full table")
    verify.add_argument("--table", type=Path)
    verify.add_argument("--report", type=Path, help="report JSON whose chosen config to check")
    verify.add_argument("--config", type=int)
    verify.add_argument("--epsilon", type=float)
    verify.add_argument("--delta", type=float)
    verify.add_argument("--censoring", choices=[c.value for c in Censoring], default="strict")
    verify.add_argument("--curve", action="store_true", help="write capped-mean curves")
    verify.add_argument("--deltas", type=float_list)
    verify.add_argument("--out", help="curve file prefix")
    verify.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen", help="write a synthetic runtime table")
    gen.add_argument("--model", choices=["constant", "lognormal", "heavytail"], required=True)
    gen.add_argument("--configs", type=int, required=True)
    gen.add_argument("--instances", type=int, required=True)
    gen.add_argument("--mean", type=float_list)
    gen.add_argument("--mu", type=float_list)
    gen.add_argument("--sigma", type=float_list)
    gen.add_argument("--b", type=float_list)
    gen.add_argument("--cap", type=float, default=900.0)
    gen.add_argument("--kappa0", type=float, default=1.0)
    gen.add_argument("--seed", type=seed_type, default=0)
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except (UsageError, InvalidParameter) as exc:
        parser.error(str(exc))
    except (TableFormatError, TableValidationError, CensoringError, QuantileCensored,
            SolverError, PhaseLimitReached, OSError) as exc:
        print(f"leapsbounds: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
