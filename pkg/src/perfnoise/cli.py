"""Command line front end.

Subcommands:
  inject    splice noise into one assembly file and audit the result
  run       execute a sweep described by a plan file
  analyze   fit series from a results tree and write reports
  report    print a written report as json or csv
  bench     sweep one of the built-in benchmark kernels

Exit codes: 0 success, 1 injection/analysis defects, 2 bad plan or
arguments, 3 build failures, 4 run failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import controller, injector, kernels, patterns
from .analyzer import (
    ClassifierThresholds,
    DEFAULT_THRESHOLDS,
    RegionModeResult,
    TimingSeries,
    emit_report,
    fit_three_phase,
)
from .errors import (
    AnchorMissing,
    BuildFailure,
    NoiseError,
    PlanError,
    RunFailure,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PLAN = 2
EXIT_BUILD = 3
EXIT_RUN = 4


def _cmd_inject(args) -> int:
    text = Path(args.asm).read_text()
    sites = injector.locate_anchors(text, args.isa)
    site = next((s for s in sites if s.region_id == args.region), None)
    if site is None:
        raise AnchorMissing(
            f"no anchor for region {args.region!r} in {args.asm}")
    pattern = patterns.get_pattern(args.mode, site.isa)
    if args.pool:
        import dataclasses
        pattern = dataclasses.replace(pattern, register_pool_size=args.pool)
    injected, _ = injector.inject(text, site, pattern, args.k)
    report = injector.audit(text, injected, site, args.k, pattern)
    Path(args.out).write_text(injected)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(f"injected {report.payload_count} payload instruction(s) "
          f"into {args.region} ({report.placement} overhead, "
          f"{report.overhead_count} lines)")
    return EXIT_OK


def _cmd_run(args) -> int:
    manifest = controller.run_experiment(args.plan, args.out)
    for s in manifest["series"]:
        stopped = (f", stopped at k={s['stopped_at']}"
                   if s["stopped_at"] is not None else "")
        print(f"{s['region']}/{s['mode']}: {len(s['k_used'])} counts{stopped}")
    return EXIT_OK


def _thresholds_from(path: str | None) -> ClassifierThresholds:
    if not path:
        return DEFAULT_THRESHOLDS
    raw = controller.read_plan_tables(path)
    tbl = raw.get("thresholds", raw)
    known = {"latency", "data", "mid", "core"}
    extra = set(tbl) - known
    if extra:
        raise PlanError(f"unknown threshold keys: {sorted(extra)}")
    try:
        return ClassifierThresholds(**{k: float(v) for k, v in tbl.items()})
    except (TypeError, ValueError) as e:
        raise PlanError(f"bad thresholds: {e}") from e


def _cmd_analyze(args) -> int:
    thresholds = _thresholds_from(args.thresholds)
    results = []
    for record in controller.load_results(args.results):
        series = TimingSeries(record["region"], record["mode"],
                              record["samples"])
        fit = fit_three_phase(record["samples"])
        results.append(RegionModeResult(
            region_id=record["region"],
            mode=record["mode"],
            loop_body_size=record["loop_body_size"],
            series=series,
            fit=fit,
            audits=record.get("audits", []),
        ))
    if not results:
        print("no series found", file=sys.stderr)
        return EXIT_ERROR
    report = emit_report(results, args.out, thresholds)
    for e in report["entries"]:
        cls = e["class"] or "(partial)"
        print(f"{e['region']}/{e['mode']}: k1={e['k1']} k2={e['k2']} "
              f"class={cls}")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.reports) / "report.json"
    if not path.exists():
        print(f"no report at {path}", file=sys.stderr)
        return EXIT_ERROR
    report = json.loads(path.read_text())
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    fields = ["region", "mode", "class", "t0", "k1", "k2",
              "absorption_raw", "absorption_rel", "label"]
    writer = csv.writer(sys.stdout)
    writer.writerow(fields)
    for e in report["entries"]:
        writer.writerow([e[f] for f in fields])
    return EXIT_OK


def _cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csr_path = None
    if args.kernel == "spmxv":
        matrix = kernels.generate_csr(args.n, args.nnz, args.q, args.seed)
        csr_path = (out / "matrix.csr").resolve()
        kernels.write_csr(matrix, csr_path)
    argv = kernels.kernel_argv(
        args.kernel, reps=args.reps, n=args.n, threads=args.threads,
        nodes=args.nodes, inner=args.inner, csr_path=csr_path)
    plan = kernels.bench_plan(
        args.kernel, argv, plan_path=args.plan,
        modes=tuple(args.modes) if args.modes else None,
        register_pool_size=args.pool)
    manifest = controller.run_experiment(plan, out)
    for s in manifest["series"]:
        print(f"{s['region']}/{s['mode']}: swept {len(s['k_used'])} counts")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perfnoise",
        description="Locate loop bottlenecks by injecting measured noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject", help="splice noise into an assembly file")
    p.add_argument("--asm", required=True, help="assembly file (compiler -S output)")
    p.add_argument("--region", required=True, help="anchor region id")
    p.add_argument("--mode", required=True, choices=patterns.available_modes())
    p.add_argument("--k", required=True, type=int, help="payload instruction count")
    p.add_argument("--isa", choices=["x86_64", "aarch64"],
                   help="override ISA detection")
    p.add_argument("--out", required=True, help="output assembly path")
    p.add_argument("--report", help="write the audit report here (json)")
    p.add_argument("--pool", type=int, help="register pool size override")
    p.set_defaults(func=_cmd_inject)

    p = sub.add_parser("run", help="run a sweep from a plan file")
    p.add_argument("--plan", required=True, help="plan file (toml)")
    p.add_argument("--out", required=True, help="results directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("analyze", help="fit results and write reports")
    p.add_argument("--in", dest="results", required=True,
                   help="results directory from `run`")
    p.add_argument("--out", required=True, help="reports directory")
    p.add_argument("--thresholds", help="classifier thresholds (toml)")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="print a written report")
    p.add_argument("--in", dest="reports", default="reports",
                   help="reports directory from `analyze`")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("bench", help="sweep a built-in benchmark kernel")
    p.add_argument("--kernel", required=True,
                   choices=kernels.available_kernels())
    p.add_argument("--q", type=float, default=0.0,
                   help="spmxv column disorder probability")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--reps", type=int, default=5, help="samples per run")
    p.add_argument("--n", type=int, default=65536,
                   help="triad/matmul/spmxv problem size")
    p.add_argument("--nnz", type=int, default=16, help="spmxv nonzeros per row")
    p.add_argument("--nodes", type=int, default=32768, help="chain nodes")
    p.add_argument("--inner", type=int, default=65536,
                   help="fp_chain inner iterations")
    p.add_argument("--seed", type=int, default=0, help="matrix seed")
    p.add_argument("--modes", nargs="+", choices=patterns.available_modes(),
                   help="noise modes to sweep")
    p.add_argument("--pool", type=int, help="register pool size override")
    p.add_argument("--plan", help="plan file supplying noise/stop/run tables")
    p.add_argument("--out", default="results", help="results directory")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlanError as e:
        print(f"plan error: {e}", file=sys.stderr)
        return EXIT_PLAN
    except (BuildFailure, AnchorMissing) as e:
        print(f"build error: {e}", file=sys.stderr)
        return EXIT_BUILD
    except RunFailure as e:
        print(f"run error: {e}", file=sys.stderr)
        return EXIT_RUN
    except NoiseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
