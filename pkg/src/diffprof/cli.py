"""Command-line entry point.

    diffprof simulate SPEC OUT          write a simulated session directory
    diffprof summarize SESSION OUT      one .patterns file per worker
    diffprof localize PATTERNS          ranked report of abnormal functions
    diffprof detect [STREAM]            degradation triggers from a marker stream
    diffprof coordinate ...             profiling plan / protocol agreement runs
    diffprof e2e SPEC                   simulate, detect, coordinate, summarize, localize
    diffprof report REPORT.json         re-render a saved report

Exit codes: 0 ok, 2 usage or missing input, 3 malformed data, 4 empty session,
5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ToolkitConfig, load_config
from .coordinator import (
    DaemonState,
    Phase,
    PlanServer,
    ProfilingPlan,
    daemon_poll,
    plan_profiling,
    poll_plan,
    simulate_protocol,
)
from .detector import DegradationDetector, Marker, parse_marker_lines
from .errors import DiffprofError, EmptySession, InputMissing, MalformedRecord
from .localize import PatternTable, localize
from .patterns import patterns_path, summarize, write_patterns
from .report import distributions_csv, report_document, to_json, to_text
from .simulator import Scenario, simulate, simulate_markers, with_onset
from .trace import list_worker_files, load_worker_trace

log = logging.getLogger("diffprof")

EXIT_OK, EXIT_USAGE, EXIT_MALFORMED, EXIT_EMPTY, EXIT_INTERNAL = 0, 2, 3, 4, 5

_CONFIG_FLAGS = {
    "window_seconds": float, "sample_rate_hz": float, "beta_gate": float, "delta": float,
    "k": float, "max_peers": int, "mad_floor": float, "learn_repeats": int,
    "detector_window": int, "relearn_after": int, "slowdown_percent": float,
    "blocked_multiplier": float, "cooldown_seconds": float, "lead_iterations": int,
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="RNG seed (peer sampling, simulation)")
    p.add_argument("--format", choices=("json", "text"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="diffprof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"diffprof {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated session")
    p.add_argument("spec")
    p.add_argument("out")

    p = sub.add_parser("summarize", parents=[common], help="summarize behavior patterns")
    p.add_argument("session")
    p.add_argument("out")
    p.add_argument("--workers", help="comma-separated ranks to summarize")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("localize", parents=[common], help="localize abnormal functions")
    p.add_argument("patterns")
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    p.add_argument("--csv", help="also write per-function distributions as CSV")
    p.add_argument("--jobs", type=int, default=1, help="threads for per-function scoring")

    p = sub.add_parser("detect", parents=[common], help="run the degradation detector")
    p.add_argument("stream", nargs="?", default="-", help="marker stream file or - for stdin")
    p.add_argument("--tick-ms", type=float, default=None,
                   help="probe for blockage at this period between markers")

    p = sub.add_parser("coordinate", parents=[common], help="synchronized profiling plan")
    p.add_argument("--rank0-iteration", type=int)
    p.add_argument("--mean-iteration", type=float, help="mean iteration time in seconds")
    p.add_argument("--daemons", type=int, default=64)
    p.add_argument("--runs", type=int, default=0, help="discrete-event agreement runs")
    p.add_argument("--loopback", action="store_true",
                   help="exercise the plan/ack exchange over a loopback TCP socket")

    p = sub.add_parser("e2e", parents=[common], help="full pipeline on a simulated cluster")
    p.add_argument("spec")
    p.add_argument("-o", "--output")
    p.add_argument("--workdir", help="keep the session and pattern files here")
    p.add_argument("--pre-iterations", type=int, default=120,
                   help="healthy iterations before the faults start")
    p.add_argument("--post-iterations", type=int, default=120)

    p = sub.add_parser("report", parents=[common], help="re-render a JSON report")
    p.add_argument("report")
    p.add_argument("--as", dest="render", choices=("json", "text", "csv"), default="text")
    p.add_argument("-o", "--output")
    return parser


def _config(args) -> ToolkitConfig:
    flags = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
    if getattr(args, "seed", None) is not None:
        flags["rng_seed"] = args.seed
    return load_config(args.config, flags)


def _emit(text: str, path: str | None):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _sync_window(scenario: Scenario, args, cfg: ToolkitConfig) -> ToolkitConfig:
    """A --window-seconds flag overrides the scenario; otherwise the scenario's window is echoed."""
    if args.window_seconds is not None:
        scenario.cluster.window_seconds = args.window_seconds
    return replace(cfg, window_seconds=scenario.cluster.window_seconds,
                   sample_rate_hz=float(scenario.cluster.sample_rate_hz),
                   rng_seed=scenario.seed if args.seed is None else cfg.rng_seed)


def cmd_simulate(args, cfg: ToolkitConfig) -> int:
    scenario = Scenario.load(args.spec)
    if args.seed is not None:
        scenario.seed = args.seed
    cfg = _sync_window(scenario, args, cfg)
    result = simulate(scenario.cluster, scenario.faults, scenario.seed)
    meta = result.write(args.out, config=cfg.to_dict())
    log.info("wrote %d worker traces (%d bytes) to %s", len(meta["workers"]),
             meta["trace_bytes"], args.out)
    return EXIT_OK


def _summarize_one(job: tuple[str, str, dict]) -> int:
    trace_file, out_dir, config = job
    trace = load_worker_trace(trace_file)
    records = summarize(trace)
    return write_patterns(records, patterns_path(out_dir, trace.worker), worker=trace.worker,
                          window_ns=trace.window_length, config=config)


def cmd_summarize(args, cfg: ToolkitConfig) -> int:
    files = list_worker_files(args.session)
    if not files:
        if not Path(args.session).exists():
            raise InputMissing(f"{args.session}: no such session directory")
        raise EmptySession(f"{args.session}: no worker_<rank>.trace files")
    if args.workers:
        wanted = {int(x) for x in args.workers.split(",") if x.strip()}
        files = [(r, p) for r, p in files if r in wanted]
        if not files:
            raise EmptySession(f"none of ranks {sorted(wanted)} present in {args.session}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(p), str(out), cfg.to_dict()) for _, p in files]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            sizes = list(pool.map(_summarize_one, jobs))
    else:
        sizes = [_summarize_one(j) for j in jobs]
    log.info("summarized %d workers into %s (%d bytes)", len(sizes), out, sum(sizes))
    return EXIT_OK


def _render(doc: dict, fmt: str | None) -> str:
    return to_text(doc) if fmt == "text" else to_json(doc)


def cmd_localize(args, cfg: ToolkitConfig) -> int:
    directory = Path(args.patterns)
    if not directory.is_dir():
        raise InputMissing(f"{directory}: no such pattern directory")
    table = PatternTable.from_directory(directory)
    if len(table) == 0:
        raise EmptySession(f"{directory}: no worker_<rank>.patterns files")
    report = localize(table, cfg.range_policy(), cfg.localize_config(), jobs=args.jobs)
    doc = report_document(report, config=cfg.to_dict())
    _emit(_render(doc, args.format), args.output)
    if args.csv:
        Path(args.csv).write_text(distributions_csv(doc), encoding="utf-8")
    return EXIT_OK


def cmd_detect(args, cfg: ToolkitConfig) -> int:
    if args.stream == "-":
        lines, source = sys.stdin, "<stdin>"
    else:
        path = Path(args.stream)
        if not path.exists():
            raise InputMissing(f"{path}: no such marker stream")
        lines, source = path.open(encoding="utf-8"), str(path)
    det = DegradationDetector(cfg.detector_config())
    tick = int(args.tick_ms * 1e6) if args.tick_ms else None
    try:
        triggers = det.run(parse_marker_lines(lines, source), tick_every=tick)
    finally:
        if lines is not sys.stdin:
            lines.close()
    if args.format == "text":
        for t in triggers:
            print(f"{t.kind} at {t.at} evidence={t.evidence[0]:.0f},{t.evidence[1]:.0f}")
        print(f"state {det.state.value}, {len(triggers)} trigger(s)")
    else:
        for t in triggers:
            print(t.to_wire())
    return EXIT_OK


def _loopback_round(plan: ProfilingPlan, daemons: int, rank0_iteration: int) -> dict:
    """Every daemon polls the plan over TCP while its worker walks through the window."""
    server = PlanServer()
    server.serve_in_background()
    try:
        server.publish(plan)
        states = [DaemonState(w, rank0_iteration) for w in range(daemons)]
        profiled: dict[int, list[int]] = {w: [] for w in range(daemons)}
        for it in range(rank0_iteration, plan.stop_iteration + 2):
            for w in range(daemons):
                st = DaemonState(w, it, states[w].phase, states[w].plan)
                st = daemon_poll(st, poll_plan(server.address, st))
                if st.phase is Phase.PROFILING:
                    profiled[w].append(it)
                states[w] = st
        ranges = {(min(v), max(v) + 1) for v in profiled.values() if v}
        return {"daemons": daemons, "acks": len(server.acks),
                "ranges": sorted(list(r) for r in ranges)}
    finally:
        server.shutdown()
        server.server_close()


def cmd_coordinate(args, cfg: ToolkitConfig) -> int:
    out: dict = {}
    if args.rank0_iteration is not None or args.mean_iteration is not None:
        if args.rank0_iteration is None or args.mean_iteration is None:
            raise InputMissing("--rank0-iteration and --mean-iteration go together")
        plan = plan_profiling(args.rank0_iteration, args.mean_iteration, cfg.window_seconds,
                              cfg.lead_iterations)
        out["plan"] = json.loads(plan.to_wire())
        if args.loopback:
            out["loopback"] = _loopback_round(plan, args.daemons, args.rank0_iteration)
    if args.runs:
        agreed = missed = 0
        for run in range(args.runs):
            o = simulate_protocol(args.daemons, seed=cfg.rng_seed + run,
                                  window_seconds=cfg.window_seconds, lead=cfg.lead_iterations)
            agreed += o.agreed
            missed += len(o.missed)
        out["runs"] = {"daemons": args.daemons, "runs": args.runs, "agreed": agreed,
                       "missed_windows": missed}
    if not out:
        raise InputMissing("nothing to do: give --rank0-iteration/--mean-iteration or --runs")
    if args.format == "text":
        for key, value in out.items():
            print(f"{key}: {json.dumps(value, sort_keys=True)}")
    else:
        print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def run_e2e(scenario: Scenario, cfg: ToolkitConfig, pre_iterations: int = 120,
            post_iterations: int = 120, workdir: str | Path | None = None) -> dict:
    """Detect on rank 0's markers, plan and agree on a window, profile it, localize."""
    cluster = scenario.cluster
    markers = simulate_markers(cluster, with_onset(scenario.faults, pre_iterations),
                               pre_iterations + post_iterations, scenario.seed)
    det = DegradationDetector(cfg.detector_config())
    trigger = None
    iteration = -1  # rank 0's current iteration
    for ev in markers:
        if ev.kind is Marker.NEXT:
            iteration += 1
        trigger = det.feed(ev)
        if trigger is not None:
            break
    # without a trigger the window is still profiled, right after the stream ends
    mean_s = (det.mean_duration() or 1e9) / 1e9
    plan = plan_profiling(iteration, mean_s, cluster.window_seconds, cfg.lead_iterations)
    protocol = simulate_protocol(cluster.workers, seed=scenario.seed, iteration_seconds=mean_s,
                                 window_seconds=cluster.window_seconds,
                                 lead=cfg.lead_iterations)

    result = simulate(cluster, with_onset(scenario.faults, 0), scenario.seed)
    records = []
    for trace in result.traces:
        records.extend(summarize(trace))
    if workdir is not None:
        workdir = Path(workdir)
        result.write(workdir / "session", config=cfg.to_dict())
        (workdir / "patterns").mkdir(parents=True, exist_ok=True)
        for trace in result.traces:
            write_patterns([r for r in records if r.worker == trace.worker],
                           patterns_path(workdir / "patterns", trace.worker),
                           worker=trace.worker, window_ns=trace.window_length,
                           config=cfg.to_dict())
    report = localize(PatternTable.from_records(records, range(cluster.workers)),
                      cfg.range_policy(), cfg.localize_config())
    extra = {
        "trigger": json.loads(trigger.to_wire()) if trigger else None,
        "plan": json.loads(plan.to_wire()),
        "protocol_agreed": protocol.agreed,
        "ground_truth": result.truth,
        "scenario": scenario.to_dict(),
    }
    return report_document(report, config=cfg.to_dict(), extra=extra)


def cmd_e2e(args, cfg: ToolkitConfig) -> int:
    scenario = Scenario.load(args.spec)
    if args.seed is not None:
        scenario.seed = args.seed
    cfg = _sync_window(scenario, args, cfg)
    doc = run_e2e(scenario, cfg, args.pre_iterations, args.post_iterations, args.workdir)
    _emit(_render(doc, args.format), args.output)
    return EXIT_OK


def cmd_report(args, cfg: ToolkitConfig) -> int:
    path = Path(args.report)
    if not path.exists():
        raise InputMissing(f"{path}: no such report")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        text = {"json": to_json, "text": to_text, "csv": distributions_csv}[args.render](doc)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedRecord(f"not a diffprof report ({exc})", None, str(path)) from None
    _emit(text, args.output)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "summarize": cmd_summarize, "localize": cmd_localize,
    "detect": cmd_detect, "coordinate": cmd_coordinate, "e2e": cmd_e2e, "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except DiffprofError as exc:
        print(f"diffprof {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"diffprof {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"diffprof {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
