"""Command-line entry points binding the modules into runnable workflows.

Commands: init, calibrate, run, resume, audit, throughput, render-context,
replay. Configuration is a single JSON file; explicit flags override it.
Every command validates its flags before touching state, and all table
output is deterministic column-aligned text.
"""

from __future__ import annotations

import argparse
import json
import re
import signal
import sys
from contextlib import contextmanager
from pathlib import Path

from .audit import audit_report, best_so_far, frontier_tsv, report_json
from .blackboard import (
    BASELINE,
    Blackboard,
    CorruptLogError,
    TrialRecord,
    ValidationError,
)
from .environment import EnvError, get_environment
from .lineage import LineageError, render_context
from .supervisor import (
    RunConfig,
    SupervisorError,
    bootstrap_from_baseline,
    measure_throughput,
    read_audit_log,
    read_telemetry,
    replay_contexts,
    run,
)


class CliError(Exception):
    """A command-level failure that maps to a nonzero exit."""


# ── shared helpers ───────────────────────────────────────────────────────────


def _table(pairs: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in pairs)


def _window_arg(text: str) -> tuple[int, int]:
    match = re.fullmatch(r"(\d+):(\d+)", text)
    if not match:
        raise argparse.ArgumentTypeError(
            f"window must look like START:END, got {text!r}")
    lo, hi = int(match.group(1)), int(match.group(2))
    if lo >= hi:
        raise argparse.ArgumentTypeError(
            f"window start must be below end, got {text!r}")
    return lo, hi


def _load_config(args) -> RunConfig:
    if not getattr(args, "config", None):
        raise CliError("this command needs --config")
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "blackboard_dir", None):
        cfg.blackboard_dir = args.blackboard_dir
    if getattr(args, "deadline_hours", None) is not None:
        cfg.deadline_hours = args.deadline_hours
    if getattr(args, "no_improvement_hours", None) is not None:
        cfg.no_improvement_hours = args.no_improvement_hours
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "time_scale", None) is not None:
        cfg.time_scale = args.time_scale
    if getattr(args, "no_lineage", False):
        cfg.no_lineage = True
    return cfg


def _board_dir(args, cfg: RunConfig | None = None) -> Path:
    if getattr(args, "blackboard_dir", None):
        return Path(args.blackboard_dir)
    if cfg is not None:
        return Path(cfg.blackboard_dir)
    if getattr(args, "config", None):
        return Path(RunConfig.from_file(args.config).blackboard_dir)
    raise CliError("this command needs --blackboard-dir or --config")


def _direction_for(root: Path, args) -> str:
    """Metric direction: config wins, else the calibration event, else lower."""
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
        return get_environment(cfg.env_id).task.direction
    probe = Blackboard(root)
    for event in probe.read_events():
        if event.get("kind") == "calibrated":
            env_id = event.get("detail", {}).get("env")
            if env_id:
                return get_environment(env_id).task.direction
    return "lower"


def _open_board(args, cfg: RunConfig | None = None) -> Blackboard:
    root = _board_dir(args, cfg)
    return Blackboard(root, direction=_direction_for(root, args))


@contextmanager
def _stop_on_signals(board: Blackboard):
    """SIGINT and SIGTERM raise the stop flag; the run loop then drains."""
    def handler(signum, frame):
        board.write_stop_flag(f"signal:{signal.Signals(signum).name.lower()}")

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            previous[sig] = signal.signal(sig, handler)
        except ValueError:
            pass  # not the main thread; leave delivery alone
    try:
        yield
    finally:
        for sig, old in previous.items():
            signal.signal(sig, old)


def _read_trace(path: Path) -> tuple[list[TrialRecord], list[str], int]:
    """Lenient trace reader: (parsed rows, per-row warnings, total data lines)."""
    if path.is_dir():
        path = path / "results.tsv"
    if not path.exists():
        raise CliError(f"no trace at {path}")
    text = path.read_text(encoding="utf-8")
    body, _, _ = text.rpartition("\n")
    lines = body.split("\n") if body else []
    start = 1 if lines and lines[0].startswith("exp_id\t") else 0
    records: list[TrialRecord] = []
    warnings: list[str] = []
    total = 0
    for i, line in enumerate(lines[start:], start=start + 1):
        if not line:
            continue
        total += 1
        try:
            records.append(TrialRecord.from_tsv(line))
        except ValidationError as exc:
            warnings.append(f"warning: {path.name} line {i}: {exc}")
    return records, warnings, total


def _trace_file(path: Path) -> Path:
    return path / "results.tsv" if path.is_dir() else path


# ── commands ─────────────────────────────────────────────────────────────────


def cmd_init(args) -> int:
    board = _open_board(args)
    board.initialize()
    print(f"initialized blackboard at {board.root}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    env = get_environment(cfg.env_id)
    board = Blackboard(Path(cfg.blackboard_dir), direction=env.task.direction)
    fresh = not board.read_all() if board.exists() else True
    exp_id = bootstrap_from_baseline(board, env, args.score)
    if fresh:
        print(f"calibrated {exp_id} at {args.score:.6f}")
    else:
        print(f"already calibrated at {args.score:.6f} ({exp_id})")
    return 0


def _print_summary(summary: dict, fmt: str) -> None:
    if fmt == "json":
        payload = {k: v for k, v in summary.items() if k != "telemetry"}
        payload["telemetry"] = summary["telemetry"].to_dict()
        print(json.dumps(payload, indent=2, sort_keys=True))
        return
    statuses = " ".join(f"{k}={v}" for k, v in
                        sorted(summary["trials_by_status"].items()))
    best = summary["final_best"]
    print(_table([
        ("stop reason", summary["stop_reason"] or "(none)"),
        ("stopped at (sim s)", f"{summary['stopped_at_s']:.1f}"),
        ("rows", str(summary["n_rows"])),
        ("best", f"{best['exp_id']}  {best['score']:.6f}"),
        ("sessions", f"{summary['sessions']} "
                     f"({summary['zero_submit_sessions']} zero-submit)"),
        ("trials by status", statuses or "(none)"),
    ]))


def _run_command(args, resume: bool) -> int:
    cfg = _load_config(args)
    board = Blackboard(Path(cfg.blackboard_dir))
    with _stop_on_signals(board):
        summary = run(cfg, resume=resume)
    _print_summary(summary, args.fmt)
    return 0


def cmd_run(args) -> int:
    return _run_command(args, resume=False)


def cmd_resume(args) -> int:
    return _run_command(args, resume=True)


def cmd_audit(args) -> int:
    trace = Path(args.trace)
    records, warnings, total = _read_trace(trace)
    for line in warnings:
        print(line, file=sys.stderr)
    if total == 0:
        raise CliError(f"trace {_trace_file(trace)} holds no rows")

    report = audit_report(records, window=args.window)
    rendered = report_json(report)
    base = _trace_file(trace)
    sidecar = base.parent / (base.stem + ".audit.json")
    sidecar.write_text(rendered, encoding="utf-8")

    direction = _direction_for(trace if trace.is_dir() else trace.parent, args)
    frontier = best_so_far(records, direction)
    frontier_path = base.parent / (base.stem + ".frontier.tsv")
    frontier_path.write_text(frontier_tsv(frontier), encoding="utf-8")

    if args.fmt == "json":
        print(rendered, end="")
    else:
        print(report.render_text())
        print(f"sidecar {sidecar}")
    if warnings and len(warnings) / total > 0.01:
        print(f"error: {len(warnings)} of {total} rows malformed",
              file=sys.stderr)
        return 1
    return 0


def cmd_throughput(args) -> int:
    board = _open_board(args)
    telemetry = read_telemetry(board)
    reference = None
    if args.reference:
        reference = read_telemetry(Blackboard(Path(args.reference)))
    result = measure_throughput(telemetry, reference=reference)
    if args.fmt == "json":
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    pairs = [
        ("workers", str(result["n_workers"])),
        ("trials", str(result["trials"])),
        ("trials per hour", f"{result['trials_per_hour']:.4f}"),
        ("tau run (s)", f"{result['tau']['tau_run']:.4f}"),
        ("tau eval (s)", f"{result['tau']['tau_eval']:.4f}"),
        ("tau queue (s)", f"{result['tau']['tau_queue']:.4f}"),
        ("tau log (s)", f"{result['tau']['tau_log']:.4f}"),
        ("tau total (s)", f"{result['tau_total']:.4f}"),
    ]
    if "eta" in result:
        pairs.append(("eta", f"{result['eta']:.4f}"))
    print(_table(pairs))
    return 0


def cmd_render_context(args) -> int:
    board = _open_board(args)
    snapshot = board.snapshot()
    if not snapshot.rows:
        raise CliError("blackboard holds no rows; calibrate first")

    roles = None
    for entry in reversed(read_audit_log(board)):
        if entry.get("kind") == "run_start":
            roles = [r["name"] for r in entry["config"]["roles"]]
            break
    if roles is None:
        seen: list[str] = []
        for r in snapshot.rows:
            if r.status != BASELINE and r.role and r.role not in seen:
                seen.append(r.role)
        roles = seen or [args.role]

    metric = "metric"
    for event in board.read_events():
        if event.get("kind") == "calibrated":
            env_id = event.get("detail", {}).get("env")
            if env_id:
                metric = get_environment(env_id).task.metric_name
    session_ts = max((r.timestamp for r in snapshot.rows if r.timestamp),
                     default="1970-01-01T00:00:00Z")

    context = render_context(args.role, snapshot, session_ts=session_ts,
                             roles=roles, metric_name=metric,
                             lineage_enabled=not args.no_lineage)
    text = context.render_text()
    if args.fmt == "json":
        print(json.dumps({"role": args.role, "session_ts": session_ts,
                          "text": text}, indent=2, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")
    return 0


def cmd_replay(args) -> int:
    board = _open_board(args)
    results = replay_contexts(board)
    bad = [r for r in results if not r["ok"]]
    for r in results:
        mark = "ok  " if r["ok"] else "FAIL"
        suffix = f"  ({r['reason']})" if r["reason"] else ""
        print(f"{mark} {r['file']}{suffix}")
    print(f"{len(results)} contexts, {len(bad)} mismatches")
    return 1 if bad else 0


# ── parser ───────────────────────────────────────────────────────────────────


def _add_board_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON file")
    p.add_argument("--blackboard-dir", help="blackboard directory")


def _add_format_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", dest="fmt", choices=("text", "json"),
                   default="text", help="output format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialboard",
        description="closed-loop experiment harness over a shared blackboard")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create an empty blackboard")
    _add_board_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("calibrate", help="seed the baseline row")
    _add_board_flags(p)
    p.add_argument("--score", type=float, required=True,
                   help="measured starting-recipe score")
    p.set_defaults(func=cmd_calibrate)

    for name, fn in (("run", cmd_run), ("resume", cmd_resume)):
        p = sub.add_parser(name, help=f"{name} a closed-loop run")
        _add_board_flags(p)
        p.add_argument("--deadline-hours", type=float, default=None)
        p.add_argument("--no-improvement-hours", type=float, default=None)
        p.add_argument("--no-lineage", action="store_true",
                       help="withhold prior-trial context from proposers")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--time-scale", type=float, default=None,
                       help="0 simulates; >0 maps sim seconds to real seconds")
        _add_format_flag(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("audit", help="entropy and sharing report over a trace")
    p.add_argument("trace", help="results.tsv file or blackboard directory")
    p.add_argument("--window", type=_window_arg, default=None,
                   help="row window START:END (half-open)")
    p.add_argument("--config", help="config JSON, used for metric direction")
    _add_format_flag(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("throughput", help="trials/hour and phase breakdown")
    _add_board_flags(p)
    p.add_argument("--reference",
                   help="single-worker blackboard dir for the eta baseline")
    _add_format_flag(p)
    p.set_defaults(func=cmd_throughput)

    p = sub.add_parser("render-context", help="render one session context")
    _add_board_flags(p)
    p.add_argument("--role", required=True)
    p.add_argument("--no-lineage", action="store_true")
    _add_format_flag(p)
    p.set_defaults(func=cmd_render_context)

    p = sub.add_parser("replay", help="re-render archived session contexts")
    _add_board_flags(p)
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SupervisorError, EnvError, LineageError, ValidationError,
            CorruptLogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
