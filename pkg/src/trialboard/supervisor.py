"""Run orchestration: worker scheduling, termination, calibration, telemetry.

One coordinator drives N role workers against a single blackboard. At
time_scale=0 the run is an event-driven simulation: each worker keeps its own
virtual timeline, the worker with the smallest local time is dispatched next,
and evaluation slots contend in virtual time. At time_scale>0 the workers are
real threads sleeping scaled durations and contending on a priority semaphore.

Termination follows two rules: a hard deadline from run start, and a
no-improvement grace window that resets on every keep. Either writes the
stop flag; workers get a short grace period to finish before being cancelled.
"""

from __future__ import annotations

import dataclasses
import heapq
import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .blackboard import (
    BASELINE,
    CRASH,
    DISQUALIFIED,
    HARNESS_ABORT,
    KEEP,
    PREFLIGHT_CRASH,
    SIZE_BLOCKED,
    Blackboard,
    TrialRecord,
    ValidationError,
)
from .classifier import classify
from .environment import Environment, PreflightResult, Recipe, get_environment
from .lineage import render_context
from .proposer import (
    EnvView,
    ExternalAdapter,
    Proposal,
    SessionBudget,
    SubmitResult,
    ToolSurface,
    run_session,
    scripted_policies,
)

EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)
LOG_COST_S = 1.0          # simulated cost of the locked append
SESSION_OVERHEAD_S = 60.0  # simulated cost of rendering and reading context
WORKER_GRACE_S = 60.0      # simulated grace before forced cancellation
RESTART_CAP = 3            # worker restarts per role per run
AUDIT_FILE = "supervisor_audit.jsonl"
TELEMETRY_FILE = "telemetry.json"
RUN_LOCK_FILE = ".run.lock"


class SupervisorError(Exception):
    """Base error for run orchestration."""


class CalibrationConflictError(SupervisorError):
    """The board is already seeded with a different baseline score."""


class MissingReferenceError(SupervisorError):
    """Parallel efficiency was requested without a single-worker reference."""


def iso_ts(sim_seconds: float) -> str:
    moment = EPOCH + timedelta(seconds=float(sim_seconds))
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(ts: str) -> float:
    moment = datetime.strptime(ts, "%Y-%m-%dT%H:%M:%SZ")
    return (moment.replace(tzinfo=timezone.utc) - EPOCH).total_seconds()


# ── configuration ────────────────────────────────────────────────────────────


@dataclass
class RoleSpec:
    name: str
    policy: str
    priority: int = 1
    adapter_command: list[str] | None = None

    def to_dict(self) -> dict:
        out = {"name": self.name, "policy": self.policy,
               "priority": self.priority}
        if self.adapter_command:
            out["adapter_command"] = list(self.adapter_command)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RoleSpec":
        return cls(name=data["name"], policy=data.get("policy", "hill_climb"),
                   priority=int(data.get("priority", 1)),
                   adapter_command=data.get("adapter_command"))


@dataclass
class RunConfig:
    env_id: str
    roles: list[RoleSpec]
    deadline_hours: float = 48.0
    no_improvement_hours: float = 4.0
    no_lineage: bool = False
    seed: int = 0
    time_scale: float = 0.0
    max_trials: int | None = None
    eval_slots: int = 1
    blackboard_dir: str = "blackboard"

    def validate(self) -> None:
        if not self.roles:
            raise SupervisorError("config needs at least one role")
        if self.deadline_hours <= 0 or self.no_improvement_hours <= 0:
            raise SupervisorError("deadline and grace hours must be positive")
        if self.time_scale < 0:
            raise SupervisorError("time_scale must be >= 0")
        if self.max_trials is not None and self.max_trials < 1:
            raise SupervisorError("max_trials must be >= 1 when set")
        if self.eval_slots < 1:
            raise SupervisorError("eval_slots must be >= 1")
        known = scripted_policies()
        for role in self.roles:
            if role.priority <= 0:
                raise SupervisorError(
                    f"role {role.name!r} has non-positive priority")
            if role.adapter_command is None and role.policy not in known:
                raise SupervisorError(
                    f"role {role.name!r} names unknown policy {role.policy!r}")
        names = [r.name for r in self.roles]
        if len(set(names)) != len(names):
            raise SupervisorError("role names must be unique")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["roles"] = [r.to_dict() for r in self.roles]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        fields = dict(data)
        fields["roles"] = [RoleSpec.from_dict(r) for r in data.get("roles", [])]
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(fields) - allowed
        if unknown:
            raise SupervisorError(f"unknown config keys: {sorted(unknown)}")
        return cls(**fields)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)


def resolve_config(config: RunConfig, environ=None) -> RunConfig:
    """Apply environment overrides and validate; returns a new config."""
    environ = os.environ if environ is None else environ
    resolved = dataclasses.replace(
        config, roles=[dataclasses.replace(r) for r in config.roles])
    if environ.get("NO_LINEAGE") == "1":
        resolved.no_lineage = True
    resolved.validate()
    return resolved


# ── clocks and termination ───────────────────────────────────────────────────


class VirtualClock:
    """Simulated time; scale>0 maps simulated seconds onto real sleeps."""

    def __init__(self, time_scale: float = 0.0, start: float = 0.0):
        self.scale = time_scale
        self._sim = start
        self._offset = start
        self._born = time.monotonic()
        self._lock = threading.Lock()

    def now(self) -> float:
        if self.scale > 0:
            return self._offset + (time.monotonic() - self._born) / self.scale
        return self._sim

    def sleep(self, sim_seconds: float) -> None:
        if sim_seconds <= 0:
            return
        if self.scale > 0:
            time.sleep(sim_seconds * self.scale)
        else:
            with self._lock:
                self._sim += sim_seconds


class TerminationPolicy:
    """Deadline plus keep-resettable no-improvement grace, in seconds."""

    def __init__(self, deadline_s: float, grace_s: float, start_s: float = 0.0):
        self.start = start_s
        self.deadline_at = start_s + deadline_s
        self.grace_s = grace_s
        self.last_keep = start_s
        self._lock = threading.Lock()

    def record_keep(self, t: float) -> None:
        with self._lock:
            self.last_keep = max(self.last_keep, t)

    def grace_at(self) -> float:
        with self._lock:
            return self.last_keep + self.grace_s

    def due(self) -> float:
        return min(self.deadline_at, self.grace_at())

    def check(self, now: float) -> str | None:
        if now >= self.deadline_at:
            return "deadline"
        if now >= self.grace_at():
            return "no-improvement"
        return None


class PrioritySemaphore:
    """Counting semaphore; waiters are served highest priority first,
    FIFO within equal priority."""

    def __init__(self, slots: int):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self._free = slots
        self._cond = threading.Condition()
        self._waiting: list[tuple[int, int]] = []
        self._ticket = itertools.count()

    def acquire(self, priority: int = 1) -> None:
        with self._cond:
            me = (-priority, next(self._ticket))
            heapq.heappush(self._waiting, me)
            while self._free == 0 or self._waiting[0] != me:
                self._cond.wait()
            heapq.heappop(self._waiting)
            self._free -= 1

    def release(self) -> None:
        with self._cond:
            self._free += 1
            self._cond.notify_all()


# ── telemetry ────────────────────────────────────────────────────────────────


@dataclass
class PhaseTimings:
    tau_run: float
    tau_eval: float
    tau_queue: float
    tau_log: float
    status: str = ""

    def total(self) -> float:
        return self.tau_run + self.tau_eval + self.tau_queue + self.tau_log


@dataclass
class RunTelemetry:
    n_workers: int
    started_s: float = 0.0
    ended_s: float = 0.0
    trials: list[PhaseTimings] = field(default_factory=list)
    session_count: int = 0
    zero_submit_count: int = 0
    keeps_timeline: list[tuple[float, str]] = field(default_factory=list)

    def duration_hours(self) -> float:
        return max(self.ended_s - self.started_s, 1e-9) / 3600.0

    def trials_per_hour(self) -> float:
        return len(self.trials) / self.duration_hours()

    def to_dict(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "started_s": self.started_s,
            "ended_s": self.ended_s,
            "session_count": self.session_count,
            "zero_submit_count": self.zero_submit_count,
            "keeps_timeline": [[t, e] for t, e in self.keeps_timeline],
            "trials": [dataclasses.asdict(t) for t in self.trials],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunTelemetry":
        out = cls(n_workers=int(data["n_workers"]),
                  started_s=float(data.get("started_s", 0.0)),
                  ended_s=float(data.get("ended_s", 0.0)),
                  session_count=int(data.get("session_count", 0)),
                  zero_submit_count=int(data.get("zero_submit_count", 0)),
                  keeps_timeline=[(float(t), str(e))
                                  for t, e in data.get("keeps_timeline", [])])
        out.trials = [PhaseTimings(**t) for t in data.get("trials", [])]
        return out


def parallel_efficiency(rate_n: float, n: int, rate_1: float) -> float:
    """Eta = T(N) / (N * T(1)); well-defined for positive rates."""
    if n < 1 or rate_n <= 0 or rate_1 <= 0:
        raise SupervisorError("efficiency needs n >= 1 and positive rates")
    return rate_n / (n * rate_1)


def measure_throughput(telemetry: RunTelemetry,
                       reference: RunTelemetry | None = None,
                       require_eta: bool = False) -> dict:
    """Trials/hour, mean phase times, and eta against a 1-worker reference."""
    if not telemetry.trials:
        raise SupervisorError("telemetry holds no completed trials")
    n = telemetry.n_workers
    rate = telemetry.trials_per_hour()
    taus = {
        "tau_run": float(np.mean([t.tau_run for t in telemetry.trials])),
        "tau_eval": float(np.mean([t.tau_eval for t in telemetry.trials])),
        "tau_queue": float(np.mean([t.tau_queue for t in telemetry.trials])),
        "tau_log": float(np.mean([t.tau_log for t in telemetry.trials])),
    }
    result = {
        "n_workers": n,
        "trials_per_hour": rate,
        "tau": taus,
        "tau_total": sum(taus.values()),
        "trials": len(telemetry.trials),
    }
    if n == 1:
        result["eta"] = 1.0
    elif reference is not None:
        if reference.n_workers != 1:
            raise MissingReferenceError(
                "reference telemetry must come from a single-worker run")
        if not reference.trials:
            raise MissingReferenceError("reference telemetry has no trials")
        result["eta"] = parallel_efficiency(rate, n,
                                            reference.trials_per_hour())
    elif require_eta:
        raise MissingReferenceError(
            "eta requested but no single-worker reference was given")
    return result


# ── calibration ──────────────────────────────────────────────────────────────


def bootstrap_from_baseline(board: Blackboard, env: Environment, score: float,
                            *, ts: str | None = None) -> str:
    """Append-only seeding: first call writes the baseline, repeats are
    idempotent, and a different score is refused with both values named."""
    board.initialize()
    rows = board.read_all()
    if rows:
        baseline = rows[0]
        if baseline.status != BASELINE:
            raise SupervisorError("first row is not a baseline row")
        if f"{baseline.score:.6f}" == f"{score:.6f}":
            return baseline.exp_id
        raise CalibrationConflictError(
            f"board already calibrated at {baseline.score:.6f}, "
            f"refusing new score {score:.6f}")
    ts = ts or iso_ts(0.0)
    record = TrialRecord(
        role="calibration", hypothesis="calibrated starting recipe",
        parent_exp="", status=BASELINE, score=score, delta=None,
        train_s=None, eval_s=None, total_s=None,
        artifact_bytes=env.project_size(env.default_recipe()),
        expected_delta=None, notes="seed row", timestamp=ts)
    exp_id = board.append_trial(record)
    board.save_snapshot(exp_id, {"recipe": _recipe_payload(env.default_recipe())})
    board.log_event("calibrated", ts, exp_id=exp_id,
                    detail={"score": score, "env": env.env_id})
    return exp_id


def _recipe_payload(recipe: Recipe) -> dict:
    return {"knobs": list(recipe.knobs), "flags": sorted(set(recipe.flags))}


def _recipe_from_payload(data: dict) -> Recipe:
    return Recipe(knobs=[float(k) for k in data["knobs"]],
                  flags=[str(f) for f in data.get("flags", [])])


# ── audit journal ────────────────────────────────────────────────────────────


def _audit_log(board: Blackboard, entry: dict) -> None:
    path = board.root / AUDIT_FILE
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        fh.flush()


def read_audit_log(board: Blackboard) -> list[dict]:
    path = board.root / AUDIT_FILE
    if not path.exists():
        return []
    return [json.loads(line) for line in
            path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ── the run itself ───────────────────────────────────────────────────────────


class _WorkerState:
    def __init__(self, index: int, spec: RoleSpec, start_s: float):
        self.index = index
        self.spec = spec
        self.local_time = start_s
        self.sessions = 0
        self.restarts = 0
        self.retired = False


class Supervisor:
    """Shared machinery between the sequential and threaded run modes."""

    def __init__(self, config: RunConfig, env: Environment | None = None,
                 policy_factory=None):
        self.config = config
        self.env = env or get_environment(config.env_id)
        self.board = Blackboard(config.blackboard_dir,
                                direction=self.env.task.direction)
        self.view = EnvView.of(self.env)
        self.policy_factory = policy_factory or self._scripted_factory
        self.role_names = [r.name for r in config.roles]
        self.telemetry = RunTelemetry(n_workers=len(config.roles))
        self.term: TerminationPolicy | None = None
        self.trial_count = 0
        self._count_lock = threading.Lock()
        self._stop_reason: str | None = None

    def _scripted_factory(self, spec: RoleSpec, index: int):
        cls = scripted_policies()[spec.policy]
        return cls(spec.name, index, len(self.config.roles), self.view)

    # — per-trial execution —

    def _blanked_train(self, status: str, outcome) -> float | None:
        if status == DISQUALIFIED:
            return None
        return outcome.train_s if outcome else None

    def _notes_for(self, status: str, outcome, trial, preflight) -> str:
        if status == PREFLIGHT_CRASH and preflight is not None:
            return str(preflight.detail.get("reason", "preflight failure"))
        if status == CRASH and outcome is not None:
            return outcome.crash_excerpt or ""
        if status == SIZE_BLOCKED and outcome is not None:
            over = outcome.artifact_bytes - self.env.task.size_cap_bytes
            return f"size over cap by {over} bytes"
        if status == DISQUALIFIED and trial.gate_report:
            return trial.gate_report
        return ""

    def _append_with_retry(self, outcome, proposal: Proposal, preflight,
                           timings: PhaseTimings, end_s: float) -> tuple:
        """Classify against the freshest best and append; retries the
        classify-append pair when a concurrent keep moves the frontier."""
        for _ in range(3):
            best = self.board.best()
            trial = classify(outcome, self.env.task, best.score,
                             preflight=preflight)
            timings.status = trial.status
            eval_s = None
            total_s = None
            if outcome is not None:
                eval_s = None if outcome.crashed else outcome.eval_s
                total_s = round(outcome.train_s + (eval_s or 0.0), 3)
            record = TrialRecord(
                role=proposal.declared_role,
                hypothesis=proposal.hypothesis,
                parent_exp=proposal.parent_exp,
                status=trial.status,
                score=trial.score,
                delta=trial.delta,
                train_s=self._blanked_train(trial.status, outcome),
                eval_s=eval_s,
                total_s=total_s,
                artifact_bytes=outcome.artifact_bytes if outcome else None,
                expected_delta=proposal.expected_delta,
                notes=self._notes_for(trial.status, outcome, trial, preflight),
                timestamp=iso_ts(end_s))
            try:
                exp_id = self.board.append_trial(record)
            except ValidationError:
                if trial.status == KEEP:
                    continue  # lost the race; reclassify against the new best
                raise
            self.board.save_snapshot(
                exp_id, {"recipe": _recipe_payload(proposal.recipe)})
            return exp_id, trial, record
        raise SupervisorError("could not commit trial after retries")

    def _record_trial(self, proposal: Proposal, outcome, preflight,
                      timings: PhaseTimings, end_s: float) -> SubmitResult:
        exp_id, trial, record = self._append_with_retry(
            outcome, proposal, preflight, timings, end_s)
        over_by = None
        if trial.status == SIZE_BLOCKED:
            if outcome is not None:
                over_by = outcome.artifact_bytes - self.env.task.size_cap_bytes
            elif preflight is not None and preflight.kind == "size":
                over_by = int(preflight.detail.get("over_by", 0))
        if trial.status == KEEP and self.term is not None:
            self.term.record_keep(end_s)
            self.telemetry.keeps_timeline.append((end_s, exp_id))
        self.telemetry.trials.append(timings)
        with self._count_lock:
            self.trial_count += 1
        return SubmitResult(
            exp_id=exp_id, status=trial.status, score=trial.score,
            delta=trial.delta,
            accuracy=outcome.accuracy if outcome else None,
            artifact_bytes=outcome.artifact_bytes if outcome else None,
            over_by=over_by,
            crash_excerpt=outcome.crash_excerpt if outcome else None,
            gate_report=trial.gate_report)

    def _base_recipe(self) -> Recipe:
        best = self.board.best()
        payload = self.board.load_snapshot(best.exp_id)
        if payload is None:
            return self.env.default_recipe()
        return _recipe_from_payload(payload["recipe"])

    def _archive_context(self, context, n_rows: int, seq: int) -> None:
        name = f"ctx_{seq:06d}_{context.role}.txt"
        path = self.board.contexts_dir / name
        path.write_text(context.render_text(), encoding="utf-8")
        self.board.log_event(
            "session_context", context.session_ts,
            detail={"role": context.role, "session_ts": context.session_ts,
                    "n_rows": n_rows, "lineage": context.lineage_enabled,
                    "roles": list(self.role_names),
                    "metric": self.env.task.metric_name, "file": name})

    def _render_for(self, role: str, session_ts: str):
        snapshot = self.board.snapshot()
        context = render_context(
            role, snapshot, session_ts=session_ts, roles=self.role_names,
            metric_name=self.env.task.metric_name,
            lineage_enabled=not self.config.no_lineage)
        return context, len(snapshot.rows)

    def _stop(self, reason: str, now_s: float) -> None:
        if self._stop_reason is None:
            self._stop_reason = reason
        self.board.write_stop_flag(reason)
        self.board.log_event("stop", iso_ts(now_s), detail={"reason": reason})

    def _max_trials_reached(self) -> bool:
        if self.config.max_trials is None:
            return False
        with self._count_lock:
            return self.trial_count >= self.config.max_trials

    def _summary(self, started_s: float, ended_s: float) -> dict:
        rows = self.board.read_all()
        by_status: dict[str, int] = {}
        for r in rows:
            by_status[r.status] = by_status.get(r.status, 0) + 1
        best = self.board.best()
        self.telemetry.started_s = started_s
        self.telemetry.ended_s = ended_s
        reason = self.board.stop_reason() or self._stop_reason or ""
        return {
            "stop_reason": reason,
            "stop_due_s": self.term.due() if self.term else None,
            "stopped_at_s": ended_s,
            "trials_by_status": by_status,
            "n_rows": len(rows),
            "final_best": {"exp_id": best.exp_id, "score": best.score},
            "sessions": self.telemetry.session_count,
            "zero_submit_sessions": self.telemetry.zero_submit_count,
            "telemetry": self.telemetry,
        }


def _resume_offset(board: Blackboard) -> float:
    rows = board.read_all()
    latest = 0.0
    for r in rows:
        if r.timestamp:
            try:
                latest = max(latest, parse_ts(r.timestamp))
            except ValueError:
                continue
    return latest


def run(config: RunConfig, *, env: Environment | None = None,
        policy_factory=None, resume: bool = False) -> dict:
    """Execute one closed-loop run; returns the run summary."""
    cfg = resolve_config(config)
    sup = Supervisor(cfg, env=env, policy_factory=policy_factory)
    board = sup.board
    if not board.exists():
        raise SupervisorError(
            "blackboard is not initialized; run init and calibrate first")
    rows = board.read_all()
    if not rows or rows[0].status != BASELINE:
        raise SupervisorError("blackboard has no baseline row; calibrate first")

    # Held for the whole run so a second runner is refused, not interleaved.
    run_lock = FileLock(str(board.root / RUN_LOCK_FILE), timeout=0.2)
    try:
        run_lock.acquire()
    except Timeout:
        raise SupervisorError(
            f"blackboard {board.root} is in use by a live run") from None
    try:
        if board.should_stop():
            if not resume:
                raise SupervisorError(
                    "stop flag present; use resume to continue this run")
            board.stop_path.unlink()

        start_s = _resume_offset(board) if resume else 0.0
        sup.term = TerminationPolicy(cfg.deadline_hours * 3600.0,
                                     cfg.no_improvement_hours * 3600.0,
                                     start_s=start_s)
        _audit_log(board, {"kind": "run_start", "ts": iso_ts(start_s),
                           "resume": resume, "config": cfg.to_dict()})
        if cfg.time_scale == 0:
            summary = _run_sequential(sup, start_s)
        else:
            summary = _run_threaded(sup, start_s)
        _audit_log(board, {"kind": "run_stop",
                           "ts": iso_ts(summary["stopped_at_s"]),
                           "reason": summary["stop_reason"],
                           "n_rows": summary["n_rows"]})
        tmp = board.root / (TELEMETRY_FILE + ".tmp")
        tmp.write_text(json.dumps(summary["telemetry"].to_dict(),
                                  sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, board.root / TELEMETRY_FILE)
        return summary
    finally:
        run_lock.release()


def read_telemetry(board: Blackboard) -> RunTelemetry:
    """Telemetry persisted by the most recent completed run."""
    path = board.root / TELEMETRY_FILE
    if not path.exists():
        raise SupervisorError(
            f"no telemetry recorded at {path}; complete a run first")
    return RunTelemetry.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _session_seq(board: Blackboard) -> int:
    return sum(1 for e in board.read_events()
               if e.get("kind") == "session_context")


def _run_one_session(sup: Supervisor, worker: _WorkerState,
                     advance, acquire_eval) -> None:
    """Shared session body; time flows through the two injected callbacks.

    advance(worker, seconds) moves the worker's timeline; acquire_eval(worker,
    eval_s) blocks until an evaluation slot is free and returns the queue wait.
    """
    cfg = sup.config
    board = sup.board
    advance(worker, SESSION_OVERHEAD_S)
    session_ts = iso_ts(worker.local_time)
    context, n_rows = sup._render_for(worker.spec.name, session_ts)
    seq = _session_seq(board)
    sup._archive_context(context, n_rows, seq)
    worker.sessions += 1
    sup.telemetry.session_count += 1

    budget = SessionBudget()
    tools = ToolSurface(sup.env, budget, sup._base_recipe(),
                        lineage_enabled=not cfg.no_lineage,
                        blackboard_dir=str(board.root))
    rng = np.random.default_rng([cfg.seed, worker.index, worker.sessions])

    in_flight: list[Proposal] = []

    def submit_fn(proposal: Proposal) -> SubmitResult:
        in_flight.append(proposal)
        preflight = sup.env.preflight(proposal.recipe)
        if not preflight.ok and preflight.kind == "syntax":
            advance(worker, LOG_COST_S)
            timings = PhaseTimings(0.0, 0.0, 0.0, LOG_COST_S)
            result = sup._record_trial(proposal, None, preflight, timings,
                                       worker.local_time)
            in_flight.pop()
            return result
        outcome = sup.env.evaluate(proposal.recipe)
        tau_run = outcome.train_s or 0.0
        advance(worker, tau_run)
        tau_eval = 0.0
        tau_queue = 0.0
        if not outcome.crashed and outcome.eval_s is not None:
            tau_eval = outcome.eval_s
            tau_queue = acquire_eval(worker, tau_eval)
        advance(worker, LOG_COST_S)
        timings = PhaseTimings(tau_run, tau_eval, tau_queue, LOG_COST_S)
        result = sup._record_trial(proposal, outcome,
                                   PreflightResult.passed(), timings,
                                   worker.local_time)
        in_flight.pop()
        return result

    try:
        if worker.spec.adapter_command:
            adapter = ExternalAdapter(worker.spec.adapter_command)
            outcome = adapter.run_session(context, budget, tools, submit_fn)
        else:
            policy = sup.policy_factory(worker.spec, worker.index)
            outcome = run_session(policy, context, budget, tools, submit_fn,
                                  rng)
        if outcome.zero_submit:
            sup.telemetry.zero_submit_count += 1
            board.log_event("zero_submit_session", session_ts,
                            detail={"role": worker.spec.name})
    except Exception as exc:
        worker.restarts += 1
        if in_flight:
            proposal = in_flight[-1]
            record = TrialRecord(
                role=worker.spec.name, hypothesis=proposal.hypothesis,
                parent_exp=proposal.parent_exp, status=HARNESS_ABORT,
                score=None, delta=None, train_s=None, eval_s=None,
                total_s=None, artifact_bytes=None,
                expected_delta=proposal.expected_delta,
                notes=f"worker panic: {exc}",
                timestamp=iso_ts(worker.local_time))
            board.append_trial(record)
            with sup._count_lock:
                sup.trial_count += 1
        board.log_event("worker_restart", iso_ts(worker.local_time),
                        detail={"role": worker.spec.name,
                                "restarts": worker.restarts,
                                "error": str(exc)})
        if worker.restarts > RESTART_CAP:
            worker.retired = True
            board.log_event("worker_retired", iso_ts(worker.local_time),
                            detail={"role": worker.spec.name})


def _run_sequential(sup: Supervisor, start_s: float) -> dict:
    """Event-driven simulation: dispatch the worker with the smallest local
    time; evaluation slots contend in virtual time."""
    cfg = sup.config
    workers = [_WorkerState(i, spec, start_s)
               for i, spec in enumerate(cfg.roles)]
    free_at = [start_s] * cfg.eval_slots

    def advance(worker: _WorkerState, seconds: float) -> None:
        worker.local_time += seconds

    def acquire_eval(worker: _WorkerState, eval_s: float) -> float:
        slot = min(range(len(free_at)), key=lambda k: free_at[k])
        begin = max(worker.local_time, free_at[slot])
        wait = begin - worker.local_time
        free_at[slot] = begin + eval_s
        worker.local_time = begin + eval_s
        return wait

    while True:
        live = [w for w in workers if not w.retired]
        if not live:
            now = max(w.local_time for w in workers)
            sup._stop("workers-retired", now)
            break
        worker = min(live, key=lambda w: (w.local_time, w.index))
        now = worker.local_time
        if sup.board.should_stop():
            break
        reason = sup.term.check(now)
        if reason:
            sup._stop(reason, now)
            break
        if sup._max_trials_reached():
            sup._stop("max-trials", now)
            break
        _run_one_session(sup, worker, advance, acquire_eval)

    ended = max(w.local_time for w in workers)
    return sup._summary(start_s, ended)


def _run_threaded(sup: Supervisor, start_s: float) -> dict:
    """Real worker threads with scaled sleeps and a shared priority queue."""
    cfg = sup.config
    clock = VirtualClock(cfg.time_scale, start=start_s)
    queue = PrioritySemaphore(cfg.eval_slots)
    workers = [_WorkerState(i, spec, start_s)
               for i, spec in enumerate(cfg.roles)]

    def advance(worker: _WorkerState, seconds: float) -> None:
        clock.sleep(seconds)
        worker.local_time = clock.now()

    def acquire_eval(worker: _WorkerState, eval_s: float) -> float:
        before = clock.now()
        queue.acquire(worker.spec.priority)
        wait = max(clock.now() - before, 0.0)
        try:
            clock.sleep(eval_s)
        finally:
            queue.release()
        worker.local_time = clock.now()
        return wait

    def worker_loop(worker: _WorkerState) -> None:
        while not worker.retired:
            if sup.board.should_stop():
                return
            now = clock.now()
            worker.local_time = now
            if sup.term.check(now) or sup._max_trials_reached():
                return
            _run_one_session(sup, worker, advance, acquire_eval)

    threads = [threading.Thread(target=worker_loop, args=(w,), daemon=True)
               for w in workers]
    for t in threads:
        t.start()
    while True:
        now = clock.now()
        if sup.board.should_stop():
            break
        reason = sup.term.check(now)
        if reason:
            sup._stop(reason, now)
            break
        if sup._max_trials_reached():
            sup._stop("max-trials", now)
            break
        if all(w.retired for w in workers):
            sup._stop("workers-retired", now)
            break
        time.sleep(max(cfg.time_scale, 0.001))
    stop_at = clock.now()
    deadline = stop_at + WORKER_GRACE_S
    for t in threads:
        remaining_sim = max(deadline - clock.now(), 0.0)
        t.join(timeout=max(remaining_sim * cfg.time_scale, 0.05))
    for w, t in zip(workers, threads):
        if t.is_alive():
            sup.board.log_event("forced_cancel", iso_ts(clock.now()),
                                detail={"role": w.spec.name})
    return sup._summary(start_s, clock.now())


# ── replay ───────────────────────────────────────────────────────────────────


def replay_contexts(board: Blackboard) -> list[dict]:
    """Re-render every archived session context from the trace; reports
    whether each regeneration matches the archived bytes exactly."""
    from .blackboard import BoardSnapshot

    rows = board.read_all()
    results = []
    for event in board.read_events():
        if event.get("kind") != "session_context":
            continue
        detail = event.get("detail", {})
        path = board.contexts_dir / detail["file"]
        if not path.exists():
            results.append({"file": detail["file"], "ok": False,
                            "reason": "archive missing"})
            continue
        snapshot = BoardSnapshot(rows[: detail["n_rows"]], board.direction)
        context = render_context(
            detail["role"], snapshot, session_ts=detail["session_ts"],
            roles=list(detail["roles"]), metric_name=detail["metric"],
            lineage_enabled=bool(detail["lineage"]))
        regenerated = context.render_text()
        archived = path.read_text(encoding="utf-8")
        results.append({"file": detail["file"],
                        "ok": regenerated == archived,
                        "reason": "" if regenerated == archived
                        else "render mismatch"})
    return results
