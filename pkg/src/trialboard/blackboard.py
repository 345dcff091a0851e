"""Append-only shared trial log with lineage tree, current-best record, and stop flag.

One blackboard directory per run:

    results.tsv   one row per submitted trial (header + TSV rows, append-only)
    tree.tsv      the same rows preorder-sorted with depth and slash-joined path
    best.json     current-best row, replaced atomically on every keep
    events.jsonl  one JSON object per harness event
    stop.flag     plain-text stop reason, written once
    snapshots/    per-trial recipe snapshots (JSON)
    contexts/     archived rendered session contexts

All mutations go through one exclusive file lock, so any number of worker
processes can append concurrently. Reads are lock-free and only ever consume
complete lines (writers flush whole lines).
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock, Timeout

# The nine-value trial status taxonomy plus the single seed row.
BASELINE = "baseline"
KEEP = "keep"
DISCARD = "discard"
CRASH = "crash"
PREFLIGHT_CRASH = "preflight_crash"
SIZE_BLOCKED = "size_blocked"
TRAIN_BUDGET_OVERRUN = "train_budget_overrun"
EVAL_BUDGET_OVERRUN = "eval_budget_overrun"
DISQUALIFIED = "disqualified"
HARNESS_ABORT = "harness_abort"

VALID_STATUSES = frozenset({
    BASELINE, KEEP, DISCARD, CRASH, PREFLIGHT_CRASH, SIZE_BLOCKED,
    TRAIN_BUDGET_OVERRUN, EVAL_BUDGET_OVERRUN, DISQUALIFIED, HARNESS_ABORT,
})

LOWER = "lower"
HIGHER = "higher"

RESULTS_COLUMNS = (
    "exp_id", "role", "hypothesis", "parent_exp", "status", "score", "delta",
    "train_s", "eval_s", "total_s", "artifact_bytes", "expected_delta",
    "notes", "timestamp",
)

LOCK_TIMEOUT_S = 30.0


class BlackboardError(Exception):
    """Base error for blackboard operations."""


class ValidationError(BlackboardError):
    """A record failed field validation on append."""


class DuplicateExpIdError(BlackboardError):
    """Caller forced an exp_id that is already in the log (supervisor bug)."""


class LockTimeoutError(BlackboardError):
    """The exclusive lock could not be acquired in time (stuck peer)."""


class CorruptLogError(BlackboardError):
    """The trial log violates a structural invariant (cycle, dangling parent)."""


def is_improvement(score: float, prior_best: float, direction: str) -> bool:
    """Strictly better than prior best in the metric's preferred direction."""
    if direction == LOWER:
        return score < prior_best
    if direction == HIGHER:
        return score > prior_best
    raise ValueError(f"unknown metric direction: {direction!r}")


def _clean_text(value: str) -> str:
    # Tabs and newlines inside free text would break line-per-row greps.
    return value.replace("\t", " ").replace("\r", " ").replace("\n", " ")


def _fmt_score(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _fmt_time(value: float | None) -> str:
    return "" if value is None else f"{value:.3f}"


def _parse_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _parse_int(text: str) -> int | None:
    return None if text == "" else int(text)


@dataclass
class TrialRecord:
    """One submitted trial, exactly one TSV row."""

    exp_id: str = ""
    role: str = ""
    hypothesis: str = ""
    parent_exp: str = ""
    status: str = DISCARD
    score: float | None = None
    delta: float | None = None
    train_s: float | None = None
    eval_s: float | None = None
    total_s: float | None = None
    artifact_bytes: int | None = None
    expected_delta: float | None = None
    notes: str = ""
    timestamp: str = ""

    def to_tsv(self) -> str:
        fields = (
            self.exp_id,
            _clean_text(self.role),
            _clean_text(self.hypothesis),
            self.parent_exp,
            self.status,
            _fmt_score(self.score),
            _fmt_score(self.delta),
            _fmt_time(self.train_s),
            _fmt_time(self.eval_s),
            _fmt_time(self.total_s),
            "" if self.artifact_bytes is None else str(self.artifact_bytes),
            _fmt_score(self.expected_delta),
            _clean_text(self.notes),
            self.timestamp,
        )
        return "\t".join(fields)

    @classmethod
    def from_tsv(cls, line: str) -> "TrialRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(RESULTS_COLUMNS):
            raise ValidationError(
                f"malformed row: expected {len(RESULTS_COLUMNS)} columns, got {len(parts)}"
            )
        return cls(
            exp_id=parts[0],
            role=parts[1],
            hypothesis=parts[2],
            parent_exp=parts[3],
            status=parts[4],
            score=_parse_float(parts[5]),
            delta=_parse_float(parts[6]),
            train_s=_parse_float(parts[7]),
            eval_s=_parse_float(parts[8]),
            total_s=_parse_float(parts[9]),
            artifact_bytes=_parse_int(parts[10]),
            expected_delta=_parse_float(parts[11]),
            notes=parts[12],
            timestamp=parts[13],
        )


@dataclass
class BestRecord:
    """The extremal keep (or baseline) row so far."""

    exp_id: str
    score: float
    role: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "exp_id": self.exp_id,
            "score": self.score,
            "role": self.role,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BestRecord":
        return cls(
            exp_id=data["exp_id"],
            score=float(data["score"]),
            role=data.get("role", ""),
            timestamp=data.get("timestamp", ""),
        )


@dataclass
class TreeRow:
    """A trial record plus its preorder depth and slash-joined root path."""

    record: TrialRecord
    depth: int
    path: str

    def to_tsv(self) -> str:
        return f"{self.record.to_tsv()}\t{self.depth}\t{self.path}"


def exp_id_for(index: int) -> str:
    """Ordinal identifier: 3-digit zero-padded, widening past 999 (exp_1000)."""
    return f"exp_{index:03d}"


def exp_index(exp_id: str) -> int:
    if not exp_id.startswith("exp_"):
        raise ValidationError(f"bad exp_id: {exp_id!r}")
    return int(exp_id[4:])


def build_tree(rows: list[TrialRecord]) -> list[TreeRow]:
    """Preorder tree over parent edges; children of one parent ordered by exp_id.

    Pure function of the row list. Raises CorruptLogError on a dangling parent
    or a parent cycle.
    """
    by_id = {r.exp_id: r for r in rows}
    children: dict[str, list[str]] = {r.exp_id: [] for r in rows}
    roots: list[str] = []
    for r in rows:
        if r.parent_exp == "":
            roots.append(r.exp_id)
        else:
            if r.parent_exp not in by_id:
                raise CorruptLogError(f"{r.exp_id} has dangling parent {r.parent_exp}")
            children[r.parent_exp].append(r.exp_id)

    out: list[TreeRow] = []
    seen: set[str] = set()
    for root in sorted(roots, key=exp_index):
        stack = [(root, 0, root)]
        while stack:
            exp_id, depth, path = stack.pop()
            if exp_id in seen:
                raise CorruptLogError(f"parent cycle through {exp_id}")
            seen.add(exp_id)
            out.append(TreeRow(record=by_id[exp_id], depth=depth, path=path))
            for child in sorted(children[exp_id], key=exp_index, reverse=True):
                stack.append((child, depth + 1, f"{path}/{child}"))
    if len(seen) != len(rows):
        unreached = sorted(set(by_id) - seen, key=exp_index)
        raise CorruptLogError(f"parent cycle isolates {unreached[:5]}")
    return out


def best_over(rows: list[TrialRecord], direction: str) -> BestRecord | None:
    """Derive the current best from a row list (baseline seeds, keeps replace)."""
    best: BestRecord | None = None
    for r in rows:
        if r.status not in (BASELINE, KEEP) or r.score is None:
            continue
        if best is None or is_improvement(r.score, best.score, direction):
            best = BestRecord(exp_id=r.exp_id, score=r.score, role=r.role,
                              timestamp=r.timestamp)
    return best


class BoardSnapshot:
    """An immutable view over the trial rows, for context rendering and audit."""

    def __init__(self, rows: list[TrialRecord], direction: str = LOWER):
        self.rows = list(rows)
        self.direction = direction

    def __len__(self) -> int:
        return len(self.rows)

    def best(self) -> BestRecord | None:
        return best_over(self.rows, self.direction)

    def recent(self, n: int, exclude: frozenset[str] = frozenset({HARNESS_ABORT})
               ) -> list[TrialRecord]:
        kept = [r for r in self.rows if r.status not in exclude]
        return list(reversed(kept[-n:])) if n > 0 else []

    def keeps(self) -> list[TrialRecord]:
        return [r for r in self.rows if r.status in (BASELINE, KEEP)]

    def role_rows(self, role: str) -> list[TrialRecord]:
        return [r for r in self.rows if r.role == role]


class Blackboard:
    """Exclusive-lock append semantics over one results.tsv, safe across processes.

    Within one process a plain mutex serializes appenders before the advisory
    file lock is taken, because flock-style locks do not exclude sibling
    threads holding separate descriptors reliably on all platforms.
    """

    def __init__(self, root: str | Path, direction: str = LOWER,
                 lock_timeout: float = LOCK_TIMEOUT_S):
        if direction not in (LOWER, HIGHER):
            raise ValueError(f"unknown metric direction: {direction!r}")
        self.root = Path(root)
        self.direction = direction
        self.lock_timeout = lock_timeout
        self._mutex = threading.Lock()
        self._flock = FileLock(str(self.root / ".lock"), timeout=lock_timeout)

    # ── paths ──────────────────────────────────────────────────────────────

    @property
    def results_path(self) -> Path:
        return self.root / "results.tsv"

    @property
    def tree_path(self) -> Path:
        return self.root / "tree.tsv"

    @property
    def best_path(self) -> Path:
        return self.root / "best.json"

    @property
    def events_path(self) -> Path:
        return self.root / "events.jsonl"

    @property
    def stop_path(self) -> Path:
        return self.root / "stop.flag"

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    @property
    def contexts_dir(self) -> Path:
        return self.root / "contexts"

    def initialize(self) -> None:
        """Create the directory and the results header if not present."""
        self.root.mkdir(parents=True, exist_ok=True)
        self.snapshots_dir.mkdir(exist_ok=True)
        self.contexts_dir.mkdir(exist_ok=True)
        if not self.results_path.exists():
            with open(self.results_path, "w", encoding="utf-8", newline="") as fh:
                fh.write("\t".join(RESULTS_COLUMNS) + "\n")
                fh.flush()

    def exists(self) -> bool:
        return self.results_path.exists()

    # ── reads (lock-free) ──────────────────────────────────────────────────

    def read_all(self) -> list[TrialRecord]:
        if not self.results_path.exists():
            return []
        text = self.results_path.read_text(encoding="utf-8")
        # Only complete lines count; a writer mid-line has not flushed yet.
        body, _, tail = text.rpartition("\n")
        lines = body.split("\n") if body else []
        records = []
        for line in lines[1:]:  # skip header
            if line:
                records.append(TrialRecord.from_tsv(line))
        return records

    def snapshot(self) -> BoardSnapshot:
        return BoardSnapshot(self.read_all(), self.direction)

    def read_recent(self, n: int,
                    exclude: frozenset[str] = frozenset({HARNESS_ABORT})
                    ) -> list[TrialRecord]:
        """Last n appended records whose status is not excluded, newest first."""
        return self.snapshot().recent(n, exclude)

    def best(self) -> BestRecord | None:
        if not self.best_path.exists():
            return None
        return BestRecord.from_dict(json.loads(self.best_path.read_text(encoding="utf-8")))

    def rebuild_tree(self) -> list[TreeRow]:
        return build_tree(self.read_all())

    # ── stop flag ──────────────────────────────────────────────────────────

    def write_stop_flag(self, reason: str) -> None:
        """First writer wins; later reasons are dropped."""
        try:
            fd = os.open(self.stop_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
        except FileExistsError:
            return
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(reason)

    def should_stop(self) -> bool:
        return self.stop_path.exists()

    def stop_reason(self) -> str | None:
        if not self.stop_path.exists():
            return None
        return self.stop_path.read_text(encoding="utf-8")

    # ── events ─────────────────────────────────────────────────────────────

    def log_event(self, kind: str, ts: str, exp_id: str | None = None,
                  detail: dict | None = None) -> None:
        event: dict = {"ts": ts, "kind": kind}
        if exp_id is not None:
            event["exp_id"] = exp_id
        if detail is not None:
            event["detail"] = detail
        line = json.dumps(event, sort_keys=True)
        with open(self.events_path, "a", encoding="utf-8", newline="") as fh:
            fh.write(line + "\n")
            fh.flush()

    def read_events(self) -> list[dict]:
        if not self.events_path.exists():
            return []
        out = []
        for line in self.events_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    # ── append ─────────────────────────────────────────────────────────────

    def append_trial(self, record: TrialRecord) -> str:
        """Durably append one row under the exclusive lock; returns its exp_id.

        Assigns the next exp_id when record.exp_id is empty; a caller-supplied
        exp_id must be exactly the next one (anything else signals a
        supervisor bug). On a keep, best.json is replaced atomically; the tree
        file is regenerated; an event line is journaled.
        """
        self._validate_fields(record)
        try:
            with self._mutex, self._flock:
                return self._append_locked(record)
        except Timeout as exc:
            raise LockTimeoutError(
                f"blackboard lock not acquired within {self.lock_timeout}s"
            ) from exc

    def _validate_fields(self, record: TrialRecord) -> None:
        if record.status not in VALID_STATUSES:
            raise ValidationError(f"unknown status {record.status!r}")
        if record.status == KEEP and record.score is None:
            raise ValidationError("keep row without a score")
        if record.status == BASELINE and record.score is None:
            raise ValidationError("baseline row without a score")

    def _repair_torn_tail(self) -> None:
        """Truncate a partial trailing line left by a writer killed mid-append."""
        with open(self.results_path, "rb+") as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            if size == 0:
                return
            fh.seek(size - 1)
            if fh.read(1) == b"\n":
                return
            fh.seek(0)
            text = fh.read(size)
            cut = text.rfind(b"\n")
            fh.truncate(cut + 1 if cut >= 0 else 0)

    def _append_locked(self, record: TrialRecord) -> str:
        self._repair_torn_tail()
        rows = self.read_all()
        next_id = exp_id_for(len(rows))

        if record.exp_id:
            if any(r.exp_id == record.exp_id for r in rows):
                raise DuplicateExpIdError(f"{record.exp_id} already appended")
            if record.exp_id != next_id:
                raise ValidationError(
                    f"out-of-order exp_id {record.exp_id!r}; next is {next_id!r}"
                )
        record = dataclasses.replace(record, exp_id=next_id)

        if record.status == BASELINE:
            if rows:
                raise ValidationError("baseline must be the first record")
            if record.parent_exp:
                raise ValidationError("baseline row cannot declare a parent")
        else:
            if not rows:
                raise ValidationError("first record must be the baseline")
            if not record.parent_exp:
                raise ValidationError(f"{record.exp_id} missing parent_exp")
            known = {r.exp_id for r in rows}
            if record.parent_exp not in known:
                raise ValidationError(f"unknown parent {record.parent_exp!r}")

        prior_best = best_over(rows, self.direction)
        if record.status == KEEP:
            if prior_best is None:
                raise ValidationError("keep before any baseline")
            if not is_improvement(record.score, prior_best.score, self.direction):
                raise ValidationError(
                    f"keep row {record.exp_id} score {record.score} does not beat "
                    f"prior best {prior_best.score} ({self.direction} is better)"
                )

        with open(self.results_path, "a", encoding="utf-8", newline="") as fh:
            fh.write(record.to_tsv() + "\n")
            fh.flush()

        if record.status in (KEEP, BASELINE):
            best = BestRecord(exp_id=record.exp_id, score=record.score,
                              role=record.role, timestamp=record.timestamp)
            self._replace_best(best)

        self._write_tree(rows + [record])
        self.log_event("append", ts=record.timestamp, exp_id=record.exp_id,
                       detail={"status": record.status})
        return record.exp_id

    def _replace_best(self, best: BestRecord) -> None:
        # Write-to-temp-then-rename in the same directory for atomicity.
        tmp = self.best_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(best.to_dict(), sort_keys=True) + "\n",
                       encoding="utf-8")
        os.replace(tmp, self.best_path)

    def _write_tree(self, rows: list[TrialRecord]) -> None:
        tree = build_tree(rows)
        tmp = self.tree_path.with_suffix(".tsv.tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write("\t".join(RESULTS_COLUMNS + ("depth", "path")) + "\n")
            for row in tree:
                fh.write(row.to_tsv() + "\n")
        os.replace(tmp, self.tree_path)

    # ── snapshots ──────────────────────────────────────────────────────────

    def save_snapshot(self, exp_id: str, payload: dict) -> None:
        path = self.snapshots_dir / f"{exp_id}.json"
        path.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")

    def load_snapshot(self, exp_id: str) -> dict | None:
        path = self.snapshots_dir / f"{exp_id}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))


def load_results_tsv(path: str | Path) -> list[TrialRecord]:
    """Parse a results.tsv from any source (audit input path)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln]
    records = []
    for line in lines[1:]:
        records.append(TrialRecord.from_tsv(line))
    return records
