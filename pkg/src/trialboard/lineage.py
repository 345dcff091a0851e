"""Per-session feedback context rendered from a blackboard snapshot.

The full context carries six channels: current best, leaderboard, knowledge
one-liners over kept branches, recent activity (with crash excerpts),
a saturation signal, and a banlist of the role's own dead-end patterns.

The no-lineage ablation withholds every within-run prior-trial channel and
leaves exactly two things: the one-line current best and the session's own
workdir summary. Under that mode the read gate also rejects any attempt to
read blackboard files directly, so the ablation cannot be circumvented.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .audit import cluster_online, embed_texts
from .blackboard import (
    BASELINE,
    DISCARD,
    HARNESS_ABORT,
    KEEP,
    BestRecord,
    BoardSnapshot,
    TrialRecord,
    exp_index,
)

LEADERBOARD_N = 10
RECENT_N = 10
KNOWLEDGE_TRUNCATE = 120
BANLIST_CAP = 8
BANLIST_TRUNCATE = 60
SATURATION_EPS = 5e-4

BLACKBOARD_FILE_NAMES = frozenset({
    "results.tsv", "tree.tsv", "best.json", "events.jsonl", "stop.flag",
})
BLACKBOARD_DIR_NAMES = frozenset({"snapshots", "contexts", "blackboard"})


class LineageError(Exception):
    pass


def fmt_metric(value: float) -> str:
    """Fixed 6-decimal rendering with trailing zeros trimmed: 1.0810 -> 1.081."""
    text = f"{value:.6f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


def fmt_delta(value: float) -> str:
    return ("+" if value >= 0 else "") + fmt_metric(value)


def _truncate(text: str, limit: int) -> str:
    return text if len(text) <= limit else text[: limit - 1] + "…"


@dataclass
class LineageContext:
    """Everything one session gets to see, as structured values plus text."""

    session_ts: str
    role: str
    metric_name: str
    best: BestRecord
    lineage_enabled: bool
    workdir_summary: str = ""
    leaderboard: list[TrialRecord] = field(default_factory=list)
    knowledge: list[str] = field(default_factory=list)
    recent: list[TrialRecord] = field(default_factory=list)
    saturation: bool = False
    banlist: list[str] = field(default_factory=list)

    def best_line(self) -> str:
        return (f"Current best: {self.best.exp_id} "
                f"({self.metric_name}={fmt_metric(self.best.score)})")

    def render_text(self) -> str:
        """Deterministic plain-text document handed to the proposer."""
        lines = [f"# Session {self.session_ts} — role {self.role}",
                 self.best_line()]
        if not self.lineage_enabled:
            lines.append("Within-run prior-trial records are unavailable "
                         "in this mode.")
            if self.workdir_summary:
                lines += ["", "## Workdir", self.workdir_summary]
            return "\n".join(lines) + "\n"

        lines += ["", f"## Leaderboard (top {LEADERBOARD_N})"]
        for r in self.leaderboard:
            delta = "" if r.delta is None else f" Δ={fmt_delta(r.delta)}"
            lines.append(f"{r.exp_id}  {fmt_metric(r.score)}{delta}  "
                         f"[{r.role}] {_truncate(r.hypothesis, KNOWLEDGE_TRUNCATE)}")

        lines += ["", "## Knowledge"]
        lines += self.knowledge if self.knowledge else ["(no kept branches yet)"]

        lines += ["", f"## Recent Activity (most recent {RECENT_N})"]
        if not self.recent:
            lines.append("(no submitted trials yet)")
        for r in self.recent:
            score = "" if r.score is None else f" {self.metric_name}={fmt_metric(r.score)}"
            delta = "" if r.delta is None else f" Δ={fmt_delta(r.delta)}"
            lines.append(f"{r.exp_id} [{r.status}]{score}{delta} "
                         f"({r.role}) {_truncate(r.hypothesis, KNOWLEDGE_TRUNCATE)}")
            if r.status == "crash" and r.notes:
                lines.append(f"    {r.notes}")

        if self.saturation:
            lines += ["", f"## Saturation: last 5 own-role deltas all below "
                          f"{SATURATION_EPS:g}"]
        if self.banlist:
            lines += ["", "## Banlist (avoid repeating)"]
            lines += [f"- {item}" for item in self.banlist]
        if self.workdir_summary:
            lines += ["", "## Workdir", self.workdir_summary]
        return "\n".join(lines) + "\n"


def _measured(r: TrialRecord) -> bool:
    return r.delta is not None


def saturation_signal(role: str, snapshot: BoardSnapshot) -> bool:
    """True iff the role's 5 most recent measured deltas are all within noise."""
    own = [r for r in snapshot.rows
           if r.role == role and r.status != BASELINE and _measured(r)]
    if len(own) < 5:
        return False
    return all(abs(r.delta) < SATURATION_EPS for r in own[-5:])


def update_banlist(role: str, snapshot: BoardSnapshot) -> list[str]:
    """Cluster labels of the role's own failed or within-noise trials.

    Most recent first, capped. Labels are the newest member hypothesis of
    each cluster, so three crashes sharing one idea yield one entry.
    """
    qualifying = []
    for r in snapshot.rows:
        if r.role != role or r.status == BASELINE:
            continue
        failed = r.status not in (KEEP, DISCARD)
        within_noise = _measured(r) and abs(r.delta) < SATURATION_EPS
        if failed or within_noise:
            qualifying.append(r)
    if not qualifying:
        return []
    model = cluster_online(embed_texts([r.hypothesis for r in qualifying]).matrix)
    newest_member: dict[int, int] = {}
    for i, cluster in enumerate(model.assignments):
        newest_member[cluster] = i  # later rows overwrite: newest wins
    ordered = sorted(newest_member.items(), key=lambda kv: kv[1], reverse=True)
    labels = [_truncate(qualifying[idx].hypothesis, BANLIST_TRUNCATE)
              for _, idx in ordered]
    return labels[:BANLIST_CAP]


def adjacent_roles(role: str, roles: list[str]) -> list[str]:
    """The two neighbors of the role in the fixed role list order, wrapping."""
    if role not in roles or len(roles) < 2:
        return []
    i = roles.index(role)
    neighbors = [roles[(i - 1) % len(roles)], roles[(i + 1) % len(roles)]]
    return [r for r in dict.fromkeys(neighbors) if r != role]


def _recent_slice(role: str, roles: list[str], rows: list[TrialRecord]
                  ) -> list[TrialRecord]:
    """Newest-first recent activity with own-role and adjacent-role coverage.

    Starts from the last RECENT_N submitted non-abort rows; when the role's
    newest own row or the newest adjacent-role row fell off the window, it
    replaces the oldest row so the slice size never grows.
    """
    pool = [r for r in rows if r.status not in (HARNESS_ABORT, BASELINE)]
    slice_rows = pool[-RECENT_N:]
    chosen = {r.exp_id for r in slice_rows}

    must_include: list[TrialRecord] = []
    own = [r for r in pool if r.role == role]
    if own:
        must_include.append(own[-1])
    adjacents = adjacent_roles(role, roles)
    adj = [r for r in pool if r.role in adjacents]
    if adj:
        must_include.append(adj[-1])

    for extra in must_include:
        if extra.exp_id in chosen:
            continue
        for i, existing in enumerate(slice_rows):
            if existing.exp_id not in {m.exp_id for m in must_include}:
                chosen.discard(existing.exp_id)
                slice_rows[i] = extra
                chosen.add(extra.exp_id)
                break
        slice_rows.sort(key=lambda r: exp_index(r.exp_id))
    return list(reversed(slice_rows))


def _knowledge_lines(rows: list[TrialRecord]) -> list[str]:
    """One line per kept branch: hypothesis -> status/delta, plus fan-out."""
    children: dict[str, int] = {}
    for r in rows:
        if r.parent_exp:
            children[r.parent_exp] = children.get(r.parent_exp, 0) + 1
    lines = []
    for r in rows:
        if r.status not in (BASELINE, KEEP):
            continue
        delta = "" if r.delta is None else f" Δ={fmt_delta(r.delta)}"
        fan = children.get(r.exp_id, 0)
        lines.append(f"{r.exp_id} [{r.status}{delta}] "
                     f"{_truncate(r.hypothesis, KNOWLEDGE_TRUNCATE)} "
                     f"({fan} follow-ups)")
    return lines


def render_context(role: str, snapshot: BoardSnapshot, *, session_ts: str,
                   roles: list[str], metric_name: str,
                   lineage_enabled: bool = True,
                   workdir_summary: str = "") -> LineageContext:
    """Build the session context; pure in (role, snapshot, arguments)."""
    best = snapshot.best()
    if best is None:
        raise LineageError("blackboard has no baseline row")
    if not lineage_enabled:
        return LineageContext(session_ts=session_ts, role=role,
                              metric_name=metric_name, best=best,
                              lineage_enabled=False,
                              workdir_summary=workdir_summary)

    keeps = snapshot.keeps()
    reverse = snapshot.direction == "higher"
    leaderboard = sorted(keeps, key=lambda r: r.score,
                         reverse=reverse)[:LEADERBOARD_N]
    return LineageContext(
        session_ts=session_ts, role=role, metric_name=metric_name, best=best,
        lineage_enabled=True, workdir_summary=workdir_summary,
        leaderboard=leaderboard,
        knowledge=_knowledge_lines(snapshot.rows),
        recent=_recent_slice(role, roles, snapshot.rows),
        saturation=saturation_signal(role, snapshot),
        banlist=update_banlist(role, snapshot),
    )


def gate_read(path: str, blackboard_dir: str | None = None,
              lineage_enabled: bool = True) -> bool:
    """Harness-level read gate: False means the read is rejected.

    With lineage on, everything is allowed. Under no-lineage, any read
    touching blackboard artifacts (by name, by directory, or by residing
    under the blackboard directory) is rejected; other files stay readable.
    """
    if lineage_enabled:
        return True
    normalized = os.path.normpath(path)
    parts = normalized.replace("\\", "/").split("/")
    if parts and parts[-1] in BLACKBOARD_FILE_NAMES:
        return False
    if any(part in BLACKBOARD_DIR_NAMES for part in parts):
        return False
    if blackboard_dir:
        board = os.path.normpath(os.path.abspath(blackboard_dir))
        if os.path.abspath(normalized).startswith(board + os.sep):
            return False
        if os.path.abspath(normalized) == board:
            return False
    return True
