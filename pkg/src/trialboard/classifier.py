"""Maps a measured trial outcome into the status taxonomy and signed delta.

Precedence is total and fixed. Checks run in this order, first hit wins:

    1. preflight syntax failure      -> preflight_crash
    2. preflight size failure        -> size_blocked
    3. crashed run                   -> crash
    4. post-run artifact over cap    -> size_blocked   (score retained)
    5. train_s > budget + tolerance  -> train_budget_overrun
    6. eval_s > eval budget          -> eval_budget_overrun   (no tolerance)
    7. mean accuracy < gate          -> disqualified   (score retained)
    8. strictly better than best     -> keep, else discard

A trial that reaches step 8 is a valid measured run. Inconsistent inputs
(a crashed outcome carrying a score, or a valid run without one) signal a
harness bug and map to harness_abort rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blackboard import (
    CRASH,
    DISCARD,
    DISQUALIFIED,
    EVAL_BUDGET_OVERRUN,
    HARNESS_ABORT,
    KEEP,
    PREFLIGHT_CRASH,
    SIZE_BLOCKED,
    TRAIN_BUDGET_OVERRUN,
    is_improvement,
)
from .environment import PreflightResult, TaskSpec, TrialOutcome


@dataclass(frozen=True)
class ClassifiedTrial:
    """Status plus the retained score/delta and any gate report."""

    status: str
    score: float | None
    delta: float | None
    gate_report: str | None = None


def compute_delta(score: float, prior_best: float, direction: str) -> float:
    """Signed delta in raw units: score minus prior best.

    Negative means improvement when lower is better; positive means
    improvement when higher is better. The direction travels alongside the
    delta in the task spec rather than being folded into the sign.
    """
    del direction  # recorded by the caller; the delta itself is raw
    return score - prior_best


def favorable(delta: float, direction: str) -> bool:
    return delta < 0 if direction == "lower" else delta > 0


def classify(outcome: TrialOutcome | None, task: TaskSpec, prior_best: float,
             preflight: PreflightResult) -> ClassifiedTrial:
    """Apply the precedence ladder to one trial; pure and total."""
    if not preflight.ok:
        if preflight.kind == "syntax":
            return ClassifiedTrial(PREFLIGHT_CRASH, None, None)
        return ClassifiedTrial(SIZE_BLOCKED, None, None)

    if outcome is None:
        return ClassifiedTrial(HARNESS_ABORT, None, None,
                               gate_report="missing outcome for passed preflight")

    score = outcome.score
    delta = (compute_delta(score, prior_best, task.direction)
             if score is not None else None)

    if outcome.crashed:
        if score is not None:
            return ClassifiedTrial(HARNESS_ABORT, None, None,
                                   gate_report="crashed outcome carries a score")
        return ClassifiedTrial(CRASH, None, None)

    if outcome.artifact_bytes > task.size_cap_bytes:
        return ClassifiedTrial(SIZE_BLOCKED, score, delta)

    if outcome.train_s > task.train_budget_s + task.train_tolerance_s:
        return ClassifiedTrial(TRAIN_BUDGET_OVERRUN, score, delta)

    if outcome.eval_s > task.eval_budget_s:
        return ClassifiedTrial(EVAL_BUDGET_OVERRUN, score, delta)

    if task.accuracy_gate is not None and outcome.accuracy is not None:
        if outcome.accuracy < task.accuracy_gate:
            report = (f"accuracy {outcome.accuracy:.6f} < "
                      f"gate {task.accuracy_gate:.6f}")
            return ClassifiedTrial(DISQUALIFIED, score, delta, gate_report=report)
        gate_report = (f"accuracy {outcome.accuracy:.6f} >= "
                       f"gate {task.accuracy_gate:.6f}")
    else:
        gate_report = None

    if score is None:
        return ClassifiedTrial(HARNESS_ABORT, None, None,
                               gate_report="valid run without a score")

    if is_improvement(score, prior_best, task.direction):
        return ClassifiedTrial(KEEP, score, delta, gate_report=gate_report)
    return ClassifiedTrial(DISCARD, score, delta, gate_report=gate_report)
