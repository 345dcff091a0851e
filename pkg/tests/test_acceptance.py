"""System acceptance gate: ten criteria, one printed pass line each.

Every test prints `criterion NN: PASS — …` on success; a failed assertion
is the corresponding fail line. Stated tolerances and runtime bounds are
asserted, not just documented.
"""

import json
import os
import signal
import subprocess
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from oracles import (
    oracle_cluster_replay,
    oracle_entropy_effective,
    oracle_running_extremum,
)

from trialboard.audit import (
    best_so_far,
    cluster_online,
    effective_clusters,
    embed_texts,
)
from trialboard.blackboard import (
    BASELINE,
    DISCARD,
    KEEP,
    Blackboard,
    TrialRecord,
    ValidationError,
    best_over,
    build_tree,
)
from trialboard.classifier import classify
from trialboard.cli import main as cli_main
from trialboard.environment import (
    PreflightResult,
    Recipe,
    TaskSpec,
    TrialOutcome,
    get_environment,
)
from trialboard.lineage import fmt_delta, fmt_metric
from trialboard.proposer import Proposal, SessionBudget, ToolSurface
from trialboard.supervisor import (
    RoleSpec,
    RunConfig,
    bootstrap_from_baseline,
    measure_throughput,
    parallel_efficiency,
    run,
)

WORDS = ("warmup", "lr", "decay", "cache", "fused", "kernel", "head", "tied",
         "scale", "residual", "drop", "clip", "batch", "merge", "token",
         "width", "depth", "loss", "gate", "eval", "pack", "step", "cosine",
         "linear", "schedule", "momentum", "sparse", "dense", "norm", "bias")


def fresh_run_board(root: Path, env_id: str = "sizecap") -> Blackboard:
    env = get_environment(env_id)
    board = Blackboard(root, direction=env.task.direction)
    bootstrap_from_baseline(board, env, env.baseline_score)
    return board


def sizecap_config(board: Blackboard, n_roles: int = 4, **kw) -> RunConfig:
    names = ["arch", "data", "optim", "infer", "r4", "r5", "r6", "r7", "r8",
             "r9"][:n_roles]
    defaults = dict(
        env_id="sizecap",
        roles=[RoleSpec(name=n, policy="hill_climb") for n in names],
        deadline_hours=1000.0, no_improvement_hours=1000.0,
        eval_slots=n_roles, seed=0, blackboard_dir=str(board.root))
    defaults.update(kw)
    return RunConfig(**defaults)


def _passed(n: int, started: float, bound_s: float, detail: str) -> None:
    elapsed = time.monotonic() - started
    assert elapsed < bound_s, f"criterion {n} took {elapsed:.1f}s (> {bound_s}s)"
    print(f"criterion {n:02d}: PASS — {detail} ({elapsed:.2f}s)")


# ── criterion 1: status taxonomy boundary table ──────────────────────────────


LOWER = TaskSpec(metric_name="val_bpb", direction="lower",
                 train_budget_s=600.0, train_tolerance_s=5.0,
                 eval_budget_s=600.0, size_cap_bytes=16_000_000)
HIGHER = TaskSpec(metric_name="core_score", direction="higher",
                  train_budget_s=600.0, train_tolerance_s=5.0,
                  eval_budget_s=600.0, size_cap_bytes=16_000_000)
GATED = TaskSpec(metric_name="wallclock_s", direction="lower",
                 train_budget_s=600.0, train_tolerance_s=5.0,
                 eval_budget_s=600.0, size_cap_bytes=16_000_000,
                 accuracy_gate=0.96)


def trial(score=1.0, acc=None, train=500.0, eval_s=100.0,
          size=15_000_000, crashed=False):
    return TrialOutcome(score=score, accuracy=acc, train_s=train,
                        eval_s=eval_s, artifact_bytes=size, crashed=crashed,
                        crash_excerpt="SimError: x at phase train"
                        if crashed else None, phase_timings={})


OK = PreflightResult.passed()

# (label, task, outcome, preflight, prior_best, expected status)
STATUS_TABLE = [
    ("syntax preflight", LOWER, None, PreflightResult.syntax("nan"), 1.081,
     "preflight_crash"),
    ("size preflight", LOWER, None, PreflightResult.size(2056), 1.081,
     "size_blocked"),
    ("crash", LOWER, trial(score=None, crashed=True), OK, 1.081, "crash"),
    ("crash beats size", LOWER,
     trial(score=None, crashed=True, size=17_000_000), OK, 1.081, "crash"),
    ("crash with score is harness bug", LOWER,
     trial(score=1.0, crashed=True), OK, 1.081, "harness_abort"),
    ("missing outcome after preflight", LOWER, None, OK, 1.081,
     "harness_abort"),
    ("valid without score", LOWER, trial(score=None), OK, 1.081,
     "harness_abort"),
    ("size one over cap", LOWER, trial(size=16_000_001), OK, 1.081,
     "size_blocked"),
    ("size exactly at cap", LOWER, trial(size=16_000_000, score=1.0), OK,
     1.081, "keep"),
    ("size just under cap", LOWER, trial(size=15_999_999, score=1.0), OK,
     1.081, "keep"),
    ("size beats train overrun", LOWER,
     trial(size=16_000_001, train=700.0), OK, 1.081, "size_blocked"),
    ("train at tolerance 605.0", LOWER, trial(train=605.0, score=1.0), OK,
     1.081, "keep"),
    ("train over tolerance 605.1", LOWER, trial(train=605.1), OK, 1.081,
     "train_budget_overrun"),
    ("train far over", LOWER, trial(train=900.0), OK, 1.081,
     "train_budget_overrun"),
    ("train under budget", LOWER, trial(train=599.9, score=1.0), OK, 1.081,
     "keep"),
    ("train beats eval overrun", LOWER, trial(train=605.1, eval_s=700.0), OK,
     1.081, "train_budget_overrun"),
    ("eval at budget", LOWER, trial(eval_s=600.0, score=1.0), OK, 1.081,
     "keep"),
    ("eval zero tolerance", LOWER, trial(eval_s=600.1), OK, 1.081,
     "eval_budget_overrun"),
    ("eval epsilon over", LOWER, trial(eval_s=600.000001), OK, 1.081,
     "eval_budget_overrun"),
    ("eval under budget", LOWER, trial(eval_s=599.9, score=1.0), OK, 1.081,
     "keep"),
    ("gate fails at 0.959560", GATED,
     trial(score=20.0, acc=0.959560), OK, 26.356, "disqualified"),
    ("gate passes at 0.960080", GATED,
     trial(score=20.0, acc=0.960080), OK, 26.356, "keep"),
    ("gate boundary equality passes", GATED,
     trial(score=20.0, acc=0.96), OK, 26.356, "keep"),
    ("gate fail beats keep", GATED,
     trial(score=1.0, acc=0.90), OK, 26.356, "disqualified"),
    ("gate missing accuracy skips check", GATED,
     trial(score=20.0, acc=None), OK, 26.356, "keep"),
    ("no gate ignores accuracy", LOWER,
     trial(score=1.0, acc=0.10), OK, 1.081, "keep"),
    ("strict improvement lower", LOWER, trial(score=1.0809), OK, 1.081,
     "keep"),
    ("equal score is discard", LOWER, trial(score=1.081), OK, 1.081,
     "discard"),
    ("worse score is discard", LOWER, trial(score=1.09), OK, 1.081,
     "discard"),
    ("strict improvement higher", HIGHER, trial(score=0.17), OK, 0.1618,
     "keep"),
    ("equal higher is discard", HIGHER, trial(score=0.1618), OK, 0.1618,
     "discard"),
    ("lower score under higher metric", HIGHER, trial(score=0.15), OK, 0.1618,
     "discard"),
    ("over-cap retains measured score", LOWER,
     trial(score=1.072431, size=16_002_056), OK, 1.081, "size_blocked"),
    ("overrun retains measured score", LOWER,
     trial(score=1.05, train=605.1), OK, 1.081, "train_budget_overrun"),
]


def test_criterion_01_status_taxonomy():
    started = time.monotonic()
    assert len(STATUS_TABLE) >= 30
    for label, task, outcome, preflight, prior, want in STATUS_TABLE:
        got = classify(outcome, task, prior, preflight=preflight)
        assert got.status == want, (
            f"{label}: expected {want}, got {got.status}")
        if outcome is not None and not outcome.crashed and preflight.ok:
            if want in ("size_blocked", "train_budget_overrun",
                        "eval_budget_overrun", "disqualified", "keep",
                        "discard") and outcome.score is not None:
                assert got.score == outcome.score, label
                assert got.delta == pytest.approx(outcome.score - prior), label
        if want in ("crash", "preflight_crash"):
            assert got.score is None and got.delta is None, label
    _passed(1, started, 1.0, f"{len(STATUS_TABLE)} boundary cases exact")


# ── criterion 2: efficiency equation ─────────────────────────────────────────


def test_criterion_02_parallel_efficiency(tmp_path):
    started = time.monotonic()

    assert parallel_efficiency(18.15, 10, 2.26) == pytest.approx(0.803,
                                                                 abs=0.005)
    assert parallel_efficiency(16.79, 10, 2.26) == pytest.approx(0.743,
                                                                 abs=0.005)

    single = fresh_run_board(tmp_path / "one")
    summary_1 = run(sizecap_config(single, n_roles=1, eval_slots=1,
                                   max_trials=15))
    ref = summary_1["telemetry"]
    assert measure_throughput(ref)["eta"] == 1.0

    crowd = fresh_run_board(tmp_path / "ten")
    summary_10 = run(sizecap_config(crowd, n_roles=10, eval_slots=1,
                                    max_trials=40))
    result = measure_throughput(summary_10["telemetry"], reference=ref)
    assert 0.0 < result["eta"] <= 1.0
    _passed(2, started, 5.0,
            f"eta 0.803/0.743 within ±0.005; contended eta={result['eta']:.3f}")


# ── criterion 3: entropy audit oracle ────────────────────────────────────────


def random_texts(rng, n):
    texts = []
    for _ in range(n):
        words = rng.choice(len(WORDS), size=int(rng.integers(3, 9)))
        texts.append(" ".join(WORDS[w] for w in words))
    return texts


def test_criterion_03_entropy_oracle():
    started = time.monotonic()
    for seed in range(100):
        rng = np.random.default_rng([31, seed])
        texts = random_texts(rng, int(rng.integers(2, 26)))
        model = cluster_online(embed_texts(texts).matrix)
        oracle_assign, oracle_sizes = oracle_cluster_replay(texts, 0.30)
        assert model.assignments == oracle_assign, f"seed {seed}"
        assert model.sizes == oracle_sizes, f"seed {seed}"
        assert effective_clusters(model.sizes) == pytest.approx(
            oracle_entropy_effective(oracle_sizes), abs=1e-12), f"seed {seed}"
    for k in range(1, 9):
        assert effective_clusters([6] * k) == pytest.approx(k, abs=1e-12)
    _passed(3, started, 10.0,
            "100 corpora match the exact replay oracle; uniform k exact")


# ── criterion 4: frontier monotonicity ───────────────────────────────────────


def synth_trace(rng) -> tuple[list[TrialRecord], str, int]:
    """A classifier-faithful random trace: keep iff strictly better."""
    direction = "lower" if rng.random() < 0.5 else "higher"
    better = (lambda a, b: a < b) if direction == "lower" else (
        lambda a, b: a > b)
    n = int(rng.integers(5, 40))
    best = float(rng.uniform(0.5, 2.0))
    records = [TrialRecord(exp_id="exp_000", status=BASELINE, score=best)]
    keeps = 0
    for i in range(1, n):
        if rng.random() < 0.15:
            records.append(TrialRecord(exp_id=f"exp_{i:03d}", status="crash",
                                       score=None))
            continue
        score = round(float(best + rng.normal(0, 0.2)), 6)
        if better(score, best):
            status, best, keeps = KEEP, score, keeps + 1
        else:
            status = DISCARD
        records.append(TrialRecord(exp_id=f"exp_{i:03d}", status=status,
                                   score=score))
    return records, direction, keeps


def test_criterion_04_frontier_monotone_against_oracle():
    started = time.monotonic()
    for seed in range(1000):
        rng = np.random.default_rng([41, seed])
        records, direction, keeps = synth_trace(rng)
        frontier = best_so_far(records, direction)

        scores = [r.score if r.status in (BASELINE, KEEP, DISCARD) else None
                  for r in records]
        assert frontier == oracle_running_extremum(scores, direction)

        values = [v for _, v in frontier]
        if direction == "lower":
            assert all(a >= b for a, b in zip(values, values[1:]))
        else:
            assert all(a <= b for a, b in zip(values, values[1:]))

        drops = sum(1 for a, b in zip(values, values[1:]) if a != b)
        assert drops == keeps  # keep rows and frontier moves, one-to-one
    _passed(4, started, 5.0,
            "1000 traces: oracle equality, monotone, keeps == frontier moves")


# ── criterion 5: no-lineage ablation ─────────────────────────────────────────


def eight_windows(text: str):
    for i in range(len(text) - 7):
        yield text[i:i + 8]


def test_criterion_05_no_lineage_withholds_history(tmp_path):
    started = time.monotonic()
    board = fresh_run_board(tmp_path / "abl")
    run(sizecap_config(board, max_trials=50, no_lineage=True, seed=3))
    rows = board.read_all()
    assert len(rows) >= 51

    contexts = [e for e in board.read_events()
                if e.get("kind") == "session_context"]
    assert contexts
    for event in contexts:
        detail = event["detail"]
        text = (board.contexts_dir / detail["file"]).read_text(
            encoding="utf-8")
        assert "Leaderboard" not in text
        assert "Recent Activity" not in text
        body = "\n".join(l for l in text.splitlines()
                         if not l.startswith("Current best:"))
        for r in rows[:detail["n_rows"]]:
            fragments = [r.hypothesis]
            if r.score is not None:
                fragments += [fmt_metric(r.score), f"{r.score:.6f}"]
            if r.delta is not None:
                fragments += [fmt_delta(r.delta), f"{r.delta:.6f}"]
            for fragment in fragments:
                for window in eight_windows(fragment):
                    assert window not in body, (
                        f"leak {window!r} from {r.exp_id} in {detail['file']}")

    env = get_environment("sizecap")
    secret = tmp_path / "notes.txt"
    secret.write_text("offline reference material", encoding="utf-8")
    blocked = ToolSurface(env, SessionBudget(), env.default_recipe(),
                          lineage_enabled=False,
                          blackboard_dir=str(board.root),
                          workdir={str(secret): "offline reference material"})
    assert blocked.read(str(board.results_path)) is None
    assert blocked.read(str(board.best_path)) is None
    assert blocked.read(str(board.root / "events.jsonl")) is None
    assert blocked.read(str(secret)) == "offline reference material"

    allowed = ToolSurface(env, SessionBudget(), env.default_recipe(),
                          lineage_enabled=True,
                          blackboard_dir=str(board.root),
                          workdir={str(board.results_path): "rows"})
    assert allowed.read(str(board.results_path)) == "rows"
    _passed(5, started, 5.0,
            f"{len(contexts)} ablated contexts leak nothing; reads gated")


# ── criteria 6 and 10 share the matched-pair sweep ───────────────────────────


def _paired_run(root: Path, seed: int, no_lineage: bool) -> dict:
    board = fresh_run_board(root)
    run(sizecap_config(board, max_trials=200, seed=seed,
                       no_lineage=no_lineage))
    rows = board.read_all()
    return {
        "dir": root,
        "keeps": sum(1 for r in rows if r.status == KEEP),
        "best": board.best().score,
        "rows": len(rows),
    }


@pytest.fixture(scope="module")
def lineage_pairs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pairs")
    started = time.monotonic()
    pairs = []
    for seed in range(10):
        lin = _paired_run(base / f"lin_{seed}", seed, False)
        abl = _paired_run(base / f"abl_{seed}", seed, True)
        pairs.append((lin, abl))
    return pairs, time.monotonic() - started


def test_criterion_06_lineage_effect(lineage_pairs):
    started = time.monotonic()
    pairs, sweep_elapsed = lineage_pairs
    more_keeps = sum(1 for lin, abl in pairs if lin["keeps"] > abl["keeps"])
    best_never_worse = sum(1 for lin, abl in pairs
                           if lin["best"] <= abl["best"] + 1e-12)
    assert more_keeps >= 8, f"lineage won keeps in only {more_keeps}/10 pairs"
    assert best_never_worse == 10
    elapsed = sweep_elapsed + (time.monotonic() - started)
    assert elapsed < 60.0
    print(f"criterion 06: PASS — more keeps in {more_keeps}/10 pairs, "
          f"final best never worse ({elapsed:.2f}s)")


# ── criterion 7: termination rules ───────────────────────────────────────────


class ImproveOncePolicy:
    """One guaranteed keep (a pure-win flag), then silence."""

    name = "improve_once"

    def first(self, context, tools, rng):
        if context.best.exp_id != "exp_000":
            return None
        base = tools.base_recipe()
        recipe = Recipe(knobs=list(base.knobs), flags=["fused_qkv"],
                        hypothesis="enable fused projection",
                        owner_role=context.role)
        return Proposal(recipe=recipe, hypothesis="enable fused projection",
                        expected_delta=-0.0008, parent_exp="exp_000",
                        declared_role=context.role)

    def follow_up(self, context, tools, prior, result, rng):
        return None


class SilentPolicy:
    name = "silent"

    def first(self, context, tools, rng):
        return None

    def follow_up(self, context, tools, prior, result, rng):
        return None


class GreedyFlagPolicy:
    """Toggle on a known score-improving flag each session; keeps never dry up."""

    name = "greedy_flag"
    WINNERS = ("fused_qkv", "rope_cache", "residual_scale")

    def first(self, context, tools, rng):
        base = tools.base_recipe()
        missing = [f for f in self.WINNERS if f not in base.flags]
        if not missing:
            return None
        recipe = Recipe(knobs=list(base.knobs),
                        flags=list(base.flags) + [missing[0]],
                        hypothesis=f"enable {missing[0]}",
                        owner_role=context.role)
        return Proposal(recipe=recipe, hypothesis=f"enable {missing[0]}",
                        expected_delta=-0.0005, parent_exp=context.best.exp_id,
                        declared_role=context.role)

    def follow_up(self, context, tools, prior, result, rng):
        return None


def test_criterion_07_termination_rules(tmp_path):
    started = time.monotonic()

    # No keeps: the stop lands at exactly start + grace on the virtual clock.
    idle = fresh_run_board(tmp_path / "idle")
    summary = run(sizecap_config(idle, n_roles=2, no_improvement_hours=0.1,
                                 deadline_hours=10.0),
                  policy_factory=lambda spec, i: SilentPolicy())
    assert summary["stop_reason"] == "no-improvement"
    assert summary["stop_due_s"] == 360.0
    assert summary["stopped_at_s"] == 360.0

    # A keep at t resets the grace deadline to t + grace.
    reset = fresh_run_board(tmp_path / "reset")
    summary = run(sizecap_config(reset, n_roles=1, eval_slots=1,
                                 no_improvement_hours=0.5,
                                 deadline_hours=10.0),
                  policy_factory=lambda spec, i: ImproveOncePolicy())
    timeline = summary["telemetry"].keeps_timeline
    assert len(timeline) == 1
    t_keep = timeline[0][0]
    assert t_keep > 0
    assert summary["stop_reason"] == "no-improvement"
    assert summary["stop_due_s"] == pytest.approx(t_keep + 1800.0, abs=1e-6)
    assert summary["stopped_at_s"] == pytest.approx(summary["stop_due_s"],
                                                    abs=1e-6)

    # The hard deadline fires even while keeps are still flowing.
    busy = fresh_run_board(tmp_path / "busy")
    summary = run(sizecap_config(busy, n_roles=1, eval_slots=1,
                                 deadline_hours=0.2,
                                 no_improvement_hours=10.0),
                  policy_factory=lambda spec, i: GreedyFlagPolicy())
    rows = busy.read_all()
    assert any(r.status == KEEP for r in rows)
    assert summary["stop_reason"] == "deadline"
    assert summary["stop_due_s"] == pytest.approx(720.0)
    assert summary["stopped_at_s"] >= 720.0
    _passed(7, started, 1.0,
            "grace exact, keep resets grace, deadline overrides keeps")


# ── criterion 8: concurrency safety ──────────────────────────────────────────


RUNNER = r'''
import sys
from trialboard.blackboard import Blackboard
from trialboard.environment import get_environment
from trialboard.supervisor import (RoleSpec, RunConfig,
                                   bootstrap_from_baseline, run)

board_dir = sys.argv[1]
env = get_environment("sizecap")
board = Blackboard(board_dir, direction=env.task.direction)
bootstrap_from_baseline(board, env, env.baseline_score)
roles = [RoleSpec(n, "hill_climb") for n in ("arch", "data", "optim", "infer")]
cfg = RunConfig(env_id="sizecap", roles=roles, deadline_hours=200000.0,
                no_improvement_hours=100000.0, seed=5, max_trials=100000,
                blackboard_dir=board_dir)
print("ready", flush=True)
run(cfg)
'''


def test_criterion_08_concurrent_appends_and_resume(tmp_path):
    started = time.monotonic()

    board = fresh_run_board(tmp_path / "many")
    barrier = threading.Barrier(10)
    failures: list[Exception] = []

    def writer(idx: int) -> None:
        rng = np.random.default_rng([81, idx])
        barrier.wait()
        for i in range(50):
            score = round(1.081 - float(rng.uniform(0, 0.1)), 6)
            record = TrialRecord(
                role=f"w{idx}", hypothesis=f"worker {idx} move {i}",
                parent_exp="exp_000", status=KEEP, score=score,
                delta=-0.001, timestamp="2026-01-01T00:00:01Z")
            try:
                board.append_trial(record)
            except ValidationError:
                board.append_trial(replace(record, status=DISCARD))
            except Exception as exc:  # pragma: no cover
                failures.append(exc)
                return

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures

    rows = board.read_all()
    assert len(rows) == 501  # baseline + 10 workers x 50 appends
    ids = [r.exp_id for r in rows]
    assert ids == [f"exp_{i:03d}" for i in range(501)]
    assert len(set(ids)) == 501
    build_tree(rows)  # raises on a dangling parent or cycle
    oracle_best = best_over(rows, board.direction)
    stored = board.best()
    assert (stored.exp_id, stored.score) == (oracle_best.exp_id,
                                             oracle_best.score)

    # SIGKILL mid-run, then resume: every committed byte survives.
    board_dir = tmp_path / "killed"
    envv = dict(os.environ)
    envv["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src")
    proc = subprocess.Popen([sys.executable, "-c", RUNNER, str(board_dir)],
                            stdout=subprocess.PIPE, text=True, env=envv)
    assert proc.stdout.readline().strip() == "ready"
    victim = Blackboard(board_dir, direction="lower")
    deadline = time.time() + 20
    while time.time() < deadline:
        if victim.exists() and len(victim.read_all()) >= 12:
            break
        time.sleep(0.05)
    proc.send_signal(signal.SIGKILL)
    proc.wait(timeout=10)

    committed = victim.results_path.read_bytes()
    rows_before = victim.read_all()
    assert len(rows_before) >= 12

    cfg = RunConfig(
        env_id="sizecap",
        roles=[RoleSpec(n, "hill_climb")
               for n in ("arch", "data", "optim", "infer")],
        deadline_hours=200000.0, no_improvement_hours=100000.0, seed=5,
        max_trials=10, blackboard_dir=str(board_dir))
    run(cfg, resume=True)

    after = victim.results_path.read_bytes()
    complete_prefix = committed[: committed.rfind(b"\n") + 1]
    assert after.startswith(complete_prefix)
    parsed = victim.read_all()
    assert len(parsed) == len(rows_before) + 10
    build_tree(parsed)
    assert victim.best().exp_id == best_over(parsed, "lower").exp_id
    _passed(8, started, 30.0,
            "500 racing appends consistent; kill-and-resume lossless")


# ── criterion 9: budget-headroom coupling ────────────────────────────────────


def test_criterion_09_fast_path_recovers_headroom():
    started = time.monotonic()
    env = get_environment("headroom")
    rng = np.random.default_rng(91)
    wins = 0
    for _ in range(20):
        knobs = [float(rng.uniform(lo, hi)) for lo, hi in env.knob_bounds]
        plain = env.evaluate(Recipe(knobs=knobs, flags=[]))
        fast = env.evaluate(Recipe(knobs=knobs, flags=["fast_path"]))
        assert not plain.crashed and not fast.crashed
        if fast.score > plain.score:  # higher is better on this preset
            wins += 1
    assert wins == 20
    _passed(9, started, 1.0, "fast path strictly improves 20/20 knob vectors")


# ── criterion 10: trace replayability ────────────────────────────────────────


def test_criterion_10_audit_and_replay(lineage_pairs, capsys):
    started = time.monotonic()
    pairs, _sweep = lineage_pairs
    board_dir = pairs[0][0]["dir"]

    assert cli_main(["audit", str(board_dir)]) == 0
    payload = json.loads(
        (board_dir / "results.audit.json").read_text(encoding="utf-8"))
    for key in ("rows", "contexts", "effective_clusters", "top_cluster_share",
                "near_dup_rate", "cross_ctx_parent", "cross_ctx_keep",
                "shared_clusters", "empty_hypotheses"):
        assert key in payload
    for name in ("cross_ctx_parent", "cross_ctx_keep"):
        numer, denom = payload[name]
        assert denom > 0
        assert 0.0 <= numer / denom <= 1.0

    assert cli_main(["replay", "--blackboard-dir", str(board_dir)]) == 0
    out = capsys.readouterr().out
    assert "0 mismatches" in out
    contexts = int(out.strip().splitlines()[-1].split()[0])
    assert contexts > 0
    _passed(10, started, 10.0,
            f"Table-shaped audit over the trace; {contexts} contexts "
            "replay byte-identical")
