"""The pluggable agent boundary.

Scripted role-conditioned policies drive closed-loop simulation; an
external-process adapter speaks newline-delimited JSON over a child's
standard streams so real agents can be attached at the same seam.

Every policy only ever edits the knobs and flags its role owns (index mod
n_roles partitioning). Sessions are bounded by a tool-turn cap and a submit
cap; a second submit happens only when the harness-level follow-up predicate
fires on the first result: a size block, a budget overrun, or a keep whose
delta is large enough to suggest a concrete next edit.
"""

from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass

from .blackboard import CRASH, DISCARD, KEEP, SIZE_BLOCKED
from .environment import Environment, PreflightResult, Recipe
from .lineage import SATURATION_EPS, LineageContext, gate_read

FOLLOW_UP_STATUSES = frozenset({
    "size_blocked", "train_budget_overrun", "eval_budget_overrun",
})
DEFAULT_MAX_TURNS = 200
DEFAULT_MAX_SUBMITS = 2
PROTOCOL_VERSION = 1

_KNOB_HYP = re.compile(r"hill-climb: knob\[(\d+)\] ([+-])= ([0-9.]+)")
_FLAG_HYP = re.compile(r"hill-climb: toggle flag (\w+) (on|off)")


class ProtocolError(Exception):
    """The external child violated the message protocol."""


class BudgetExhausted(Exception):
    """Internal signal: the session ran out of tool turns."""


@dataclass(frozen=True)
class SessionBudget:
    max_turns: int = DEFAULT_MAX_TURNS
    max_submits: int = DEFAULT_MAX_SUBMITS

    def __post_init__(self) -> None:
        if self.max_turns < 1 or self.max_submits < 1:
            raise ValueError("budget caps must be at least 1")


@dataclass
class Proposal:
    recipe: Recipe
    hypothesis: str
    expected_delta: float
    parent_exp: str
    declared_role: str


@dataclass(frozen=True)
class SubmitResult:
    """What the proposer learns back from one submitted trial."""

    exp_id: str
    status: str
    score: float | None
    delta: float | None
    accuracy: float | None = None
    artifact_bytes: int | None = None
    over_by: int | None = None
    crash_excerpt: str | None = None
    gate_report: str | None = None


@dataclass(frozen=True)
class EnvView:
    """The environment metadata a policy may see (never the landscape)."""

    direction: str
    metric_name: str
    knob_bounds: list[tuple[float, float]]
    flag_names: tuple[str, ...]
    size_cap_bytes: int
    bytes_per_param: int
    params_per_width: int

    @classmethod
    def of(cls, env: Environment) -> "EnvView":
        return cls(direction=env.task.direction,
                   metric_name=env.task.metric_name,
                   knob_bounds=[tuple(b) for b in env.knob_bounds],
                   flag_names=tuple(env.flag_names),
                   size_cap_bytes=env.task.size_cap_bytes,
                   bytes_per_param=env.bytes_per_param,
                   params_per_width=env.params_per_width)


class ToolSurface:
    """Turn-counted tool access for one session; submit lives in run_session."""

    def __init__(self, env: Environment, budget: SessionBudget,
                 base_recipe: Recipe, *, lineage_enabled: bool = True,
                 blackboard_dir: str | None = None,
                 workdir: dict[str, str] | None = None):
        self._env = env
        self._budget = budget
        self._base = base_recipe
        self._lineage_enabled = lineage_enabled
        self._blackboard_dir = blackboard_dir
        self._workdir = workdir or {}
        self.turns_used = 0

    def _spend_turn(self) -> None:
        if self.turns_used >= self._budget.max_turns:
            raise BudgetExhausted("tool-turn cap reached")
        self.turns_used += 1

    def base_recipe(self) -> Recipe:
        """The current-best recipe (the session's editable starting point)."""
        return Recipe(knobs=list(self._base.knobs), flags=list(self._base.flags))

    def preflight(self, recipe: Recipe) -> PreflightResult:
        self._spend_turn()
        return self._env.preflight(recipe)

    def project_size(self, recipe: Recipe) -> int:
        self._spend_turn()
        return self._env.project_size(recipe)

    def count_params(self, recipe: Recipe) -> int:
        self._spend_turn()
        return self._env.count_params(recipe)

    def read(self, path: str) -> str | None:
        """Gated file read; returns None when the read gate rejects it."""
        self._spend_turn()
        if not gate_read(path, blackboard_dir=self._blackboard_dir,
                         lineage_enabled=self._lineage_enabled):
            return None
        return self._workdir.get(path, "")


def follow_up_fires(result: SubmitResult) -> bool:
    """Harness-level predicate for allowing a second submit."""
    if result.status in FOLLOW_UP_STATUSES:
        return True
    return (result.status == KEEP and result.delta is not None
            and abs(result.delta) >= SATURATION_EPS)


@dataclass
class SessionOutcome:
    pairs: list[tuple[Proposal, SubmitResult]]
    zero_submit: bool
    turns_used: int


def run_session(policy, context: LineageContext, budget: SessionBudget,
                tools: ToolSurface, submit_fn, rng) -> SessionOutcome:
    """Drive one bounded session: first proposal, optional follow-up."""
    pairs: list[tuple[Proposal, SubmitResult]] = []
    try:
        proposal = policy.first(context, tools, rng)
        while proposal is not None and len(pairs) < budget.max_submits:
            tools._spend_turn()  # a submit is a tool call too
            result = submit_fn(proposal)
            pairs.append((proposal, result))
            if len(pairs) >= budget.max_submits or not follow_up_fires(result):
                break
            proposal = policy.follow_up(context, tools, proposal, result, rng)
    except BudgetExhausted:
        pass
    return SessionOutcome(pairs=pairs, zero_submit=not pairs,
                          turns_used=tools.turns_used)


# ── scripted policies ────────────────────────────────────────────────────────


def _owned(indices_len: int, role_index: int, n_roles: int) -> list[int]:
    return [j for j in range(indices_len) if j % n_roles == role_index]


def _clip(value: float, bounds: tuple[float, float]) -> float:
    return min(max(value, bounds[0]), bounds[1])


def _favorable_sign(direction: str) -> float:
    # expected_delta guess: improvements are negative when lower is better
    return -1.0 if direction == "lower" else 1.0


class HillClimbPolicy:
    """Fixed-step coordinate search over owned knobs with cross-session memory.

    The step size never changes; all adaptation is informational. With
    lineage the policy reads its own newest structured hypotheses from the
    recent slice: a keep extends the same direction, a discard flips it, two
    discards in a row on one knob rotate to the next owned knob, banlisted
    move patterns are vetoed, flags implicated in crash excerpts are avoided,
    and saturation switches the probe to a flag toggle. Without lineage
    there is no history, so every session samples a seeded owned knob and a
    random direction around the current best.
    """

    name = "hill_climb"
    STEP = 0.12

    def __init__(self, role: str, role_index: int, n_roles: int, view: EnvView):
        self.role = role
        self.role_index = role_index
        self.n_roles = n_roles
        self.view = view

    def _owned_knobs(self) -> list[int]:
        return _owned(len(self.view.knob_bounds), self.role_index, self.n_roles)

    def _owned_flags(self) -> list[str]:
        idx = _owned(len(self.view.flag_names), self.role_index, self.n_roles)
        return [self.view.flag_names[i] for i in idx]

    def _own_moves(self, context: LineageContext):
        """Own-role rows, newest first, with parsed knob moves where present."""
        moves = []
        for r in context.recent:
            if r.role != self.role:
                continue
            match = _KNOB_HYP.search(r.hypothesis)
            if match:
                moves.append((r, int(match.group(1)),
                              1.0 if match.group(2) == "+" else -1.0))
            else:
                moves.append((r, None, None))
        return moves

    def _banned(self, context: LineageContext, knob: int, sign: float) -> bool:
        pattern = f"knob[{knob}] {'+' if sign > 0 else '-'}="
        return any(pattern in item for item in context.banlist)

    def _rotate(self, owned: list[int], knob: int) -> int:
        if knob in owned:
            return owned[(owned.index(knob) + 1) % len(owned)]
        return owned[0]

    def _rng_move(self, owned: list[int], rng) -> tuple[int, float]:
        knob = owned[int(rng.integers(0, len(owned)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return knob, sign

    def _knob_proposal(self, base: Recipe, knob: int, sign: float,
                       parent: str) -> Proposal:
        knobs = list(base.knobs)
        knobs[knob] = _clip(knobs[knob] + sign * self.STEP,
                            self.view.knob_bounds[knob])
        hyp = (f"hill-climb: knob[{knob}] {'+' if sign > 0 else '-'}= "
               f"{self.STEP:.6f}")
        recipe = Recipe(knobs=knobs, flags=list(base.flags), hypothesis=hyp,
                        owner_role=self.role)
        expected = _favorable_sign(self.view.direction) * 0.002
        return Proposal(recipe=recipe, hypothesis=hyp, expected_delta=expected,
                        parent_exp=parent, declared_role=self.role)

    def _flag_proposal(self, base: Recipe, flag: str, parent: str) -> Proposal:
        flags = set(base.flags)
        turning_on = flag not in flags
        flags.symmetric_difference_update({flag})
        hyp = f"hill-climb: toggle flag {flag} {'on' if turning_on else 'off'}"
        recipe = Recipe(knobs=list(base.knobs), flags=sorted(flags),
                        hypothesis=hyp, owner_role=self.role)
        expected = _favorable_sign(self.view.direction) * 0.001
        return Proposal(recipe=recipe, hypothesis=hyp, expected_delta=expected,
                        parent_exp=parent, declared_role=self.role)

    def _crash_tainted(self, context: LineageContext, flag: str) -> bool:
        if any(flag in item for item in context.banlist):
            return True
        return any(flag in (r.notes or "") for r in context.recent
                   if r.status == CRASH)

    def first(self, context: LineageContext, tools: ToolSurface, rng
              ) -> Proposal | None:
        base = tools.base_recipe()
        owned = self._owned_knobs()
        if not owned:
            return None
        parent = context.best.exp_id

        if not context.lineage_enabled:
            knob, sign = self._rng_move(owned, rng)
            return self._knob_proposal(base, knob, sign, parent)

        if context.saturation:
            for flag in self._owned_flags():
                if not self._crash_tainted(context, flag):
                    return self._flag_proposal(base, flag, parent)

        moves = self._own_moves(context)
        if not moves or moves[0][1] is None or moves[0][1] not in owned:
            knob, sign = self._rng_move(owned, rng)
        else:
            last, knob, sign = moves[0]
            if last.status == KEEP:
                pass  # winning direction: press on
            elif last.status == DISCARD:
                run_len = 0
                for r, k, _s in moves:
                    if r.status == DISCARD and k == knob:
                        run_len += 1
                    else:
                        break
                if run_len >= 2:
                    knob = self._rotate(owned, knob)
                    sign = 1.0 if rng.random() < 0.5 else -1.0
                else:
                    sign = -sign
            else:  # crash, size block, overrun: leave this move alone
                knob = self._rotate(owned, knob)
                sign = 1.0 if rng.random() < 0.5 else -1.0
        if self._banned(context, knob, sign):
            knob = self._rotate(owned, knob)
            sign = 1.0 if rng.random() < 0.5 else -1.0
        return self._knob_proposal(base, knob, sign, parent)

    def follow_up(self, context: LineageContext, tools: ToolSurface,
                  prior: Proposal, result: SubmitResult, rng
                  ) -> Proposal | None:
        base = prior.recipe
        if result.status == SIZE_BLOCKED and result.over_by is not None:
            if 0 not in self._owned_knobs():
                return None
            cut = (result.over_by
                   / (self.view.bytes_per_param * self.view.params_per_width)
                   + 0.002)
            knobs = list(base.knobs)
            knobs[0] = _clip(knobs[0] - cut, self.view.knob_bounds[0])
            hyp = f"hill-climb: knob[0] -= {cut:.6f}"
            recipe = Recipe(knobs=knobs, flags=list(base.flags), hypothesis=hyp,
                            owner_role=self.role)
            if tools.project_size(recipe) > self.view.size_cap_bytes:
                return None
            return Proposal(recipe=recipe, hypothesis=hyp,
                            expected_delta=_favorable_sign(self.view.direction) * 0.001,
                            parent_exp=result.exp_id, declared_role=self.role)
        if result.status == KEEP:
            match = _KNOB_HYP.search(prior.hypothesis)
            if not match:
                return None
            knob = int(match.group(1))
            sign = 1.0 if match.group(2) == "+" else -1.0
            return self._knob_proposal(base, knob, sign, result.exp_id)
        return None


class PriorSamplerPolicy:
    """Static seeded prior around the current best; ignores all history."""

    name = "prior_sampler"
    SIGMA = 0.5
    FLAG_PROB = 0.25

    def __init__(self, role: str, role_index: int, n_roles: int, view: EnvView):
        self.role = role
        self.role_index = role_index
        self.n_roles = n_roles
        self.view = view

    def first(self, context: LineageContext, tools: ToolSurface, rng
              ) -> Proposal | None:
        base = tools.base_recipe()
        owned_knobs = _owned(len(self.view.knob_bounds), self.role_index,
                             self.n_roles)
        owned_flags = [self.view.flag_names[i] for i in
                       _owned(len(self.view.flag_names), self.role_index,
                              self.n_roles)]
        parent = context.best.exp_id
        expected = _favorable_sign(self.view.direction) * 0.001
        if owned_flags and rng.random() < self.FLAG_PROB:
            flag = owned_flags[int(rng.integers(0, len(owned_flags)))]
            flags = set(base.flags)
            state = "off" if flag in flags else "on"
            flags.symmetric_difference_update({flag})
            hyp = f"prior-sample: toggle {flag} {state}"
            recipe = Recipe(knobs=list(base.knobs), flags=sorted(flags),
                            hypothesis=hyp, owner_role=self.role)
            return Proposal(recipe, hyp, expected, parent, self.role)
        if not owned_knobs:
            return None
        knob = owned_knobs[int(rng.integers(0, len(owned_knobs)))]
        knobs = list(base.knobs)
        knobs[knob] = _clip(knobs[knob] + float(rng.normal(0.0, self.SIGMA)),
                            self.view.knob_bounds[knob])
        hyp = f"prior-sample: knob[{knob}] -> {knobs[knob]:.6f}"
        recipe = Recipe(knobs=knobs, flags=list(base.flags), hypothesis=hyp,
                        owner_role=self.role)
        return Proposal(recipe, hyp, expected, parent, self.role)

    def follow_up(self, context, tools, prior, result, rng) -> Proposal | None:
        return self.first(context, tools, rng)


class BoundaryRepairPolicy:
    """Probes toward the size cap, then repairs overage within two turns.

    Size is driven by the width knob, so this policy only acts when its
    role owns knob 0; otherwise every session is a deliberate no-op.
    """

    name = "boundary_repair"
    PROBE_STEP = 0.8

    def __init__(self, role: str, role_index: int, n_roles: int, view: EnvView):
        self.role = role
        self.role_index = role_index
        self.n_roles = n_roles
        self.view = view

    def first(self, context: LineageContext, tools: ToolSurface, rng
              ) -> Proposal | None:
        if 0 not in _owned(len(self.view.knob_bounds), self.role_index,
                           self.n_roles):
            return None
        base = tools.base_recipe()
        knobs = list(base.knobs)
        knobs[0] = _clip(knobs[0] + self.PROBE_STEP, self.view.knob_bounds[0])
        hyp = f"boundary-repair: probe width += {self.PROBE_STEP:.6f}"
        recipe = Recipe(knobs=knobs, flags=list(base.flags), hypothesis=hyp,
                        owner_role=self.role)
        expected = _favorable_sign(self.view.direction) * 0.002
        return Proposal(recipe, hyp, expected, context.best.exp_id, self.role)

    def follow_up(self, context, tools, prior, result, rng) -> Proposal | None:
        if result.status != SIZE_BLOCKED or result.over_by is None:
            return None
        cut = (result.over_by
               / (self.view.bytes_per_param * self.view.params_per_width)
               + 0.001)
        knobs = list(prior.recipe.knobs)
        knobs[0] = _clip(knobs[0] - cut, self.view.knob_bounds[0])
        hyp = f"boundary-repair: width -= {cut:.6f}, keep mechanism flags"
        recipe = Recipe(knobs=knobs, flags=list(prior.recipe.flags),
                        hypothesis=hyp, owner_role=self.role)
        if tools.project_size(recipe) > self.view.size_cap_bytes:
            return None
        expected = _favorable_sign(self.view.direction) * 0.001
        return Proposal(recipe, hyp, expected, result.exp_id, self.role)


class DuplicatePronePolicy:
    """Emits near-identical hypotheses; exercises near-duplicate auditing."""

    name = "duplicate_prone"

    def __init__(self, role: str, role_index: int, n_roles: int, view: EnvView):
        self.role = role
        self.role_index = role_index
        self.n_roles = n_roles
        self.view = view

    def first(self, context: LineageContext, tools: ToolSurface, rng
              ) -> Proposal | None:
        owned = _owned(len(self.view.knob_bounds), self.role_index, self.n_roles)
        if not owned:
            return None
        knob = owned[0]
        base = tools.base_recipe()
        knobs = list(base.knobs)
        knobs[knob] = _clip(knobs[knob] + float(rng.uniform(1e-5, 3e-5)),
                            self.view.knob_bounds[knob])
        hyp = f"retry the usual tweak on knob[{knob}]"
        recipe = Recipe(knobs=knobs, flags=list(base.flags), hypothesis=hyp,
                        owner_role=self.role)
        expected = _favorable_sign(self.view.direction) * 0.0001
        return Proposal(recipe, hyp, expected, context.best.exp_id, self.role)

    def follow_up(self, context, tools, prior, result, rng) -> Proposal | None:
        return None


def scripted_policies() -> dict:
    return {
        "hill_climb": HillClimbPolicy,
        "prior_sampler": PriorSamplerPolicy,
        "boundary_repair": BoundaryRepairPolicy,
        "duplicate_prone": DuplicatePronePolicy,
    }


# ── external adapter ─────────────────────────────────────────────────────────


def _recipe_to_wire(recipe: Recipe) -> dict:
    return {"knobs": list(recipe.knobs), "flags": sorted(set(recipe.flags))}


def _recipe_from_wire(data: dict, role: str, hypothesis: str) -> Recipe:
    return Recipe(knobs=[float(k) for k in data["knobs"]],
                  flags=[str(f) for f in data.get("flags", [])],
                  hypothesis=hypothesis, owner_role=role)


class ExternalAdapter:
    """NDJSON child-process boundary: context in, tool calls and submits out.

    The child never receives blackboard paths, only the rendered context
    document and structured metadata, so the no-lineage guarantee holds by
    construction for children without filesystem access and via the read
    gate otherwise.
    """

    def __init__(self, command: list[str], protocol_version: int = PROTOCOL_VERSION):
        self.command = list(command)
        self.protocol_version = protocol_version

    def run_session(self, context: LineageContext, budget: SessionBudget,
                    tools: ToolSurface, submit_fn,
                    transcript: list | None = None) -> SessionOutcome:
        child = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                 stdout=subprocess.PIPE, text=True)
        pairs: list[tuple[Proposal, SubmitResult]] = []

        def send(message: dict) -> None:
            if transcript is not None:
                transcript.append({"dir": "out", **message})
            child.stdin.write(json.dumps(message, sort_keys=True) + "\n")
            child.stdin.flush()

        def receive() -> dict | None:
            line = child.stdout.readline()
            if not line:
                return None
            try:
                message = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"malformed message: {line!r}") from exc
            if transcript is not None:
                transcript.append({"dir": "in", **message})
            return message

        try:
            send({"type": "hello", "version": self.protocol_version,
                  "role": context.role,
                  "budget": {"max_turns": budget.max_turns,
                             "max_submits": budget.max_submits}})
            greeting = receive()
            if not greeting or greeting.get("type") != "hello":
                raise ProtocolError("child failed the handshake")
            send({"type": "context", "text": context.render_text(),
                  "base_recipe": _recipe_to_wire(tools.base_recipe()),
                  "best": {"exp_id": context.best.exp_id,
                           "score": context.best.score}})

            while True:
                if len(pairs) >= budget.max_submits:
                    send({"type": "end", "reason": "submit-cap"})
                    break
                message = receive()
                if message is None:  # child exited or closed its stream
                    break
                kind = message.get("type")
                if kind == "end":
                    break
                if kind == "tool_call":
                    try:
                        result = self._dispatch_tool(message, tools)
                    except BudgetExhausted:
                        send({"type": "end", "reason": "turn-cap"})
                        break
                    send({"type": "tool_result",
                          "id": message.get("id"), "result": result})
                    continue
                if kind == "submit":
                    if not message.get("hypothesis"):
                        raise ProtocolError("submit requires a hypothesis")
                    proposal = Proposal(
                        recipe=_recipe_from_wire(message["recipe"],
                                                 context.role,
                                                 message.get("hypothesis", "")),
                        hypothesis=message.get("hypothesis", ""),
                        expected_delta=float(message.get("expected_delta", 0.0)),
                        parent_exp=message.get("parent_exp",
                                               context.best.exp_id),
                        declared_role=context.role)
                    try:
                        tools._spend_turn()
                    except BudgetExhausted:
                        send({"type": "end", "reason": "turn-cap"})
                        break
                    result = submit_fn(proposal)
                    pairs.append((proposal, result))
                    send({"type": "trial_result", "exp_id": result.exp_id,
                          "status": result.status, "score": result.score,
                          "delta": result.delta, "over_by": result.over_by,
                          "crash_excerpt": result.crash_excerpt,
                          "follow_up_allowed": follow_up_fires(result)})
                    continue
                raise ProtocolError(f"unexpected message type {kind!r}")
        finally:
            try:
                child.stdin.close()
            except OSError:
                pass
            child.wait(timeout=30)
        return SessionOutcome(pairs=pairs, zero_submit=not pairs,
                              turns_used=tools.turns_used)

    @staticmethod
    def _dispatch_tool(message: dict, tools: ToolSurface) -> dict:
        tool = message.get("tool")
        args = message.get("args", {})
        if tool == "read":
            content = tools.read(args.get("path", ""))
            if content is None:
                return {"rejected": True,
                        "reason": "blackboard reads are disabled in this mode"}
            return {"rejected": False, "content": content}
        recipe = _recipe_from_wire(args.get("recipe", {}), "", "")
        if tool == "preflight":
            result = tools.preflight(recipe)
            return {"ok": result.ok, "kind": result.kind, "detail": result.detail}
        if tool == "project_size":
            return {"bytes": tools.project_size(recipe)}
        if tool == "count_params":
            return {"params": tools.count_params(recipe)}
        raise ProtocolError(f"unknown tool {tool!r}")
