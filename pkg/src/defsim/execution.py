"""Plan execution: effector, execution/effects monitoring, adjustment, and
the agent's own lifecycle state (detectability, fail-safe, self-destruct).

Plans run strictly sequentially. Every action's noise raises detectability
(camouflage lowers it by its configured reduction); failures and unmet
effect expectations surface as deviations, which the adjustment ladder
handles: retry while retries remain, then substitute a same-category
action, then hand control back to planning.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from random import Random
from typing import Any, Callable, Optional

from .envsim import EffectDescriptor, Environment, SnapshotToken, clamp01
from .errors import AuthorityNotHeld, ModeForbidden, UnknownEntity
from .planning import (
    ActionCategory,
    ActionSpec,
    BUILTIN_ACTIONS,
    ExecutablePlan,
    RulesOfEngagement,
    action_roe_ok,
)
from .sensing import WorldState, all_hold

DEFAULT_MAX_RETRIES = 2


class ActionStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    DONE = "done"
    FAILED = "failed"
    BLOCKED = "blocked"


class AgentMode(str, Enum):
    NORMAL = "normal"
    FAIL_SAFE = "fail_safe"
    DESTROYED = "destroyed"


class Authority(str, Enum):
    AGENT = "agent"
    REMOTE_C2 = "remote_c2"


@dataclass
class AgentState:
    agent_id: str
    host_id: str
    detectability: float = 0.1
    mode: AgentMode = AgentMode.NORMAL
    authority: Authority = Authority.AGENT


@dataclass
class ExecutionRecord:
    action_id: str
    entry_index: int
    status: ActionStatus
    started_tick: int
    finished_tick: Optional[int] = None
    observed_effects: list[dict[str, Any]] = field(default_factory=list)
    deviations: list[dict[str, Any]] = field(default_factory=list)
    effects_checked: bool = False
    adjusted: bool = False


@dataclass
class Deviation:
    kind: str  # failed | blocked | overdue | effect_unmet
    action_id: str
    entry_index: int
    detail: str = ""
    probability: Optional[float] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "action_id": self.action_id,
            "entry_index": self.entry_index,
            "detail": self.detail,
            "probability": self.probability,
        }


@dataclass
class AdjustmentDecision:
    kind: str  # retry | substitute | replan | abort
    substitute_action_id: Optional[str] = None


@dataclass
class PlanExecution:
    plan: ExecutablePlan
    records: list[ExecutionRecord] = field(default_factory=list)
    cursor: int = 0

    def active_record(self) -> Optional[ExecutionRecord]:
        if self.records and self.records[-1].status is ActionStatus.IN_PROGRESS:
            return self.records[-1]
        return None

    def halted(self) -> bool:
        """A non-done terminal record awaits the adjuster."""
        return bool(
            self.records
            and self.records[-1].status in (ActionStatus.FAILED, ActionStatus.BLOCKED)
            and not self.records[-1].adjusted
        )

    def finished(self) -> bool:
        return (
            self.cursor >= len(self.plan.entries)
            and self.active_record() is None
            and not self.halted()
        )


def _lookup(action_id: str, repertoire: dict[str, ActionSpec]) -> ActionSpec:
    spec = BUILTIN_ACTIONS.get(action_id) or repertoire.get(action_id)
    if spec is None:
        raise KeyError(f"no action spec for {action_id!r}")
    return spec


def resolve_self(effect: EffectDescriptor, host_id: str) -> EffectDescriptor:
    if "$self" in effect.target:
        return replace(effect, target=effect.target.replace("$self", host_id))
    return effect


def execute_step(
    pe: PlanExecution,
    env: Environment,
    agent_state: AgentState,
    tick: int,
    repertoire: dict[str, ActionSpec],
    rng: Random,
    snapshot_store: Optional[list[SnapshotToken]] = None,
    builtin_handlers: Optional[dict[str, Callable[[ActionSpec], tuple[bool, str]]]] = None,
) -> list[ExecutionRecord]:
    """Start or advance the next scheduled entry; one entry per tick.

    Effects apply on completion through env.apply_effect, each drawn
    independently from the seeded stream; an UnknownEntity from a stale
    target marks the record failed. Detectability bookkeeping happens at
    start. A failed record halts the plan until the adjuster rules.
    """
    if agent_state.mode is AgentMode.DESTROYED:
        raise ModeForbidden("agent destroyed")
    if agent_state.authority is not Authority.AGENT:
        raise AuthorityNotHeld("authority held by remote center")
    if not pe.plan.roe_checked:
        raise ModeForbidden("plan released without ROE check")
    if pe.halted():
        return []

    updates: list[ExecutionRecord] = []
    rec = pe.active_record()
    if rec is None:
        if pe.cursor >= len(pe.plan.entries):
            return []
        entry = pe.plan.entries[pe.cursor]
        spec = _lookup(entry.action_id, repertoire)
        if spec.category is ActionCategory.DESTRUCTIVE and agent_state.mode is AgentMode.FAIL_SAFE:
            raise ModeForbidden(f"destructive action {entry.action_id!r} forbidden in fail_safe")
        rec = ExecutionRecord(
            action_id=entry.action_id,
            entry_index=pe.cursor,
            status=ActionStatus.IN_PROGRESS,
            started_tick=tick,
        )
        pe.records.append(rec)
        updates.append(rec)
        if spec.category is ActionCategory.CAMOUFLAGE:
            agent_state.detectability = clamp01(agent_state.detectability - spec.noise)
        else:
            agent_state.detectability = clamp01(agent_state.detectability + spec.noise)
    else:
        spec = _lookup(rec.action_id, repertoire)

    if rec.status is ActionStatus.IN_PROGRESS and tick >= rec.started_tick + spec.duration - 1:
        _complete(pe, rec, spec, env, agent_state, tick, rng, snapshot_store, builtin_handlers)
        pe.cursor = rec.entry_index + 1 if rec.status is ActionStatus.DONE else rec.entry_index
        if rec not in updates:
            updates.append(rec)
    return updates


def _complete(
    pe: PlanExecution,
    rec: ExecutionRecord,
    spec: ActionSpec,
    env: Environment,
    agent_state: AgentState,
    tick: int,
    rng: Random,
    snapshot_store: Optional[list[SnapshotToken]],
    builtin_handlers: Optional[dict[str, Callable[[ActionSpec], tuple[bool, str]]]],
) -> None:
    rec.finished_tick = tick
    store = snapshot_store if snapshot_store is not None else []

    if spec.builtin == "snapshot":
        token = env.snapshot(agent_state.host_id)
        store.append(token)
        rec.observed_effects.append({"builtin": "snapshot", "token": token.token_id})
        rec.status = ActionStatus.DONE
        return
    if spec.builtin == "restore":
        if not store:
            rec.observed_effects.append({"builtin": "restore", "error": "no snapshot token"})
            rec.status = ActionStatus.FAILED
            return
        outcome = env.restore(store[-1])
        rec.observed_effects.append({"builtin": "restore", "outcome": outcome})
        rec.status = ActionStatus.DONE
        return
    if spec.builtin == "verify":
        rec.observed_effects.append({"builtin": "verify"})
        rec.status = ActionStatus.DONE
        return
    if spec.builtin is not None:
        handler = (builtin_handlers or {}).get(spec.builtin)
        if handler is None:
            rec.observed_effects.append({"builtin": spec.builtin, "error": "no handler"})
            rec.status = ActionStatus.FAILED
            return
        ok, detail = handler(spec)
        rec.observed_effects.append({"builtin": spec.builtin, "ok": ok, "detail": detail})
        rec.status = ActionStatus.DONE if ok else ActionStatus.FAILED
        return

    status = ActionStatus.DONE
    for idx, eff in enumerate(spec.effects):
        occurred = rng.random() < eff.probability
        entry: dict[str, Any] = {"effect_index": idx, "occurred": occurred}
        if occurred and eff.env_effect is not None:
            concrete = resolve_self(eff.env_effect, agent_state.host_id)
            try:
                entry["outcome"] = env.apply_effect(
                    concrete, cause=f"agent:{agent_state.agent_id}:{spec.action_id}")
            except UnknownEntity as exc:
                entry["error"] = str(exc)
                status = ActionStatus.FAILED
        rec.observed_effects.append(entry)
    rec.status = status


def monitor_execution(
    records: list[ExecutionRecord],
    tick: int,
    repertoire: dict[str, ActionSpec],
) -> list[Deviation]:
    """A deviation per record whose terminal-or-overdue status is not done."""
    deviations: list[Deviation] = []
    for rec in records:
        if rec.adjusted:
            continue
        if rec.status is ActionStatus.FAILED:
            deviations.append(Deviation("failed", rec.action_id, rec.entry_index,
                                        detail="action failed"))
        elif rec.status is ActionStatus.BLOCKED:
            deviations.append(Deviation("blocked", rec.action_id, rec.entry_index,
                                        detail="action blocked"))
        elif rec.status is ActionStatus.IN_PROGRESS:
            spec = _lookup(rec.action_id, repertoire)
            if tick >= rec.started_tick + spec.duration:
                deviations.append(Deviation(
                    "overdue", rec.action_id, rec.entry_index,
                    detail=f"in_progress past tick {rec.started_tick + spec.duration - 1}"))
    return deviations


def monitor_effects(
    pe: PlanExecution,
    ws: WorldState,
    repertoire: dict[str, ActionSpec],
) -> list[Deviation]:
    """Compare each done action's expected-effect predicates against the
    refreshed beliefs; unmet expectations are the warning signs."""
    deviations: list[Deviation] = []
    for rec in pe.records:
        if rec.status is not ActionStatus.DONE or rec.effects_checked or rec.adjusted:
            continue
        if rec.finished_tick is None or rec.finished_tick >= ws.tick:
            continue  # beliefs not refreshed since completion yet
        spec = BUILTIN_ACTIONS.get(rec.action_id) or repertoire.get(rec.action_id)
        if spec is None or spec.builtin is not None:
            rec.effects_checked = True
            continue
        rec.effects_checked = True
        for eff in spec.effects:
            if eff.expect and not all_hold(ws.features, eff.expect):
                dev = Deviation(
                    "effect_unmet", rec.action_id, rec.entry_index,
                    detail=f"expected {eff.expect} not observed",
                    probability=eff.probability)
                deviations.append(dev)
                rec.deviations.append(dev.to_dict())
    return deviations


def adjust(
    pe: PlanExecution,
    deviations: list[Deviation],
    repertoire: dict[str, ActionSpec],
    retry_counts: dict[str, int],
    ws: WorldState,
    roe: RulesOfEngagement,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> AdjustmentDecision:
    """Policy ladder for the first deviation: retry while attempts remain,
    else substitute a same-category applicable action, else replan."""
    dev = sorted(deviations, key=lambda d: (d.entry_index, d.kind))[0]
    for rec in pe.records:
        if rec.entry_index == dev.entry_index and not rec.adjusted:
            rec.adjusted = True

    aid = dev.action_id
    if retry_counts.get(aid, 0) < max_retries:
        retry_counts[aid] = retry_counts.get(aid, 0) + 1
        pe.cursor = dev.entry_index
        return AdjustmentDecision("retry")

    spec = repertoire.get(aid)
    if spec is not None:
        alternatives = [
            other for other in sorted(repertoire)
            if other != aid
            and repertoire[other].category is spec.category
            and all_hold(ws.features, repertoire[other].preconditions)
            and action_roe_ok(repertoire[other], roe)
        ]
        if alternatives:
            substitute = alternatives[0]
            pe.plan.entries[dev.entry_index].action_id = substitute
            pe.cursor = dev.entry_index
            return AdjustmentDecision("substitute", substitute_action_id=substitute)
    return AdjustmentDecision("replan")


def fail_safe(agent_state: AgentState, reason: str) -> AgentState:
    """Degrade to fail-safe: destructive actions are forbidden from here on.
    The caller is expected to attempt a status report."""
    if agent_state.mode is AgentMode.DESTROYED:
        raise ModeForbidden("agent destroyed")
    agent_state.mode = AgentMode.FAIL_SAFE
    return agent_state


def self_destruct(agent_state: AgentState, env: Environment) -> AgentState:
    """Irreversibly end participation: remove the agent's processes from its
    host and refuse all further operations."""
    if agent_state.mode is AgentMode.DESTROYED:
        raise ModeForbidden("agent destroyed")
    agent_state.mode = AgentMode.DESTROYED
    env.remove_agent(agent_state.agent_id)
    return agent_state
