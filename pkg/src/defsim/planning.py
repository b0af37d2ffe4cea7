"""Response planning and action selection.

Futures are predicted by applying action effect models to a copy of the
believed features, treating probabilistic effects as independent. A bounded
best-first search proposes plans, scored by weighted goal satisfaction minus
risk and noise penalties. Selection filters by the rules of engagement,
trims and augments the winner (prerequisite, preparatory, precautionary,
post-execution entries) and releases it only if it beats inaction through
the risk gate. A condition-action fast path bypasses search entirely under
tight deadlines.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Any, Optional, Sequence

from .envsim import EffectDescriptor
from .errors import ConfigInvalid, PreconditionUnevaluable
from .sensing import (
    Assessment,
    FeatureDelta,
    Predicate,
    WorldState,
    all_hold,
    apply_feature_delta,
    predicate_holds,
)

EXACT_ENUM_LIMIT = 12
SAMPLE_COUNT = 256


class ActionCategory(str, Enum):
    OBSERVE = "observe"
    CONTAIN = "contain"
    RESTORE = "restore"
    DESTRUCTIVE = "destructive"
    CAMOUFLAGE = "camouflage"
    COMMUNICATE = "communicate"
    PROPAGATE = "propagate"


class TargetScope(str, Enum):
    SELF_HOST = "self_host"
    REMOTE = "remote"


@dataclass
class ProbabilisticEffect:
    """One effect of an action: what happens in the environment, how the
    believed features are predicted to change, and what should be observable
    afterwards."""

    env_effect: Optional[EffectDescriptor]
    feature_deltas: list[FeatureDelta]
    probability: float
    expect: list[Predicate] = field(default_factory=list)


@dataclass
class ActionSpec:
    action_id: str
    category: ActionCategory
    preconditions: list[Predicate] = field(default_factory=list)
    effects: list[ProbabilisticEffect] = field(default_factory=list)
    risk: float = 0.0
    noise: float = 0.0
    duration: int = 1
    target_scope: TargetScope = TargetScope.SELF_HOST
    preparation: list[str] = field(default_factory=list)
    builtin: Optional[str] = None  # snapshot | restore | verify | propagate
    target_host: Optional[str] = None


@dataclass
class Goal:
    goal_id: str
    predicates: list[Predicate]
    weight: float


def normalize_goals(goals: list[Goal]) -> list[Goal]:
    total = sum(g.weight for g in goals)
    if goals and total <= 0:
        raise ConfigInvalid("goal weights must sum to a positive value")
    for g in goals:
        g.weight = g.weight / total
    return goals


@dataclass
class PlanProposal:
    actions: tuple[str, ...]
    predicted_satisfaction: dict[str, float]
    utility: float
    benefit: float
    risk_total: float
    noise_total: float

    @property
    def components(self) -> tuple[float, float, float]:
        return (self.benefit, self.risk_total, self.noise_total)

    def to_dict(self) -> dict[str, Any]:
        return {
            "actions": list(self.actions),
            "utility": self.utility,
            "benefit": self.benefit,
            "risk_total": self.risk_total,
            "noise_total": self.noise_total,
        }


class EntryOrigin(str, Enum):
    PROPOSED = "proposed"
    PREREQUISITE = "prerequisite"
    PREPARATORY = "preparatory"
    PRECAUTIONARY = "precautionary"
    POST_EXECUTION = "post_execution"


@dataclass
class PlanEntry:
    action_id: str
    offset: int
    origin: EntryOrigin


@dataclass
class ExecutablePlan:
    entries: list[PlanEntry]
    roe_checked: bool = False

    def action_ids(self) -> list[str]:
        return [e.action_id for e in self.entries]


@dataclass
class RulesOfEngagement:
    max_plan_risk: float = 1.0
    destructive_only_on_residence: bool = True
    forbidden_categories: set[str] = field(default_factory=set)
    fast_deadline_ticks: int = 0


@dataclass
class ConditionActionRule:
    rule_id: str
    condition: list[Predicate]
    action_id: str
    priority: int


@dataclass
class PlannerConfig:
    risk_weight: float = 1.0   # penalty per unit plan risk
    noise_weight: float = 0.5  # penalty per unit plan noise
    depth: int = 3             # maximum plan length searched
    beam: int = 5              # frontier width and proposal count


SNAPSHOT_ACTION_ID = "snapshot_host"
VERIFY_ACTION_ID = "verify_effects"

BUILTIN_ACTIONS: dict[str, ActionSpec] = {
    SNAPSHOT_ACTION_ID: ActionSpec(
        SNAPSHOT_ACTION_ID, ActionCategory.OBSERVE, builtin="snapshot"),
    VERIFY_ACTION_ID: ActionSpec(
        VERIFY_ACTION_ID, ActionCategory.OBSERVE, builtin="verify"),
}


def signed_noise(spec: ActionSpec) -> float:
    """Camouflage noise is the configured detectability reduction, so it
    counts negative in the plan's noise budget."""
    return -spec.noise if spec.category is ActionCategory.CAMOUFLAGE else spec.noise


# -- prediction -----------------------------------------------------------------

def predict(
    ws: WorldState,
    action_ids: Sequence[str],
    repertoire: dict[str, ActionSpec],
    goals: list[Goal],
    base_deltas: Sequence[FeatureDelta] = (),
) -> dict[str, float]:
    """Per-goal satisfaction probability after running the sequence.

    base_deltas (e.g. threat progression) apply deterministically first.
    Each probabilistic effect occurs independently; with at most
    EXACT_ENUM_LIMIT uncertain effects the distribution is enumerated
    exactly, beyond that SAMPLE_COUNT deterministic seeded samples are
    drawn. Raises PreconditionUnevaluable if a precondition references a
    feature missing from the (optimistically evolved) belief copy.
    """
    features = dict(ws.features)
    for delta in base_deltas:
        apply_feature_delta(features, delta)

    optimistic = dict(features)
    effect_plan: list[tuple[list[FeatureDelta], float]] = []
    for aid in action_ids:
        spec = repertoire[aid]
        for pred in spec.preconditions:
            if pred[0] not in optimistic:
                raise PreconditionUnevaluable(
                    f"action {aid!r} precondition references absent feature {pred[0]!r}")
        for eff in spec.effects:
            effect_plan.append((eff.feature_deltas, eff.probability))
            for delta in eff.feature_deltas:
                apply_feature_delta(optimistic, delta)

    uncertain = [i for i, (_, p) in enumerate(effect_plan) if 0.0 < p < 1.0]
    satisfaction = {g.goal_id: 0.0 for g in goals}

    def evaluate(occurring: set[int], weight: float) -> None:
        feats = dict(features)
        for i, (deltas, _) in enumerate(effect_plan):
            if i in occurring:
                for delta in deltas:
                    apply_feature_delta(feats, delta)
        for g in goals:
            if all_hold(feats, g.predicates):
                satisfaction[g.goal_id] += weight

    certain = {i for i, (_, p) in enumerate(effect_plan) if p >= 1.0}
    if len(uncertain) <= EXACT_ENUM_LIMIT:
        for bits in itertools.product((False, True), repeat=len(uncertain)):
            prob = 1.0
            occurring = set(certain)
            for bit, idx in zip(bits, uncertain):
                p = effect_plan[idx][1]
                prob *= p if bit else (1.0 - p)
                if bit:
                    occurring.add(idx)
            if prob > 0.0:
                evaluate(occurring, prob)
    else:
        seed = zlib.crc32("|".join(action_ids).encode()) ^ 0x5EED
        rng = Random(seed)
        share = 1.0 / SAMPLE_COUNT
        for _ in range(SAMPLE_COUNT):
            occurring = set(certain)
            for idx in uncertain:
                if rng.random() < effect_plan[idx][1]:
                    occurring.add(idx)
            evaluate(occurring, share)
    return satisfaction


def score_sequence(
    ws: WorldState,
    action_ids: Sequence[str],
    repertoire: dict[str, ActionSpec],
    goals: list[Goal],
    config: PlannerConfig,
) -> PlanProposal:
    sat = predict(ws, action_ids, repertoire, goals)
    benefit = sum(g.weight * sat[g.goal_id] for g in goals)
    risk_total = sum(repertoire[a].risk for a in action_ids)
    noise_total = sum(signed_noise(repertoire[a]) for a in action_ids)
    utility = benefit - config.risk_weight * risk_total - config.noise_weight * noise_total
    return PlanProposal(tuple(action_ids), sat, utility, benefit, risk_total, noise_total)


# -- proposal search --------------------------------------------------------------

def propose_plans(
    assessment: Assessment,
    ws: WorldState,
    repertoire: dict[str, ActionSpec],
    goals: list[Goal],
    config: PlannerConfig,
) -> list[PlanProposal]:
    """Bounded best-first search over action sequences of length <= depth.

    An action extends a sequence iff its preconditions hold on the belief
    copy evolved by optimistically applying every prior effect (probability
    ignored). The beam keeps the best `beam` nodes per level by
    (utility desc, action-id sequence asc). Returns at most `beam`
    proposals, best first, with the empty plan always included as the
    baseline candidate.
    """
    empty = score_sequence(ws, (), repertoire, goals, config)
    candidates: dict[tuple[str, ...], PlanProposal] = {(): empty}
    frontier: list[tuple[tuple[str, ...], dict[str, Any]]] = [((), dict(ws.features))]

    for _ in range(config.depth):
        level: list[tuple[PlanProposal, dict[str, Any]]] = []
        for seq, feats in frontier:
            for aid in sorted(repertoire):
                spec = repertoire[aid]
                if not all_hold(feats, spec.preconditions):
                    continue
                new_feats = dict(feats)
                for eff in spec.effects:
                    for delta in eff.feature_deltas:
                        apply_feature_delta(new_feats, delta)
                proposal = score_sequence(ws, seq + (aid,), repertoire, goals, config)
                candidates[proposal.actions] = proposal
                level.append((proposal, new_feats))
        level.sort(key=lambda t: (-t[0].utility, t[0].actions))
        frontier = [(p.actions, f) for p, f in level[: config.beam]]

    ranked = sorted(candidates.values(), key=lambda p: (-p.utility, p.actions))
    top = ranked[: config.beam]
    if all(p.actions for p in top):  # keep the baseline in the returned set
        top = top[: config.beam - 1] + [empty]
    return top


# -- expected loss and the risk gate ----------------------------------------------

def expected_loss(
    ws: WorldState,
    repertoire: dict[str, ActionSpec],
    goals: list[Goal],
    horizon: int,
    plan_action_ids: Optional[Sequence[str]] = None,
    progression: Sequence[FeatureDelta] = (),
) -> float:
    """1 - weighted predicted satisfaction after `horizon` ticks of threat
    progression, with the plan's effects (if any) applied on top."""
    base: list[FeatureDelta] = []
    for _ in range(horizon):
        base.extend(progression)
    ids = [a for a in (plan_action_ids or []) if a not in BUILTIN_ACTIONS]
    sat = predict(ws, ids, repertoire, goals, base_deltas=base)
    loss = 1.0 - sum(g.weight * sat[g.goal_id] for g in goals)
    return max(0.0, min(1.0, loss))


# -- rules of engagement -----------------------------------------------------------

def action_roe_ok(spec: ActionSpec, roe: RulesOfEngagement) -> bool:
    if spec.category.value in roe.forbidden_categories:
        return False
    if spec.risk > roe.max_plan_risk:
        return False
    if (
        spec.category is ActionCategory.DESTRUCTIVE
        and roe.destructive_only_on_residence
        and spec.target_scope is TargetScope.REMOTE
    ):
        return False
    return True


def plan_roe_violations(
    proposal: PlanProposal,
    repertoire: dict[str, ActionSpec],
    roe: RulesOfEngagement,
) -> list[str]:
    violations = []
    if proposal.risk_total > roe.max_plan_risk:
        violations.append(
            f"plan risk {proposal.risk_total:.3f} exceeds budget {roe.max_plan_risk:.3f}")
    for aid in proposal.actions:
        spec = repertoire[aid]
        if spec.category.value in roe.forbidden_categories:
            violations.append(f"{aid}: category {spec.category.value} forbidden")
        if (
            spec.category is ActionCategory.DESTRUCTIVE
            and roe.destructive_only_on_residence
            and spec.target_scope is TargetScope.REMOTE
        ):
            violations.append(f"{aid}: destructive action with remote scope")
    return violations


# -- selection ----------------------------------------------------------------------

@dataclass
class SelectionOutcome:
    plan: Optional[ExecutablePlan]
    no_action: bool
    log: dict[str, Any]


def _unique_provider(
    failing: list[Predicate],
    repertoire: dict[str, ActionSpec],
    roe: RulesOfEngagement,
    feats: dict[str, Any],
    exclude: str,
) -> Optional[str]:
    """The single repertoire action whose optimistic effects satisfy every
    failing predicate, is itself applicable and ROE-legal; None if zero or
    several qualify."""
    providers = []
    for aid in sorted(repertoire):
        if aid == exclude:
            continue
        spec = repertoire[aid]
        if not action_roe_ok(spec, roe) or not all_hold(feats, spec.preconditions):
            continue
        trial = dict(feats)
        for eff in spec.effects:
            for delta in eff.feature_deltas:
                apply_feature_delta(trial, delta)
        if all_hold(trial, failing):
            providers.append(aid)
    return providers[0] if len(providers) == 1 else None


def _apply_optimistic(feats: dict[str, Any], spec: ActionSpec) -> None:
    for eff in spec.effects:
        for delta in eff.feature_deltas:
            apply_feature_delta(feats, delta)


def _trim_and_augment(
    proposal: PlanProposal,
    repertoire: dict[str, ActionSpec],
    roe: RulesOfEngagement,
    ws: WorldState,
) -> tuple[list[tuple[str, EntryOrigin]], list[dict[str, Any]], list[dict[str, Any]]]:
    feats = dict(ws.features)
    entries: list[tuple[str, EntryOrigin]] = []
    trims: list[dict[str, Any]] = []
    insertions: list[dict[str, Any]] = []
    snapshot_done = False

    for aid in proposal.actions:
        spec = repertoire[aid]
        for prep_id in spec.preparation:
            prep = repertoire.get(prep_id)
            if prep is None or not action_roe_ok(prep, roe):
                continue
            if all_hold(feats, prep.preconditions):
                entries.append((prep_id, EntryOrigin.PREPARATORY))
                insertions.append({"action": prep_id, "origin": "preparatory", "before": aid})
                _apply_optimistic(feats, prep)
        if not all_hold(feats, spec.preconditions):
            failing = [list(p) for p in spec.preconditions if not predicate_holds(feats, p)]
            provider = _unique_provider(
                [tuple(p) for p in failing], repertoire, roe, feats, exclude=aid)
            if provider is None:
                trims.append({"action": aid, "reason": "precondition_failed", "failing": failing})
                continue
            entries.append((provider, EntryOrigin.PREREQUISITE))
            insertions.append({"action": provider, "origin": "prerequisite", "before": aid})
            _apply_optimistic(feats, repertoire[provider])
            if not all_hold(feats, spec.preconditions):
                trims.append({"action": aid, "reason": "precondition_failed_after_prerequisite",
                              "failing": failing})
                continue
        if spec.category is ActionCategory.DESTRUCTIVE and not snapshot_done:
            entries.append((SNAPSHOT_ACTION_ID, EntryOrigin.PRECAUTIONARY))
            insertions.append({"action": SNAPSHOT_ACTION_ID, "origin": "precautionary", "before": aid})
            snapshot_done = True
        entries.append((aid, EntryOrigin.PROPOSED))
        _apply_optimistic(feats, spec)

    if entries:
        entries.append((VERIFY_ACTION_ID, EntryOrigin.POST_EXECUTION))
        insertions.append({"action": VERIFY_ACTION_ID, "origin": "post_execution", "before": None})
    return entries, trims, insertions


def _build_plan(entries: list[tuple[str, EntryOrigin]], repertoire: dict[str, ActionSpec]) -> ExecutablePlan:
    plan_entries = []
    offset = 0
    for aid, origin in entries:
        spec = BUILTIN_ACTIONS.get(aid) or repertoire[aid]
        plan_entries.append(PlanEntry(aid, offset, origin))
        offset += spec.duration
    return ExecutablePlan(entries=plan_entries, roe_checked=True)


def select_action_plan(
    proposals: list[PlanProposal],
    goals: list[Goal],
    roe: RulesOfEngagement,
    ws: WorldState,
    repertoire: dict[str, ActionSpec],
    config: PlannerConfig,
    progression: Sequence[FeatureDelta] = (),
) -> SelectionOutcome:
    """Pick, trim, augment and gate a plan; the returned log carries every
    number needed to recompute the decision."""
    log: dict[str, Any] = {
        "candidates": [],
        "filters": [],
        "trims": [],
        "insertions": [],
        "tie_break": {"used": False},
        "gate": None,
        "risk_weight": config.risk_weight,
        "noise_weight": config.noise_weight,
    }
    survivors: list[PlanProposal] = []
    for prop in proposals:
        violations = plan_roe_violations(prop, repertoire, roe)
        log["candidates"].append({**prop.to_dict(), "roe_ok": not violations, "roe_violations": violations})
        if violations:
            log["filters"].append({"actions": list(prop.actions), "violations": violations})
        else:
            survivors.append(prop)

    if not survivors:
        log["gate"] = {"released": False, "reason": "all_candidates_roe_filtered"}
        return SelectionOutcome(plan=None, no_action=True, log=log)

    survivors.sort(key=lambda p: (-p.utility, p.actions))
    best = survivors[0]
    if len(survivors) > 1 and survivors[1].utility == best.utility:
        log["tie_break"] = {
            "used": True,
            "kept": list(best.actions),
            "over": list(survivors[1].actions),
            "rule": "lexicographic_action_ids",
        }
    log["winner"] = list(best.actions)

    entries, trims, insertions = _trim_and_augment(best, repertoire, roe, ws)
    log["trims"] = trims
    log["insertions"] = insertions

    plan_ids = [aid for aid, _ in entries if aid not in BUILTIN_ACTIONS]
    inaction_loss = expected_loss(ws, repertoire, goals, config.depth, None, progression)
    plan_loss = expected_loss(ws, repertoire, goals, config.depth, plan_ids, progression)
    released = bool(entries) and (inaction_loss - plan_loss) > 0.0
    log["gate"] = {
        "inaction_loss": inaction_loss,
        "plan_loss": plan_loss,
        "released": released,
    }
    if not released:
        return SelectionOutcome(plan=None, no_action=True, log=log)

    plan = _build_plan(entries, repertoire)
    # re-verify every ROE clause on the augmented plan before release
    final_risk = sum((BUILTIN_ACTIONS.get(a) or repertoire[a]).risk for a in plan.action_ids())
    if final_risk > roe.max_plan_risk:
        log["gate"]["released"] = False
        log["gate"]["reason"] = "augmented_plan_exceeds_risk_budget"
        return SelectionOutcome(plan=None, no_action=True, log=log)
    log["released_entries"] = [
        {"action": e.action_id, "offset": e.offset, "origin": e.origin.value} for e in plan.entries
    ]
    return SelectionOutcome(plan=plan, no_action=False, log=log)


# -- fast path ------------------------------------------------------------------------

def fast_rule_select(
    ws: WorldState,
    rules: list[ConditionActionRule],
    deadline_ticks: Optional[int],
    roe: RulesOfEngagement,
    repertoire: dict[str, ActionSpec],
) -> tuple[Optional[str], list[dict[str, Any]]]:
    """First matching, ROE-legal rule action under a tight deadline.

    Returns (action_id or None, evaluation log). No search expansions are
    performed; rules are tried in ascending priority order.
    """
    evaluated: list[dict[str, Any]] = []
    if deadline_ticks is None or deadline_ticks >= roe.fast_deadline_ticks:
        return None, evaluated
    for rule in sorted(rules, key=lambda r: r.priority):
        held = all_hold(ws.features, rule.condition)
        spec = repertoire.get(rule.action_id)
        roe_ok = spec is not None and action_roe_ok(spec, roe)
        evaluated.append({"rule": rule.rule_id, "priority": rule.priority,
                          "condition_held": held, "roe_ok": roe_ok})
        if held and roe_ok:
            return rule.action_id, evaluated
    return None, evaluated


def plan_from_action(action_id: str) -> ExecutablePlan:
    """Single-entry released plan for the fast path."""
    return ExecutablePlan(entries=[PlanEntry(action_id, 0, EntryOrigin.PROPOSED)], roe_checked=True)
