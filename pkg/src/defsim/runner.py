"""Episode loop, metrics, decision log, replay and reporting.

Tick order is fixed and canonical: (1) environment step, applying scheduled
deliveries; (2) adversary instances in id order; (3) live agents in id order,
each running inbox -> sense -> identify -> control boundary -> collaborate ->
monitor/adjust -> plan -> execute -> report; (4) the scripted C2 sends for
the tick. Messages sent mid-tick land in inboxes and are read at the
recipient's next agent phase, so any (config, seed) pair replays to an
identical trace.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Any, Optional

from . import adversary, collaboration, execution, learning, planning, sensing
from .adversary import MalwareController
from .envsim import Environment, SnapshotToken
from .errors import (
    AuthorityNotHeld,
    ConfigInvalid,
    CorruptTrace,
    IndexOutOfRange,
    InvalidTransition,
    ModeForbidden,
    NoRoute,
    PropagationRefused,
    SchemaMismatch,
    UnknownField,
    UnknownGoal,
)
from .execution import AgentMode, AgentState, Authority, PlanExecution
from .learning import AssessmentObservation, EffectObservation, KnowledgeBase
from .planning import ActionSpec, PlannerConfig, RulesOfEngagement
from .scenario import AgentSpec, ScenarioConfig
from .sensing import Assessment, Descriptor, SensorConfig, WorldState

TRACE_SCHEMA_VERSION = 1
RECOVERY_LEVEL = 0.95
RECOVERY_SUSTAIN_TICKS = 10


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class AgentRuntime:
    spec: AgentSpec
    state: AgentState
    ws: WorldState
    kb: KnowledgeBase
    roe: RulesOfEngagement
    planner: PlannerConfig
    sensors: SensorConfig
    repertoire: dict[str, ActionSpec]
    plan_exec: Optional[PlanExecution] = None
    retry_counts: dict[str, int] = field(default_factory=dict)
    control_queue: list[dict[str, Any]] = field(default_factory=list)
    conclusions: dict[str, collaboration.Conclusion] = field(default_factory=dict)
    snapshot_store: list[SnapshotToken] = field(default_factory=list)
    last_report_tick: int = -(10 ** 9)
    no_action_streak: int = 0
    replica_count: int = 0
    assessment: Optional[Assessment] = None
    patterns_matched_episode: set[str] = field(default_factory=set)
    obs_counter: int = 0

    def next_observation_id(self, seed: int) -> str:
        self.obs_counter += 1
        return f"{self.state.agent_id}:{seed}:{self.obs_counter}"


@dataclass
class EpisodeResult:
    scenario_name: str
    scenario_hash: str
    seed: int
    metrics: dict[str, Any]
    functionality_series: list[float]
    decision_log: list[dict[str, Any]]
    trace: list[dict[str, Any]]
    agents: list[str]
    primary_agent: Optional[str]

    def header(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "scenario": self.scenario_name,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "agents": self.agents,
            "primary_agent": self.primary_agent,
        }

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "scenario": self.scenario_name,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "metrics": self.metrics,
            "functionality_series": self.functionality_series,
            "decision_log": self.decision_log,
            "agents": self.agents,
            "primary_agent": self.primary_agent,
        }


def time_to_recovery(series: list[float], onset: Optional[int]) -> Optional[int]:
    """First tick after attack onset where functionality holds at or above
    RECOVERY_LEVEL for RECOVERY_SUSTAIN_TICKS consecutive ticks."""
    if onset is None:
        return None
    run_start: Optional[int] = None
    run_len = 0
    for t in range(onset + 1, len(series)):
        if series[t] >= RECOVERY_LEVEL:
            if run_start is None:
                run_start = t
            run_len += 1
            if run_len >= RECOVERY_SUSTAIN_TICKS:
                return run_start
        else:
            run_start = None
            run_len = 0
    return None


class Episode:
    def __init__(self, config: ScenarioConfig, seed: int, agent_enabled: bool = True):
        self.config = config
        self.seed = seed
        self.agent_enabled = agent_enabled
        self.rng = Random(seed)
        self.env: Environment = config.build_environment()
        instances, playbook = config.build_playbook()
        self.malware = MalwareController(instances, playbook)
        self.playbook = playbook
        self.auth_key = f"shared-key-{config.scenario_hash()}"
        self.trace: list[dict[str, Any]] = []
        self.decision_log: list[dict[str, Any]] = []
        self.functionality_series: list[float] = []
        self.attack_onset: Optional[int] = None
        self.harm_events = 0
        self.reward_total = 0.0
        self.compromised_hosts: set[str] = set()
        self.tick = 0

        self.agents: list[AgentRuntime] = []
        self.agent_hosts: dict[str, str] = {}
        if agent_enabled:
            for spec in config.agents:
                self._add_agent(spec)
        self.primary_agent = config.agents[0].agent_id if (agent_enabled and config.agents) else None
        if config.c2_host:
            self.agent_hosts["c2"] = config.c2_host

    # -- construction ----------------------------------------------------------

    def _add_agent(self, spec: AgentSpec, kb: Optional[KnowledgeBase] = None,
                   roe: Optional[RulesOfEngagement] = None) -> AgentRuntime:
        state = AgentState(agent_id=spec.agent_id, host_id=spec.host_id,
                           detectability=spec.detectability)
        if kb is None:
            kb = KnowledgeBase(
                patterns={p.pattern_id: p for p in self.config.build_patterns()},
                rules=self.config.build_rules(),
                goals=self.config.build_goals(),
            )
        runtime = AgentRuntime(
            spec=spec,
            state=state,
            ws=WorldState(),
            kb=kb,
            roe=roe if roe is not None else self.config.build_roe(),
            planner=self.config.build_planner_config(),
            sensors=self.config.build_sensor_config(),
            repertoire=self.config.build_repertoire(),
        )
        self.env.install_agent(spec.agent_id, spec.host_id)
        self.agents.append(runtime)
        self.agent_hosts[spec.agent_id] = spec.host_id
        return runtime

    # -- trace helpers -----------------------------------------------------------

    def emit(self, kind: str, **payload: Any) -> None:
        self.trace.append({"tick": self.tick, "seq": self.env.next_seq(self.tick),
                           "kind": kind, **payload})

    def _record_effect_outcome(self, outcome: dict[str, Any]) -> None:
        self.emit("env.effect", **outcome)
        cause = outcome.get("cause", "")
        for change in outcome.get("changes", []):
            if (
                cause.startswith("agent:")
                and change.get("required")
                and change.get("new_state") == "down"
                and change.get("old_state") != "down"
            ):
                self.harm_events += 1
                self.emit("harm", entity=change["entity"], cause=cause)
            if change.get("entity", "").startswith("agent:") and cause.startswith("malware:"):
                agent_id = change["entity"].split(":", 1)[1]
                self._destroy_agent(agent_id, by=cause)

    def _destroy_agent(self, agent_id: str, by: str) -> None:
        runtime = next((a for a in self.agents if a.state.agent_id == agent_id), None)
        if runtime is None or runtime.state.mode is AgentMode.DESTROYED:
            return
        runtime.state.mode = AgentMode.DESTROYED
        self.env.remove_agent(agent_id)
        self.emit("agent.killed", agent=agent_id, by=by)

    # -- episode loop ---------------------------------------------------------------

    def run(self) -> EpisodeResult:
        for tick in range(self.config.duration_ticks):
            self.tick = tick
            for event in self.env.step(tick):
                payload = dict(event.payload)
                message = payload.pop("message", None)
                if message is not None:
                    payload["message_kind"] = message.get("kind")
                    payload["recipient"] = message.get("recipient")
                self.trace.append({"tick": event.tick, "seq": event.seq,
                                   "kind": "env." + event.kind, **payload})
            self._adversary_phase(tick)
            for runtime in sorted(self.agents, key=lambda a: a.state.agent_id):
                self._agent_phase(runtime, tick)
            self._c2_phase(tick)
            self.compromised_hosts |= self.malware.reached_hosts()
            value = self.env.functionality()
            self.functionality_series.append(value)
            self.emit("tick.functionality", value=value)
        self._end_of_episode_learning()
        metrics = self._metrics()
        return EpisodeResult(
            scenario_name=self.config.name,
            scenario_hash=self.config.scenario_hash(),
            seed=self.seed,
            metrics=metrics,
            functionality_series=self.functionality_series,
            decision_log=self.decision_log,
            trace=self.trace,
            agents=[a.state.agent_id for a in self.agents],
            primary_agent=self.primary_agent,
        )

    def _metrics(self) -> dict[str, Any]:
        series = self.functionality_series
        survived: Optional[bool]
        if self.primary_agent is None:
            survived = None
        else:
            primary = next(a for a in self.agents if a.state.agent_id == self.primary_agent)
            survived = primary.state.mode is not AgentMode.DESTROYED
        return {
            "resilience_auc": sum(series) / len(series) if series else 0.0,
            "time_to_recovery": time_to_recovery(series, self.attack_onset),
            "agent_survived": survived,
            "harm_events": self.harm_events,
            "reward_total": self.reward_total,
        }

    # -- adversary phase ---------------------------------------------------------------

    def _detectability_of(self, host_id: str) -> Optional[float]:
        host = self.env.hosts.get(host_id)
        if host is None or host.resident_agent is None:
            return None
        runtime = next((a for a in self.agents if a.state.agent_id == host.resident_agent), None)
        if runtime is None or runtime.state.mode is AgentMode.DESTROYED:
            return None
        return runtime.state.detectability

    def _adversary_phase(self, tick: int) -> None:
        effects, notes = self.malware.step(self.env, self.rng, tick, self._detectability_of)
        for iid in notes["evicted"]:
            self.emit("adversary.evicted", instance=iid)
        for iid, phase in sorted(notes["phases"].items()):
            self.emit("adversary.phase", instance=iid, phase=phase)
        for move in notes["lateral"]:
            self.emit("adversary.lateral", **move)
        for iid, effect in effects:
            outcome = self.env.apply_effect(effect, cause=f"malware:{iid}")
            if self.attack_onset is None:
                self.attack_onset = tick
                self.emit("attack.onset")
            self._record_effect_outcome(outcome)

    # -- agent phase ----------------------------------------------------------------------

    def _agent_phase(self, rt: AgentRuntime, tick: int) -> None:
        if rt.state.mode is AgentMode.DESTROYED:
            return
        self._process_inbox(rt)
        if rt.state.mode is AgentMode.DESTROYED:
            return

        descriptors = sensing.sense(self.env, rt.state.host_id, rt.sensors, self.rng)
        descriptors = descriptors + self._self_descriptors(rt)
        sensing.update_world_state(rt.ws, descriptors)

        patterns = list(rt.kb.patterns.values())
        assessment = sensing.identify(rt.ws, patterns, self.config.trigger_threshold)
        rt.assessment = assessment
        for pid, _, _ in assessment.matched:
            rt.patterns_matched_episode.add(pid)
        if assessment.matched:
            self.emit("agent.assessment", agent=rt.state.agent_id,
                      matched=[list(m) for m in assessment.matched],
                      top_severity=assessment.top_severity,
                      problematic=assessment.problematic)

        self._apply_control_queue(rt)
        self._update_own_conclusion(rt, assessment)
        self._maybe_collaborate(rt, assessment)

        if rt.state.authority is Authority.REMOTE_C2:
            if assessment.problematic:
                self._attempt_report(rt, tick, reason="problematic_under_remote_authority")
            self._periodic_report(rt, tick)
            return

        self._monitor_and_adjust(rt, tick)
        self._maybe_plan(rt, assessment, tick)
        self._execute(rt, tick)
        if rt.state.mode is not AgentMode.DESTROYED:
            reward_sample = learning.reward(rt.kb.goals, rt.ws)
            if rt.state.agent_id == self.primary_agent:
                self.reward_total += reward_sample.reward
                self.emit("agent.reward", agent=rt.state.agent_id, reward=reward_sample.reward)
            self._periodic_report(rt, tick)

    def _self_descriptors(self, rt: AgentRuntime) -> list[Descriptor]:
        tick = max(self.env.tick, 0)
        return [
            Descriptor("self:agent", "detectability", rt.state.detectability, tick),
            Descriptor("self:agent", "replica_count", rt.replica_count, tick),
        ]

    def _process_inbox(self, rt: AgentRuntime) -> None:
        for msg in self.env.drain_inbox(rt.state.agent_id):
            if not collaboration.verify_message(self.auth_key, msg):
                self.emit("agent.message_discarded", agent=rt.state.agent_id,
                          message_kind=msg.get("kind"), sender=msg.get("sender"),
                          reason="invalid_auth_tag", forged=bool(msg.get("forged")))
                continue
            kind = msg.get("kind")
            if kind == collaboration.MessageKind.REQUEST_CONCLUSIONS.value:
                self._handle_conclusions(rt, msg, reply=True)
            elif kind == collaboration.MessageKind.SHARE_CONCLUSIONS.value:
                self._handle_conclusions(rt, msg, reply=False)
            elif kind == collaboration.MessageKind.CONTROL_COMMAND.value:
                rt.control_queue.append(msg.get("payload") or {})
                self.emit("agent.control_queued", agent=rt.state.agent_id,
                          command=(msg.get("payload") or {}).get("command"))
            elif kind in (collaboration.MessageKind.HANDOVER_GRANT.value,
                          collaboration.MessageKind.HANDOVER_RETURN.value):
                try:
                    collaboration.handover(rt.state, msg)
                    self.emit("agent.handover", agent=rt.state.agent_id,
                              authority=rt.state.authority.value)
                except InvalidTransition as exc:
                    self.emit("agent.message_discarded", agent=rt.state.agent_id,
                              message_kind=kind, sender=msg.get("sender"),
                              reason=f"invalid_transition: {exc}")

    def _handle_conclusions(self, rt: AgentRuntime, msg: dict[str, Any], reply: bool) -> None:
        sender = msg.get("sender", "")
        if sender == "c2":  # on-demand status request from the remote center
            self._attempt_report(rt, self.tick, reason="on_demand")
            return
        payload = msg.get("payload") or {}
        incoming = [collaboration.Conclusion.from_dict(c) for c in payload.get("conclusions", [])]
        merged = collaboration.merge_conclusions(rt.conclusions, incoming)
        changed = merged != rt.conclusions
        rt.conclusions = merged
        self.emit("agent.negotiation", agent=rt.state.agent_id, sender=sender,
                  round=msg.get("round", 0), changed=changed,
                  set_size=len(rt.conclusions))
        rounds_budget = self.config.collaboration.negotiation_rounds
        if reply and sender in self.agent_hosts:
            self._send_conclusions(rt, sender, collaboration.MessageKind.SHARE_CONCLUSIONS,
                                   msg.get("round", 0))
        elif changed and msg.get("round", 0) < rounds_budget:
            for peer_id, _ in self._peers_of(rt):
                self._send_conclusions(rt, peer_id, collaboration.MessageKind.SHARE_CONCLUSIONS,
                                       msg.get("round", 0) + 1)

    def _send_conclusions(self, rt: AgentRuntime, peer_id: str,
                          kind: collaboration.MessageKind, round_no: int) -> None:
        peer_host = self.agent_hosts.get(peer_id)
        if peer_host is None:
            return
        channel = self.env.route(rt.state.host_id, peer_host)
        if channel is None:
            self.emit("agent.share_skipped", agent=rt.state.agent_id, peer=peer_id,
                      reason="no_route")
            return
        payload = {"conclusions": [c.to_dict() for _, c in sorted(rt.conclusions.items())]}
        msg = collaboration.build_message(self.auth_key, kind, rt.state.agent_id,
                                          peer_id, payload, round_no)
        delivery = self.env.deliver(channel, msg, self.rng, spoofer=self._spoofer_for(channel))
        rt.state.detectability = min(
            1.0, rt.state.detectability + self.config.collaboration.communicate_noise)
        self.emit("agent.conclusions_shared", agent=rt.state.agent_id, peer=peer_id,
                  status=delivery.status.value, round=round_no)

    def _peers_of(self, rt: AgentRuntime) -> list[tuple[str, str]]:
        return [
            (a.state.agent_id, a.state.host_id)
            for a in sorted(self.agents, key=lambda x: x.state.agent_id)
            if a.state.agent_id != rt.state.agent_id and a.state.mode is not AgentMode.DESTROYED
        ]

    def _apply_control_queue(self, rt: AgentRuntime) -> None:
        queue, rt.control_queue = rt.control_queue, []
        for command in queue:
            name = command.get("command")
            try:
                if name == "request_handover":
                    collaboration.handover(
                        rt.state, {"kind": collaboration.MessageKind.HANDOVER_GRANT.value})
                    self.emit("agent.handover", agent=rt.state.agent_id,
                              authority=rt.state.authority.value)
                elif name == "grant_return":
                    collaboration.handover(
                        rt.state, {"kind": collaboration.MessageKind.HANDOVER_RETURN.value})
                    self.emit("agent.handover", agent=rt.state.agent_id,
                              authority=rt.state.authority.value)
                elif name == "fail_safe":
                    execution.fail_safe(rt.state, reason="supervisor_command")
                    self.emit("agent.fail_safe", agent=rt.state.agent_id,
                              reason="supervisor_command")
                    self._attempt_report(rt, self.tick, reason="fail_safe")
                else:
                    change = collaboration.apply_control(command, rt.kb, rt.roe)
                    self.emit("agent.control_applied", agent=rt.state.agent_id, **change)
            except (UnknownGoal, UnknownField, InvalidTransition, ModeForbidden) as exc:
                self.emit("agent.control_rejected", agent=rt.state.agent_id,
                          command=name, reason=str(exc))

    def _update_own_conclusion(self, rt: AgentRuntime, assessment: Assessment) -> None:
        subject = f"host:{rt.state.host_id}"
        if assessment.problematic:
            confidence = assessment.matched[0][2]
            verdict = collaboration.Verdict.COMPROMISED
        else:
            confidence = 1.0 - assessment.top_severity
            verdict = collaboration.Verdict.CLEAN
        own = collaboration.Conclusion(subject, verdict, confidence,
                                       rt.state.agent_id, rt.ws.tick)
        rt.conclusions = collaboration.merge_conclusions(rt.conclusions, [own])

    def _maybe_collaborate(self, rt: AgentRuntime, assessment: Assessment) -> None:
        if not assessment.matched or rt.state.mode is not AgentMode.NORMAL:
            return
        top_confidence = assessment.matched[0][2]
        if top_confidence >= self.config.collaboration.threshold:
            return
        peers = self._peers_of(rt)
        if not peers:
            return
        try:
            outcomes = collaboration.share_and_request(
                rt.state, peers, rt.conclusions, self.env, self.rng, self.auth_key,
                self.config.collaboration.communicate_noise,
                spoofers=self._all_spoofers())
            for outcome in outcomes:
                self.emit("agent.conclusions_requested", agent=rt.state.agent_id, **outcome)
        except NoRoute:
            self.emit("agent.collaboration_solo", agent=rt.state.agent_id,
                      reason="no_peer_reachable")

    def _spoofer_for(self, channel_id: str):
        spoofers = self._all_spoofers()
        return spoofers.get(channel_id)

    def _all_spoofers(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for cid in sorted(self.env.channels):
            channel = self.env.channels[cid]
            if channel.state.value != "spoofed":
                continue
            instance = next(
                (self.malware.instances[iid] for iid in sorted(self.malware.instances)
                 if self.malware.instances[iid].alive
                 and self.malware.instances[iid].host_id in channel.endpoints),
                None)
            if instance is None:
                continue
            out[cid] = (lambda msg, inst=instance: adversary.spoof_payload(
                inst, msg, self.playbook.spoof_probability, self.rng))
        return out

    # -- monitoring, planning, execution -------------------------------------------------

    def _monitor_and_adjust(self, rt: AgentRuntime, tick: int) -> None:
        pe = rt.plan_exec
        if pe is None:
            return
        feedback = self._collect_effect_feedback(rt, pe)
        if feedback:
            propositions = learning.learn(rt.kb, feedback, [])
            applied = sum(learning.apply_proposition(rt.kb, p) for p in propositions)
            if applied:
                self.emit("agent.learning", agent=rt.state.agent_id,
                          propositions=applied, proposition_kind="effect_stat_update")
        deviations = execution.monitor_execution(pe.records, tick, rt.repertoire)
        deviations += execution.monitor_effects(pe, rt.ws, rt.repertoire)
        if not deviations:
            if pe.finished():
                rt.plan_exec = None
            return
        for dev in deviations:
            payload = dev.to_dict()
            payload["deviation_kind"] = payload.pop("kind")
            self.emit("agent.deviation", agent=rt.state.agent_id, **payload)
        decision = execution.adjust(pe, deviations, rt.repertoire, rt.retry_counts,
                                    rt.ws, rt.roe)
        self.emit("agent.adjustment", agent=rt.state.agent_id, decision=decision.kind,
                  substitute=decision.substitute_action_id)
        if decision.kind == "replan":
            rt.plan_exec = None

    def _collect_effect_feedback(self, rt: AgentRuntime, pe: PlanExecution) -> list[EffectObservation]:
        feedback: list[EffectObservation] = []
        for rec in pe.records:
            if (rec.status is not execution.ActionStatus.DONE or rec.effects_checked
                    or rec.adjusted or rec.finished_tick is None
                    or rec.finished_tick >= rt.ws.tick):
                continue
            spec = rt.repertoire.get(rec.action_id)
            if spec is None or spec.builtin is not None:
                continue
            for idx, eff in enumerate(spec.effects):
                if not eff.expect:
                    continue
                observed = sensing.all_hold(rt.ws.features, eff.expect)
                feedback.append(EffectObservation(
                    observation_id=rt.next_observation_id(self.seed),
                    action_id=rec.action_id,
                    effect_index=idx,
                    observed=observed,
                ))
        return feedback

    def _maybe_plan(self, rt: AgentRuntime, assessment: Assessment, tick: int) -> None:
        if rt.plan_exec is not None or not assessment.problematic:
            if not assessment.problematic:
                rt.no_action_streak = 0
            return
        patterns = list(rt.kb.patterns.values())
        deadline = sensing.effective_deadline(assessment, patterns)
        rules = list(rt.kb.rules.values())
        fast_action, fast_log = planning.fast_rule_select(
            rt.ws, rules, deadline, rt.roe, rt.repertoire)
        if fast_action is not None:
            plan = planning.plan_from_action(fast_action)
            entry = {
                "tick": tick,
                "agent": rt.state.agent_id,
                "path": "fast",
                "trigger": self._trigger_summary(assessment),
                "candidates": [],
                "chosen": {"no_action": False, "action_id": fast_action,
                           "entries": [{"action": fast_action, "offset": 0, "origin": "proposed"}]},
                "rationale": {"deadline_ticks": deadline,
                              "fast_deadline_ticks": rt.roe.fast_deadline_ticks,
                              "rules_evaluated": fast_log},
            }
            self.decision_log.append(entry)
            self.emit("agent.decision", **entry)
            self.emit("agent.plan_released", agent=rt.state.agent_id,
                      entries=entry["chosen"]["entries"], path="fast")
            rt.plan_exec = PlanExecution(plan=plan)
            rt.no_action_streak = 0
            return

        proposals = planning.propose_plans(assessment, rt.ws, rt.repertoire,
                                           rt.kb.goals, rt.planner)
        progression = sensing.progression_deltas(assessment, patterns)
        outcome = planning.select_action_plan(
            proposals, rt.kb.goals, rt.roe, rt.ws, rt.repertoire, rt.planner, progression)
        chosen: dict[str, Any]
        if outcome.plan is not None:
            chosen = {"no_action": False,
                      "entries": [{"action": e.action_id, "offset": e.offset,
                                   "origin": e.origin.value} for e in outcome.plan.entries]}
        else:
            chosen = {"no_action": True, "entries": None}
        entry = {
            "tick": tick,
            "agent": rt.state.agent_id,
            "path": "deliberative",
            "trigger": self._trigger_summary(assessment),
            "candidates": outcome.log["candidates"],
            "chosen": chosen,
            "rationale": {k: v for k, v in outcome.log.items() if k != "candidates"},
        }
        self.decision_log.append(entry)
        self.emit("agent.decision", **entry)
        if outcome.plan is not None:
            self.emit("agent.plan_released", agent=rt.state.agent_id,
                      entries=chosen["entries"], path="deliberative")
            rt.plan_exec = PlanExecution(plan=outcome.plan)
            rt.no_action_streak = 0
        else:
            rt.no_action_streak += 1
            if (rt.no_action_streak >= self.config.collaboration.fail_safe_streak
                    and rt.state.mode is AgentMode.NORMAL):
                execution.fail_safe(rt.state, reason="persistent_no_action")
                self.emit("agent.fail_safe", agent=rt.state.agent_id,
                          reason="persistent_no_action")
                self._attempt_report(rt, tick, reason="fail_safe")

    @staticmethod
    def _trigger_summary(assessment: Assessment) -> dict[str, Any]:
        return {
            "matched": [list(m) for m in assessment.matched],
            "top_severity": assessment.top_severity,
            "problematic": assessment.problematic,
        }

    def _execute(self, rt: AgentRuntime, tick: int) -> None:
        pe = rt.plan_exec
        if pe is None or pe.halted():
            return
        handlers = {"propagate": self._make_propagate_handler(rt)}
        try:
            updates = execution.execute_step(
                pe, self.env, rt.state, tick, rt.repertoire, self.rng,
                snapshot_store=rt.snapshot_store, builtin_handlers=handlers)
        except (ModeForbidden, AuthorityNotHeld) as exc:
            self.emit("agent.plan_dropped", agent=rt.state.agent_id, reason=str(exc))
            rt.plan_exec = None
            return
        for rec in updates:
            if rec.started_tick == tick:
                self.emit("agent.action_started", agent=rt.state.agent_id,
                          action=rec.action_id, entry_index=rec.entry_index,
                          detectability=rt.state.detectability)
            if rec.status is execution.ActionStatus.DONE:
                self.emit("agent.action_done", agent=rt.state.agent_id,
                          action=rec.action_id, entry_index=rec.entry_index)
            elif rec.status is execution.ActionStatus.FAILED:
                self.emit("agent.action_failed", agent=rt.state.agent_id,
                          action=rec.action_id, entry_index=rec.entry_index)
            for observed in rec.observed_effects:
                outcome = observed.get("outcome")
                if outcome is not None and "changes" in outcome:
                    self._record_effect_outcome(outcome)
                elif observed.get("builtin") == "snapshot":
                    self.emit("env.snapshot", agent=rt.state.agent_id,
                              host=rt.state.host_id, token=observed.get("token"))
                elif observed.get("builtin") == "restore" and "outcome" in observed:
                    self.emit("env.restore", agent=rt.state.agent_id,
                              **observed["outcome"])
        if pe.finished():
            rt.plan_exec = None

    def _make_propagate_handler(self, rt: AgentRuntime):
        def handler(spec: ActionSpec) -> tuple[bool, str]:
            target = spec.target_host or ""
            integrity_belief = rt.ws.features.get("host_integrity", 1.0)
            new_id = f"{rt.state.agent_id}_r{rt.replica_count + 1}"
            try:
                replica_state = collaboration.propagate(
                    rt.state, target, self.config.roster, self.env,
                    integrity_belief, self.config.collaboration.propagation_threshold,
                    rt.kb.to_json(), self.rng, self.auth_key, new_id,
                    initial_detectability=rt.spec.detectability)
            except PropagationRefused as exc:
                self.emit("agent.propagation", agent=rt.state.agent_id, target=target,
                          installed=False, refusal=type(exc).__name__, detail=str(exc))
                return False, type(exc).__name__
            rt.replica_count += 1
            replica_spec = AgentSpec(agent_id=new_id, host_id=target,
                                     detectability=rt.spec.detectability)
            runtime = AgentRuntime(
                spec=replica_spec,
                state=replica_state,
                ws=WorldState(),
                kb=rt.kb.copy(),
                roe=self.config.build_roe(),
                planner=self.config.build_planner_config(),
                sensors=self.config.build_sensor_config(),
                repertoire=self.config.build_repertoire(),
            )
            self.agents.append(runtime)
            self.agent_hosts[new_id] = target
            self.emit("agent.propagation", agent=rt.state.agent_id, target=target,
                      installed=True, replica=new_id)
            return True, new_id
        return handler

    # -- reporting -----------------------------------------------------------------------

    def _report_summary(self, rt: AgentRuntime) -> dict[str, Any]:
        assessment = rt.assessment
        return {
            "tick": self.tick,
            "assessment": self._trigger_summary(assessment) if assessment else None,
            "detectability": rt.state.detectability,
            "mode": rt.state.mode.value,
            "recent_decisions": [
                {"tick": d["tick"], "path": d["path"],
                 "no_action": d["chosen"]["no_action"]}
                for d in self.decision_log[-3:] if d["agent"] == rt.state.agent_id
            ],
        }

    def _attempt_report(self, rt: AgentRuntime, tick: int, reason: str) -> None:
        if self.config.c2_host is None:
            return
        rt.last_report_tick = tick  # skipped reports retry next interval
        try:
            outcome = collaboration.report(
                rt.state, self.config.c2_host, self._report_summary(rt), self.env,
                self.rng, self.auth_key, self.config.collaboration.communicate_noise,
                spoofers=self._all_spoofers())
            self.emit("agent.report", agent=rt.state.agent_id,
                      status=outcome.status.value, reason=reason)
        except NoRoute:
            self.emit("agent.report_skipped", agent=rt.state.agent_id,
                      reason="no_route", trigger=reason)

    def _periodic_report(self, rt: AgentRuntime, tick: int) -> None:
        if self.config.c2_host is None or rt.state.mode is AgentMode.DESTROYED:
            return
        if tick - rt.last_report_tick >= self.config.collaboration.report_interval:
            self._attempt_report(rt, tick, reason="interval")

    # -- C2 control phase -------------------------------------------------------------------

    def _c2_phase(self, tick: int) -> None:
        if self.config.c2_host is None:
            return
        for entry in self.config.c2_script:
            if entry["tick"] != tick:
                continue
            recipient = entry["to"]
            target_host = self.agent_hosts.get(recipient)
            if target_host is None:
                self.emit("c2.send_failed", to=recipient, reason="unknown_agent")
                continue
            channel = self.env.route(self.config.c2_host, target_host)
            if channel is None:
                self.emit("c2.send_failed", to=recipient, reason="no_route")
                continue
            msg = collaboration.build_message(
                self.auth_key, collaboration.MessageKind(entry["kind"]),
                "c2", recipient, entry.get("payload", {}))
            delivery = self.env.deliver(channel, msg, self.rng,
                                        spoofer=self._spoofer_for(channel))
            self.emit("c2.sent", to=recipient, message_kind=entry["kind"],
                      status=delivery.status.value)

    # -- episode-end learning ------------------------------------------------------------------

    def _end_of_episode_learning(self) -> None:
        if not self.config.training:
            return
        for rt in sorted(self.agents, key=lambda a: a.state.agent_id):
            if not rt.patterns_matched_episode:
                continue
            confirmed = rt.state.host_id in self.compromised_hosts
            feedback = [
                AssessmentObservation(
                    observation_id=rt.next_observation_id(self.seed),
                    pattern_id=pid,
                    confirmed=confirmed,
                )
                for pid in sorted(rt.patterns_matched_episode)
            ]
            propositions = learning.learn(rt.kb, [], feedback)
            applied = sum(learning.apply_proposition(rt.kb, p) for p in propositions)
            if applied:
                self.emit("agent.learning", agent=rt.state.agent_id,
                          propositions=applied, proposition_kind="pattern_confidence_update")


# -- public entry points --------------------------------------------------------------------

def run_episode(config: ScenarioConfig, seed: int, agent_enabled: bool = True) -> EpisodeResult:
    return Episode(config, seed, agent_enabled=agent_enabled).run()


def run_batch(config: ScenarioConfig, seeds: list[int],
              agent_enabled: bool = True) -> dict[str, Any]:
    """Independent episodes, one per seed; aggregation is a pure fold over
    results sorted by seed."""
    if not seeds:
        raise ConfigInvalid("batch needs at least one seed")
    per_seed: dict[int, dict[str, Any]] = {}
    for seed in sorted(seeds):
        per_seed[seed] = run_episode(config, seed, agent_enabled=agent_enabled).metrics
    numeric_keys = ["resilience_auc", "harm_events", "reward_total"]
    aggregate: dict[str, Any] = {}
    for key in numeric_keys:
        values = [per_seed[s][key] for s in sorted(per_seed)]
        aggregate[key] = {"mean": sum(values) / len(values),
                          "min": min(values), "max": max(values)}
    recoveries = [per_seed[s]["time_to_recovery"] for s in sorted(per_seed)
                  if per_seed[s]["time_to_recovery"] is not None]
    aggregate["time_to_recovery"] = {
        "recovered_runs": len(recoveries),
        "mean": sum(recoveries) / len(recoveries) if recoveries else None,
    }
    aggregate["agent_survived_rate"] = (
        sum(1 for s in per_seed if per_seed[s]["agent_survived"]) / len(per_seed)
        if agent_enabled else None)
    return {"scenario": config.name, "scenario_hash": config.scenario_hash(),
            "seeds": sorted(per_seed), "per_seed": {str(s): per_seed[s] for s in sorted(per_seed)},
            "aggregate": aggregate}


def write_trace(result: EpisodeResult, path: str | Path) -> None:
    lines = [_dump(result.header())]
    lines += [_dump(event) for event in result.trace]
    lines.append(_dump({"kind": "end", "events": len(result.trace), "metrics": result.metrics}))
    Path(path).write_text("\n".join(lines) + "\n")


def write_result(result: EpisodeResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), sort_keys=True, indent=2) + "\n")


def replay(trace_path: str | Path) -> dict[str, Any]:
    """Recompute the metrics block from a trace file alone."""
    try:
        text = Path(trace_path).read_text()
    except OSError as exc:
        raise CorruptTrace(f"cannot read trace: {exc}") from exc
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise CorruptTrace("empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptTrace(f"unparseable header: {exc}") from exc
    version = header.get("schema_version")
    if version != TRACE_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"trace schema_version {version!r}, expected {TRACE_SCHEMA_VERSION}")
    try:
        events = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise CorruptTrace(f"unparseable event line: {exc}") from exc
    if not events or events[-1].get("kind") != "end":
        raise CorruptTrace("trace missing end record")
    end = events.pop()
    if end.get("events") != len(events):
        raise CorruptTrace(
            f"trace truncated: end record says {end.get('events')} events, found {len(events)}")

    series = [e["value"] for e in events if e["kind"] == "tick.functionality"]
    onset_events = [e["tick"] for e in events if e["kind"] == "attack.onset"]
    onset = onset_events[0] if onset_events else None
    harm = sum(1 for e in events if e["kind"] == "harm")
    primary = header.get("primary_agent")
    reward_total = sum(e["reward"] for e in events
                       if e["kind"] == "agent.reward" and e.get("agent") == primary)
    survived: Optional[bool]
    if primary is None:
        survived = None
    else:
        destroyed = any(
            e["kind"] in ("agent.killed", "agent.self_destruct") and e.get("agent") == primary
            for e in events)
        survived = not destroyed
    return {
        "resilience_auc": sum(series) / len(series) if series else 0.0,
        "time_to_recovery": time_to_recovery(series, onset),
        "agent_survived": survived,
        "harm_events": harm,
        "reward_total": reward_total,
    }


def explain(decision_log: list[dict[str, Any]], index: int) -> str:
    """Human-readable rendering of one decision, derived solely from the
    recorded log entry."""
    if index < 0 or index >= len(decision_log):
        raise IndexOutOfRange(f"decision index {index} outside 0..{len(decision_log) - 1}")
    entry = decision_log[index]
    lines: list[str] = []
    trigger = entry["trigger"]
    lines.append(f"Decision {index} at tick {entry['tick']} by agent {entry['agent']}:")
    matched = ", ".join(f"{m[0]} (severity {m[1]:.2f}, confidence {m[2]:.2f})"
                        for m in trigger["matched"]) or "none"
    lines.append(f"  Trigger: matched patterns: {matched}")
    lines.append(f"  Top severity {trigger['top_severity']:.2f}; "
                 f"problematic={trigger['problematic']}")

    rationale = entry.get("rationale", {})
    if entry.get("path") == "fast":
        lines.append(f"  Fast path taken: deadline {rationale['deadline_ticks']} tick(s) "
                     f"< fast threshold {rationale['fast_deadline_ticks']}")
        for ev in rationale.get("rules_evaluated", []):
            lines.append(f"    rule {ev['rule']} (priority {ev['priority']}): "
                         f"condition_held={ev['condition_held']}, roe_ok={ev['roe_ok']}")
        lines.append(f"  Chosen action: {entry['chosen']['action_id']}")
        return "\n".join(lines)

    lines.append(f"  Candidates (utility = benefit - {rationale['risk_weight']}*risk "
                 f"- {rationale['noise_weight']}*noise):")
    for cand in entry.get("candidates", []):
        actions = " -> ".join(cand["actions"]) if cand["actions"] else "(empty plan)"
        verdict = "ok" if cand["roe_ok"] else "FILTERED: " + "; ".join(cand["roe_violations"])
        lines.append(f"    [{actions}] utility {cand['utility']:.4f} = "
                     f"{cand['benefit']:.4f} - {rationale['risk_weight']}*{cand['risk_total']:.4f}"
                     f" - {rationale['noise_weight']}*{cand['noise_total']:.4f} (ROE {verdict})")
    tie = rationale.get("tie_break", {})
    if tie.get("used"):
        lines.append(f"  Tie break: kept {tie['kept']} over {tie['over']} ({tie['rule']})")
    for trim in rationale.get("trims", []):
        lines.append(f"  Trimmed {trim['action']}: {trim['reason']} {trim.get('failing')}")
    for ins in rationale.get("insertions", []):
        lines.append(f"  Inserted {ins['action']} ({ins['origin']})"
                     + (f" before {ins['before']}" if ins.get("before") else ""))
    gate = rationale.get("gate") or {}
    if "inaction_loss" in gate:
        relation = ">" if gate["released"] else "<="
        lines.append(
            f"  Risk gate: inaction loss {gate['inaction_loss']:.4f} - plan loss "
            f"{gate['plan_loss']:.4f} {relation} 0 -> "
            + ("released" if gate["released"] else "no action"))
    elif gate.get("reason"):
        lines.append(f"  Risk gate: {gate['reason']}")
    chosen = entry["chosen"]
    if chosen["no_action"]:
        lines.append("  Chosen: no action")
    else:
        lines.append("  Chosen plan:")
        for e in chosen["entries"]:
            lines.append(f"    +{e['offset']:>3} {e['action']} [{e['origin']}]")
    return "\n".join(lines)


def export_csv(batch: dict[str, Any], path: str | Path) -> None:
    """One row per (scenario, seed) with named metric columns."""
    fields = ["scenario", "seed", "resilience_auc", "time_to_recovery",
              "agent_survived", "harm_events", "reward_total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for seed in batch["seeds"]:
            metrics = batch["per_seed"][str(seed)]
            writer.writerow({"scenario": batch["scenario"], "seed": seed, **metrics})
