import json

import pytest

from defsim.errors import ConfigInvalid, CorruptTrace, IndexOutOfRange, SchemaMismatch
from defsim.runner import (
    explain,
    export_csv,
    replay,
    run_batch,
    run_episode,
    time_to_recovery,
    write_result,
    write_trace,
)
from defsim.scenario import parse_scenario

from conftest import BUNDLED


def quiet_scenario(**overrides):
    """Agent present, no malware: nothing to fix."""
    raw = {
        "schema_version": 1,
        "name": "quiet",
        "duration_ticks": 20,
        "topology": {
            "thresholds": {"up_threshold": 0.8, "down_threshold": 0.3},
            "hosts": [
                {"host_id": "h1",
                 "services": [{"service_id": "svc", "required": True, "weight": 1.0, "health": 1.0}],
                 "processes": [{"process_id": "sys", "image_hash": "s", "known_good": True,
                                "owner": "system"}]},
            ],
            "channels": [],
        },
        "sensors": {
            "physical": ["service_table", "process_table"],
            "logical": ["unknown_proc_count", "service_weights"],
            "transformers": ["functionality_belief", "counts"],
        },
        "patterns": [{"id": "proc", "predicates": [["unknown_proc_count", ">=", 1]],
                      "severity": 0.9, "confidence": 0.9}],
        "repertoire": [{"action_id": "watch", "category": "observe"}],
        "goals": [{"goal_id": "g", "predicates": [["functionality_belief", ">=", 0.95]],
                   "weight": 1.0}],
        "agents": [{"agent_id": "a1", "host_id": "h1"}],
    }
    raw.update(overrides)
    return parse_scenario(raw)


def test_no_malware_full_functionality_and_no_plans():
    result = run_episode(quiet_scenario(), seed=1)
    assert all(v == 1.0 for v in result.functionality_series)
    assert result.metrics["resilience_auc"] == 1.0
    released = [e for e in result.trace if e["kind"] == "agent.plan_released"]
    assert released == []
    assert result.metrics["agent_survived"] is True
    assert result.metrics["harm_events"] == 0


def test_same_config_and_seed_identical_serialization():
    config = quiet_scenario()
    a = run_episode(config, 3)
    b = run_episode(config, 3)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    assert json.dumps(a.trace, sort_keys=True) == json.dumps(b.trace, sort_keys=True)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_determinism_and_replay(name, bundled_configs, tmp_path):
    config = bundled_configs[name]
    first = run_episode(config, 2)
    second = run_episode(config, 2)
    assert json.dumps(first.trace, sort_keys=True) == json.dumps(second.trace, sort_keys=True)
    trace_path = tmp_path / "trace.jsonl"
    write_trace(first, trace_path)
    recomputed = replay(trace_path)
    assert json.dumps(recomputed, sort_keys=True) == json.dumps(first.metrics, sort_keys=True)


def test_batch_singleton_equals_episode_metrics():
    config = quiet_scenario()
    batch = run_batch(config, [4])
    episode = run_episode(config, 4)
    assert batch["per_seed"]["4"] == episode.metrics
    assert batch["aggregate"]["resilience_auc"]["mean"] == episode.metrics["resilience_auc"]


def test_batch_order_insensitive():
    config = quiet_scenario()
    forward = run_batch(config, [1, 2, 3])
    shuffled = run_batch(config, [3, 1, 2])
    assert json.dumps(forward, sort_keys=True) == json.dumps(shuffled, sort_keys=True)


def test_batch_requires_seeds():
    with pytest.raises(ConfigInvalid):
        run_batch(quiet_scenario(), [])


def test_batch_csv_export(tmp_path):
    config = quiet_scenario()
    batch = run_batch(config, [1, 2])
    path = tmp_path / "metrics.csv"
    export_csv(batch, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("scenario,seed,resilience_auc")
    assert len(lines) == 3


# -- trace file handling ----------------------------------------------------------------------

def test_replay_truncated_trace_is_corrupt(tmp_path):
    result = run_episode(quiet_scenario(), 1)
    path = tmp_path / "trace.jsonl"
    write_trace(result, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")  # drop the end record and more
    with pytest.raises(CorruptTrace):
        replay(path)


def test_replay_wrong_event_count_is_corrupt(tmp_path):
    result = run_episode(quiet_scenario(), 1)
    path = tmp_path / "trace.jsonl"
    write_trace(result, path)
    lines = path.read_text().splitlines()
    del lines[5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptTrace):
        replay(path)


def test_replay_garbage_line_is_corrupt(tmp_path):
    result = run_episode(quiet_scenario(), 1)
    path = tmp_path / "trace.jsonl"
    write_trace(result, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])  # cut mid line
    with pytest.raises(CorruptTrace):
        replay(path)


def test_replay_schema_mismatch_names_version(tmp_path):
    result = run_episode(quiet_scenario(), 1)
    path = tmp_path / "trace.jsonl"
    write_trace(result, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = 0
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(SchemaMismatch) as err:
        replay(path)
    assert "0" in str(err.value)


# -- explain -----------------------------------------------------------------------------------

def test_explain_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        explain([], 0)


def test_explain_released_plan_lists_origins(bundled_results):
    result = bundled_results[("s1_comms_spoof", 1)]
    released = [i for i, d in enumerate(result.decision_log)
                if not d["chosen"]["no_action"] and d["path"] == "deliberative"]
    text = explain(result.decision_log, released[0])
    assert "Risk gate" in text
    assert "[proposed]" in text
    assert "[precautionary]" in text or "[post_execution]" in text
    assert "utility" in text


def test_explain_no_action_states_gate_numbers(bundled_results):
    for seed in range(1, 6):
        result = bundled_results[("s2_lateral_hunt", seed)]
        withheld = [i for i, d in enumerate(result.decision_log)
                    if d["chosen"]["no_action"] and d["rationale"].get("gate", {}).get(
                        "inaction_loss") is not None]
        if withheld:
            text = explain(result.decision_log, withheld[0])
            assert "inaction loss" in text and "plan loss" in text
            assert "no action" in text
            return
    pytest.fail("no gated no_action decision found in s2 seeds 1..5")


def test_explain_names_tie_break():
    from defsim.runner import explain as render
    entry = {
        "tick": 1, "agent": "a1", "path": "deliberative",
        "trigger": {"matched": [["p", 0.9, 0.9]], "top_severity": 0.9, "problematic": True},
        "candidates": [
            {"actions": ["a_fix"], "utility": 0.5, "benefit": 0.5, "risk_total": 0.0,
             "noise_total": 0.0, "roe_ok": True, "roe_violations": []},
            {"actions": ["b_fix"], "utility": 0.5, "benefit": 0.5, "risk_total": 0.0,
             "noise_total": 0.0, "roe_ok": True, "roe_violations": []},
        ],
        "chosen": {"no_action": False,
                   "entries": [{"action": "a_fix", "offset": 0, "origin": "proposed"}]},
        "rationale": {
            "risk_weight": 1.0, "noise_weight": 0.5,
            "tie_break": {"used": True, "kept": ["a_fix"], "over": ["b_fix"],
                          "rule": "lexicographic_action_ids"},
            "trims": [], "insertions": [],
            "gate": {"inaction_loss": 1.0, "plan_loss": 0.0, "released": True},
            "winner": ["a_fix"],
        },
    }
    text = render([entry], 0)
    assert "lexicographic_action_ids" in text


def test_explain_fast_decision_renders_rules(bundled_results):
    for seed in range(1, 6):
        result = bundled_results[("s2_lateral_hunt", seed)]
        fast = [i for i, d in enumerate(result.decision_log) if d["path"] == "fast"]
        if fast:
            text = explain(result.decision_log, fast[0])
            assert "Fast path taken" in text
            assert "Chosen action" in text
            return
    pytest.fail("no fast decision in s2 seeds 1..5")


# -- metrics ------------------------------------------------------------------------------------

def test_time_to_recovery_requires_sustained_level():
    series = [1.0] * 3 + [0.2] * 5 + [0.96] * 9 + [0.2] + [0.97] * 12
    # onset at 3; the 9-tick plateau is too short, the 12-tick one qualifies
    assert time_to_recovery(series, 3) == 18
    assert time_to_recovery(series, None) is None
    assert time_to_recovery([1.0] * 30, None) is None


def test_forbidding_destructive_actions_forces_zero_harm(bundled_configs):
    raw = json.loads(json.dumps(bundled_configs["s1_comms_spoof"].raw))
    raw["roe"]["forbidden_categories"] = ["destructive"]
    config = parse_scenario(raw)
    for seed in range(1, 6):
        result = run_episode(config, seed)
        assert result.metrics["harm_events"] == 0
        assert not any(e["kind"] == "harm" for e in result.trace)


def test_decision_log_complete_for_released_plans(bundled_results):
    for result in bundled_results.values():
        released_events = [e for e in result.trace if e["kind"] == "agent.plan_released"]
        released_decisions = [d for d in result.decision_log if not d["chosen"]["no_action"]]
        assert len(released_events) == len(released_decisions)


def test_control_commands_apply_at_decision_boundary(bundled_results):
    result = bundled_results[("s1_comms_spoof", 1)]
    queued = [e for e in result.trace if e["kind"] == "agent.control_queued"]
    applied = [e for e in result.trace if e["kind"] == "agent.control_applied"]
    assert queued and applied
    for event in applied:
        same_tick = [e for e in result.trace
                     if e["tick"] == event["tick"] and e.get("agent") == event["agent"]]
        action_events = [e for e in same_tick if e["kind"] == "agent.action_started"]
        # execution within the tick happens only after the boundary
        for act in action_events:
            assert act["seq"] > event["seq"]


def test_remote_authority_suspends_execution(bundled_results):
    result = bundled_results[("s3_partition", 1)]
    grants = [e for e in result.trace
              if e["kind"] == "agent.handover" and e["authority"] == "remote_c2"]
    returns = [e for e in result.trace
               if e["kind"] == "agent.handover" and e["authority"] == "agent"]
    assert grants and returns
    start, end = grants[0]["tick"], returns[0]["tick"]
    a1_actions = [e for e in result.trace
                  if e["kind"] == "agent.action_started" and e.get("agent") == "a1"
                  and start < e["tick"] < end]
    assert a1_actions == []
    reports = [e for e in result.trace
               if e["kind"] == "agent.report" and e.get("agent") == "a1"
               and start < e["tick"] < end]
    assert reports  # it keeps reporting while supervised


def test_result_file_round_trip(tmp_path):
    result = run_episode(quiet_scenario(), 1)
    path = tmp_path / "result.json"
    write_result(result, path)
    data = json.loads(path.read_text())
    assert data["metrics"] == result.metrics
    assert data["decision_log"] == result.decision_log


def test_set_roe_zero_risk_budget_filters_all_risky_plans(bundled_configs):
    # supervisor zeroes the risk budget early: afterwards no released plan
    # may contain a nonzero-risk action
    raw = json.loads(json.dumps(bundled_configs["s1_comms_spoof"].raw))
    raw["c2"]["script"] = [{"tick": 0, "kind": "ControlCommand", "to": "a1",
                            "payload": {"command": "set_roe", "field": "max_plan_risk",
                                        "value": 0.0}}]
    config = parse_scenario(raw)
    risk_of = {a["action_id"]: a.get("risk", 0.0) for a in raw["repertoire"]}
    for seed in (1, 2):
        result = run_episode(config, seed)
        applied = [e for e in result.trace if e["kind"] == "agent.control_applied"]
        assert applied and applied[0]["tick"] == 1  # arrives next tick, applied at boundary
        boundary = applied[0]["tick"]
        for event in result.trace:
            if event["kind"] == "agent.plan_released" and event["tick"] > boundary:
                assert all(risk_of.get(e["action"], 0.0) == 0.0 for e in event["entries"])
