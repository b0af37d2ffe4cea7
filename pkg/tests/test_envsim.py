from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from defsim.envsim import (
    ChannelState,
    DeliveryStatus,
    EffectDescriptor,
    EnvEvent,
    FileEntry,
    Owner,
    Process,
    Service,
    ServiceState,
)
from defsim.errors import NoRequiredServices, StaleToken, UnknownChannel, UnknownEntity

from conftest import make_env, make_host, two_host_env


# -- step ----------------------------------------------------------------------

def test_step_empty_schedule_returns_nothing():
    env = make_env()
    assert env.step(5) == []


def test_step_applies_scheduled_deliveries_in_seq_order():
    env = two_host_env()
    arrival = 3
    for seq, tag in ((1, "second"), (0, "first")):
        env._scheduled.setdefault(arrival, []).append(EnvEvent(
            tick=arrival, seq=seq, kind="message_delivered",
            payload={"channel": "c1", "message": {"recipient": "a1", "tag": tag}}))
    events = env.step(3)
    assert [e.seq for e in events] == [0, 1]
    assert [m["tag"] for m in env.inboxes["a1"]] == ["first", "second"]


# -- apply_effect ----------------------------------------------------------------

def test_set_host_integrity():
    env = make_env()
    outcome = env.apply_effect(EffectDescriptor("host:h1", "integrity", "set", 0.5))
    assert env.hosts["h1"].integrity == 0.5
    assert outcome["changes"][0]["old"] == 1.0
    assert outcome["changes"][0]["new"] == 0.5


def test_add_clamps_integrity_to_zero():
    env = make_env()
    env.apply_effect(EffectDescriptor("host:h1", "integrity", "set", 0.3))
    env.apply_effect(EffectDescriptor("host:h1", "integrity", "add", -0.9))
    assert env.hosts["h1"].integrity == 0.0


def test_kill_absent_process_is_unknown_entity():
    env = make_env()
    with pytest.raises(UnknownEntity):
        env.apply_effect(EffectDescriptor("process:h1:nope", "", "kill"))


def test_spawn_then_kill_process():
    env = make_env()
    env.apply_effect(EffectDescriptor("process:h1:mal1", "", "spawn",
                                      {"image_hash": "x", "known_good": False, "owner": "malware"}))
    assert "mal1" in env.hosts["h1"].processes
    env.apply_effect(EffectDescriptor("process:h1:mal1", "", "kill"))
    assert "mal1" not in env.hosts["h1"].processes


def test_unknown_selector_sweeps_only_bad_processes():
    env = make_env(hosts=[make_host("h1", processes=[
        Process("good", "sys", True, Owner.SYSTEM),
        Process("bad_b", "x", False, Owner.MALWARE),
        Process("bad_a", "x", False, Owner.MALWARE),
    ])])
    outcome = env.apply_effect(EffectDescriptor("process:h1:@unknown", "", "kill"))
    assert [c["entity"] for c in outcome["changes"]] == ["process:h1:bad_a", "process:h1:bad_b"]
    assert set(env.hosts["h1"].processes) == {"good"}


def test_service_state_refreshes_and_outcome_records_transition():
    env = make_env()
    outcome = env.apply_effect(EffectDescriptor("service:h1:web", "health", "set", 0.1))
    change = outcome["changes"][0]
    assert change["old_state"] == "up"
    assert change["new_state"] == "down"
    assert change["required"] is True


def test_setting_channel_healthy_clears_drop_and_delay():
    env = two_host_env(channel_state="degraded", drop=0.4, delay=2)
    env.apply_effect(EffectDescriptor("channel:c1", "state", "set", "healthy"))
    ch = env.channels["c1"]
    assert ch.drop_probability == 0.0 and ch.delay_ticks == 0


# -- functionality ------------------------------------------------------------------

def test_functionality_all_up_is_one():
    env = make_env()
    assert env.functionality() == 1.0


def test_functionality_all_down_is_zero():
    env = make_env()
    env.apply_effect(EffectDescriptor("service:h1:web", "health", "set", 0.0))
    assert env.functionality() == 0.0


def test_functionality_weighted_three_quarters():
    # two required services, weights 1 and 3, only the weight-3 one up: 3/4
    env = make_env(hosts=[make_host("h1", services=[
        Service("small", True, 1.0, 0.0, ServiceState.DOWN),
        Service("big", True, 3.0, 1.0),
    ])])
    assert env.functionality() == 0.75


def test_functionality_requires_a_required_service():
    env = make_env(hosts=[make_host("h1", services=[Service("opt", False, 1.0, 1.0)])])
    with pytest.raises(NoRequiredServices):
        env.functionality()


def test_functionality_monotone_in_service_state():
    env = make_env(hosts=[make_host("h1", services=[
        Service("a", True, 2.0, 0.0, ServiceState.DOWN),
        Service("b", True, 1.0, 1.0),
    ])])
    before = env.functionality()
    env.apply_effect(EffectDescriptor("service:h1:a", "health", "set", 1.0))
    assert env.functionality() >= before


# -- deliver ---------------------------------------------------------------------------

def msg(recipient="a2"):
    return {"kind": "StatusReport", "sender": "a1", "recipient": recipient, "payload": {}}


def test_deliver_healthy_immediate():
    env = two_host_env()
    env.step(0)
    out = env.deliver("c1", msg(), Random(1))
    assert out.status is DeliveryStatus.DELIVERED and out.delay == 0
    assert env.inboxes["a2"]


def test_deliver_disabled_always_dropped():
    env = two_host_env("disabled")
    for seed in range(20):
        assert env.deliver("c1", msg(), Random(seed)).status is DeliveryStatus.DROPPED
    assert "a2" not in env.inboxes


def test_deliver_degraded_certain_drop():
    env = two_host_env("degraded", drop=1.0)
    assert env.deliver("c1", msg(), Random(3)).status is DeliveryStatus.DROPPED


def test_deliver_degraded_delay_schedules_arrival():
    env = two_host_env("degraded", drop=0.0, delay=2)
    env.step(4)
    out = env.deliver("c1", msg(), Random(1))
    assert out.status is DeliveryStatus.DELIVERED and out.delay == 2
    assert "a2" not in env.inboxes
    env.step(5)
    assert "a2" not in env.inboxes
    events = env.step(6)
    assert [e.kind for e in events] == ["message_delivered"]
    assert env.inboxes["a2"]


def test_deliver_spoofed_is_observed_and_substitutable():
    env = two_host_env("spoofed")
    env.step(0)
    out = env.deliver("c1", msg(), Random(1), spoofer=lambda m: dict(m, payload={"forged": True}))
    assert out.status is DeliveryStatus.OBSERVED_AND_DELIVERED
    assert env.channels["c1"].observed_by_malware
    assert env.inboxes["a2"][0]["payload"] == {"forged": True}


def test_deliver_unknown_channel():
    env = two_host_env()
    with pytest.raises(UnknownChannel):
        env.deliver("nope", msg(), Random(1))


# -- snapshot / restore ------------------------------------------------------------------

def test_snapshot_restore_identity():
    env = make_env()
    before = (dict(env.hosts["h1"].services), dict(env.hosts["h1"].processes))
    token = env.snapshot("h1")
    env.restore(token)
    host = env.hosts["h1"]
    assert set(host.services) == set(before[0]) and set(host.processes) == set(before[1])


def test_restore_returns_service_fields_to_snapshot_values():
    env = make_env()
    token = env.snapshot("h1")
    env.apply_effect(EffectDescriptor("service:h1:web", "health", "set", 0.0))
    assert env.hosts["h1"].services["web"].state is ServiceState.DOWN
    env.restore(token)
    svc = env.hosts["h1"].services["web"]
    assert svc.health == 1.0 and svc.state is ServiceState.UP and svc.required and svc.weight == 1.0


def test_restore_after_host_removed_is_stale():
    env = make_env()
    token = env.snapshot("h1")
    del env.hosts["h1"]
    with pytest.raises(StaleToken):
        env.restore(token)


def test_restore_preserves_malware_and_agent_presence():
    env = make_env()
    token = env.snapshot("h1")
    env.apply_effect(EffectDescriptor("process:h1:mal", "", "spawn", {"owner": "malware"}))
    env.install_agent("a1", "h1")
    env.restore(token)
    host = env.hosts["h1"]
    assert "mal" in host.processes
    assert host.resident_agent == "a1"
    assert "agent_proc_a1" in host.processes


# -- properties -----------------------------------------------------------------------------

@given(st.lists(st.tuples(st.sampled_from(["set", "add"]),
                          st.floats(min_value=-2, max_value=2, allow_nan=False)),
                max_size=30))
@settings(max_examples=100, deadline=None)
def test_fractions_stay_in_unit_interval(ops):
    env = make_env()
    for op, value in ops:
        env.apply_effect(EffectDescriptor("host:h1", "integrity", op, value))
        env.apply_effect(EffectDescriptor("service:h1:web", "health", op, value))
        assert 0.0 <= env.hosts["h1"].integrity <= 1.0
        assert 0.0 <= env.hosts["h1"].services["web"].health <= 1.0


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=60, deadline=None)
def test_disabled_channel_never_delivers_any_seed(seed):
    env = two_host_env("disabled")
    assert env.deliver("c1", msg(), Random(seed)).status is DeliveryStatus.DROPPED
