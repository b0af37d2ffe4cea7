from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from defsim.errors import SchemaMismatch
from defsim.learning import (
    AssessmentObservation,
    EffectObservation,
    KnowledgeBase,
    Proposition,
    apply_proposition,
    improve_knowledge,
    learn,
    reward,
)
from defsim.planning import ConditionActionRule, Goal, normalize_goals
from defsim.sensing import Pattern, WorldState


def ws_with(**features):
    return WorldState(tick=7, features=dict(features))


def goals_of(*specs):
    return normalize_goals([Goal(f"g{i}", [pred], w) for i, (pred, w) in enumerate(specs)])


# -- reward -----------------------------------------------------------------------------

def test_reward_zero_when_all_goals_hold():
    goals = goals_of((("x", ">=", 1), 1.0), (("y", "<=", 0), 3.0))
    sample = reward(goals, ws_with(x=1, y=0))
    assert sample.reward == 0.0
    assert sample.tick == 7


def test_reward_minus_one_when_nothing_holds():
    goals = goals_of((("x", ">=", 1), 1.0), (("y", "<=", 0), 1.0))
    assert reward(goals, ws_with(x=0, y=5)).reward == -1.0


def test_reward_weighted_quarter_split():
    # weights 0.25/0.75, only the 0.75 goal satisfied: reward -0.25
    goals = goals_of((("x", ">=", 1), 0.25), (("y", ">=", 1), 0.75))
    assert reward(goals, ws_with(x=0, y=1)).reward == pytest.approx(-0.25)


@given(st.lists(st.tuples(st.booleans(), st.floats(min_value=0.05, max_value=5,
                                                   allow_nan=False)),
                min_size=1, max_size=6))
@settings(max_examples=150, deadline=None)
def test_reward_bounds_and_zero_iff_all_hold(spec):
    goals = normalize_goals(
        [Goal(f"g{i}", [("sat", ">=", 1)] if holds else [("sat", ">=", 2)], w)
         for i, (holds, w) in enumerate(spec)])
    sample = reward(goals, ws_with(sat=1))
    assert -1.0 <= sample.reward <= 0.0
    if all(holds for holds, _ in spec):
        assert sample.reward == 0.0
    else:
        assert sample.reward < 0.0


# -- effect statistics ------------------------------------------------------------------------

def test_zero_trials_estimate_is_half():
    assert KnowledgeBase().estimate("act", 0) == 0.5


def test_learn_counts_observed_and_missed():
    kb = KnowledgeBase()
    feedback = [
        EffectObservation("o1", "act", 0, observed=True),
        EffectObservation("o2", "act", 0, observed=False),
    ]
    for proposition in learn(kb, feedback, []):
        assert proposition.kind == "effect_stat_update"
        apply_proposition(kb, proposition)
    assert kb.effect_stats[("act", 0)] == (1, 2)
    assert kb.estimate("act", 0) == pytest.approx(2 / 4)


def test_estimate_converges_to_ground_truth():
    # simulator effect with true probability 0.7: estimate in [0.65, 0.75]
    # after 1000 seeded trials
    kb = KnowledgeBase()
    rng = Random(99)
    feedback = [EffectObservation(f"o{i}", "act", 0, observed=rng.random() < 0.7)
                for i in range(1000)]
    for proposition in learn(kb, feedback, []):
        apply_proposition(kb, proposition)
    assert 0.65 <= kb.estimate("act", 0) <= 0.75


def test_pattern_confidence_is_confirmed_over_matched():
    kb = KnowledgeBase()
    kb.patterns["p"] = Pattern("p", [("x", ">=", 1)], 0.8, confidence=0.9)
    feedback = [
        AssessmentObservation("a1", "p", confirmed=True),
        AssessmentObservation("a2", "p", confirmed=False),
        AssessmentObservation("a3", "p", confirmed=True),
    ]
    for proposition in learn(kb, [], feedback):
        assert proposition.kind == "pattern_confidence_update"
        apply_proposition(kb, proposition)
    assert kb.pattern_stats["p"] == (2, 3)
    assert kb.patterns["p"].confidence == pytest.approx(2 / 3)


def test_proposition_application_is_idempotent_per_observation():
    kb = KnowledgeBase()
    proposition = Proposition("effect_stat_update", "obs-1",
                              {"action_id": "act", "effect_index": 0, "observed": True})
    assert apply_proposition(kb, proposition) is True
    assert apply_proposition(kb, proposition) is False
    assert kb.effect_stats[("act", 0)] == (1, 1)


# -- guarded merge -----------------------------------------------------------------------------

class StubReplay:
    """Replay whose reward depends on how close the estimate is to truth."""

    def __init__(self, truth=0.7):
        self.truth = truth

    def cumulative_reward(self, kb):
        return -abs(kb.estimate("act", 0) - self.truth)


def test_empty_propositions_keep_knowledge_base():
    kb = KnowledgeBase()
    assert improve_knowledge(kb, [], StubReplay()) is kb


def test_improving_proposition_accepted():
    kb = KnowledgeBase()  # estimate 0.5, truth 0.7
    propositions = [Proposition("effect_stat_update", f"o{i}",
                                {"action_id": "act", "effect_index": 0, "observed": True})
                    for i in range(5)]  # estimate -> 6/7, closer to 0.7 than 0.5
    merged = improve_knowledge(kb, propositions, StubReplay(truth=0.7))
    assert merged is not kb
    assert merged.effect_stats[("act", 0)] == (5, 5)


def test_degrading_proposition_rejected():
    kb = KnowledgeBase()
    for i in range(10):  # estimate 11/12 with truth 11/12: incumbent nearly exact
        apply_proposition(kb, Proposition(
            "effect_stat_update", f"seed{i}",
            {"action_id": "act", "effect_index": 0, "observed": True}))
    truth = kb.estimate("act", 0)
    corrupt = [Proposition("effect_stat_update", f"bad{i}",
                           {"action_id": "act", "effect_index": 0, "observed": False})
               for i in range(20)]
    merged = improve_knowledge(kb, corrupt, StubReplay(truth=truth))
    assert merged is kb
    assert kb.effect_stats[("act", 0)] == (10, 10)


def test_merge_never_decreases_replay_reward():
    rng = Random(5)
    replay = StubReplay(truth=0.6)
    kb = KnowledgeBase()
    for round_no in range(10):
        propositions = [
            Proposition("effect_stat_update", f"r{round_no}:{i}",
                        {"action_id": "act", "effect_index": 0,
                         "observed": rng.random() < 0.6})
            for i in range(rng.randint(1, 8))
        ]
        before = replay.cumulative_reward(kb)
        kb = improve_knowledge(kb, propositions, replay)
        assert replay.cumulative_reward(kb) >= before


def test_new_pattern_proposition():
    kb = KnowledgeBase()
    proposition = Proposition("new_pattern", "np-1", {"pattern": {
        "id": "fresh", "predicates": [["x", ">=", 2]], "severity": 0.7, "confidence": 0.5}})
    apply_proposition(kb, proposition)
    assert "fresh" in kb.patterns
    assert kb.patterns["fresh"].predicates == [("x", ">=", 2)]


# -- serialization ---------------------------------------------------------------------------------

def test_knowledge_base_round_trip():
    kb = KnowledgeBase()
    kb.patterns["p"] = Pattern("p", [("x", ">=", 1)], 0.8, 0.9,
                               progression=[("x", "add", -0.1)], deadline_ticks=2)
    kb.rules["r"] = ConditionActionRule("r", [("x", ">=", 2)], "act", 1)
    kb.goals = normalize_goals([Goal("g", [("x", ">=", 1)], 1.0)])
    kb.note_effect_outcome("act", 0, True)
    data = kb.to_json()
    back = KnowledgeBase.from_json(data)
    assert back.to_json() == data


def test_knowledge_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        KnowledgeBase.from_json({"schema_version": 99})
