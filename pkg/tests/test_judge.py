"""Rule judge equivalence table, LLM judge parsing, reward broadcast."""
from __future__ import annotations

import random

import pytest

from agentloop.gateway import StubBackend, StubRule
from agentloop.judge import LLM, RULE, broadcast_reward, judge_llm, judge_rule, normalize_answer
from conftest import fabricate_trajectory


@pytest.mark.parametrize("answer,truth,expected", [
    ("1,000", "1000", True),
    ("1/2", "0.5", True),
    ("0.5", "1/2", True),
    ("Paris", "PARIS", True),
    ("Paris", "London", False),
    ("$1,000", "1000", True),
    ("42 years", "42", True),
    ("(13-1)*(1+1)", "(13-1)*(1+1)", True),
    ("  spaced   out  ", "spaced out", True),
    ("3", "3.0", True),
    ("81", "82", False),
])
def test_rule_judge_equivalence_table(answer, truth, expected):
    assert judge_rule(answer, truth).correct is expected


@pytest.mark.parametrize("answer,expected", [
    ("A", True),
    ("a", True),
    ("81 years", True),
    ("A. 81 years", True),
    ("1st", True),
    ("B", False),
    ("77 years", False),
])
def test_rule_judge_mcq(answer, expected):
    assert judge_rule(answer, "A. 81 years").correct is expected


def test_rule_judge_blank_is_incorrect_with_note():
    verdict = judge_rule("", "x")
    assert not verdict.correct
    assert "unjudgeable" in verdict.analysis
    assert judge_rule("x", "  ").correct is False


def test_rule_judge_symmetry_non_mcq():
    rng = random.Random(3)
    words = ["paris", "london", "42", "0.5", "1/2", "blue whale", "1000", "1,000"]
    for _ in range(200):
        a, b = rng.choice(words), rng.choice(words)
        assert judge_rule(a, b).correct == judge_rule(b, a).correct


def test_normalize_answer_pipeline():
    assert normalize_answer(" The value is:\n \\boxed{1,000} ") == "1000"
    assert normalize_answer("Reasoning line\nFinal line.") == "final line"
    assert normalize_answer("97%") == "97"


def test_rule_judge_boxed_content():
    assert judge_rule("thinking...\n\\boxed{1/2}", "0.5").correct


def _stub(responses):
    return StubBackend([StubRule(match="Determine if the Model Response",
                                 responses=list(responses))])


def test_llm_judge_parses_tagged_output():
    backend = _stub(["<analysis>equal</analysis><true_false>True</true_false>"])
    verdict = judge_llm("q", "a", "a", backend)
    assert verdict.correct is True
    assert verdict.source == LLM


def test_llm_judge_parses_colon_format_case_insensitive():
    backend = _stub(["<analysis>: differs\n<true_false>: \"false\""])
    verdict = judge_llm("q", "a", "b", backend)
    assert verdict.correct is False
    assert verdict.source == LLM


def test_llm_judge_falls_back_to_rule_after_two_malformed():
    backend = _stub(["no markers here", "still no markers"])
    verdict = judge_llm("q", "1,000", "1000", backend)
    assert verdict.source == RULE
    assert verdict.correct is True  # rule fallback judges the equivalence


def test_broadcast_reward_uniform(policy):
    import numpy as np

    params = policy.init_params()
    rng = np.random.default_rng(0)
    trajectory = fabricate_trajectory(policy, params, rng, 3)
    verdict = judge_rule("1,000", "1000")
    updated = broadcast_reward(trajectory, verdict)
    assert updated.reward == 1.0
    assert updated.turn_rewards == (1.0, 1.0, 1.0)

    single = fabricate_trajectory(policy, params, rng, 1)
    updated = broadcast_reward(single, judge_rule("a", "b"))
    assert updated.turn_rewards == (0.0,)


def test_broadcast_reward_property_single_distinct_value(policy):
    import numpy as np

    params = policy.init_params()
    rng = np.random.default_rng(1)
    for _ in range(100):
        trajectory = fabricate_trajectory(policy, params, rng, int(rng.integers(1, 11)))
        correct = bool(rng.integers(2))
        verdict = judge_rule("x", "x") if correct else judge_rule("x", "y")
        updated = broadcast_reward(trajectory, verdict)
        assert updated.reward in (0.0, 1.0)
        assert len(set(updated.turn_rewards)) == 1
        assert updated.turn_rewards[0] == updated.reward
