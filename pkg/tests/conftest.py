"""Shared test helpers: frozen clock, fabricated trajectories for optimizer math."""
from __future__ import annotations

import numpy as np
import pytest

from agentloop.memory import CONTINUE, STOP, PlannerDecision, VerificationVerdict
from agentloop.orchestrator import Trajectory, TurnRecord
from agentloop.policy import LinearSoftmaxPolicy
from agentloop.toolkit import OK, ExecutionResult


class FrozenClock:
    """Deterministic clock; ticks by a fixed increment per call."""

    def __init__(self, start: float = 1_700_000_000.0, step: float = 1.0):
        self.now = start
        self.step = step

    def __call__(self) -> float:
        value = self.now
        self.now += self.step
        return value


@pytest.fixture
def frozen_clock():
    return FrozenClock()


@pytest.fixture
def policy():
    return LinearSoftmaxPolicy()


def make_turn(action, turn_index: int, decision_tool: str = "Calculator",
              stop: bool = False) -> TurnRecord:
    return TurnRecord(
        turn_index=turn_index,
        state_snapshot="",
        raw_planner_text="",
        decision=PlannerDecision(justification="", context="", sub_goal="test",
                                 tool_name=decision_tool),
        action=action,
        command="execution = tool.execute(query=\"test\")",
        execution=ExecutionResult(output="", elapsed=0.0, status=OK),
        verdict=VerificationVerdict(analysis="", decision=STOP if stop else CONTINUE),
    )


def fabricate_trajectory(policy, params, rng: np.random.Generator, n_turns: int,
                         reward=None) -> Trajectory:
    """Trajectory whose actions were genuinely sampled from `params` (so the
    stored log-probs are exact behavior-policy log-probs)."""
    turns = []
    for t in range(n_turns):
        features = rng.uniform(-1.0, 1.0, policy.feature_dim)
        action = policy.sample_action(params, features, rng)
        turns.append(make_turn(action, t + 1, stop=(t == n_turns - 1)))
    turn_rewards = (reward,) * n_turns if reward is not None else ()
    return Trajectory(
        query="synthetic",
        ground_truth=None,
        turns=tuple(turns),
        solution="Answer: none",
        answer="none",
        answer_flagged=False,
        policy_version=params.version,
        seed=0,
        trainable=True,
        reward=reward,
        turn_rewards=turn_rewards,
    )


def fabricate_group(policy, params, rng: np.random.Generator, rewards,
                    max_turns: int = 3):
    """RolloutGroup over freshly sampled trajectories with the given rewards."""
    from agentloop.grpo import RolloutGroup, group_advantages

    trajectories = []
    for reward in rewards:
        n_turns = int(rng.integers(1, max_turns + 1))
        trajectories.append(fabricate_trajectory(policy, params, rng, n_turns, reward=reward))
    advantages = tuple(group_advantages(list(rewards)))
    return RolloutGroup(
        query="synthetic",
        ground_truth=None,
        trajectories=tuple(trajectories),
        rewards=tuple(rewards),
        advantages=advantages,
        policy_version=params.version,
    )
