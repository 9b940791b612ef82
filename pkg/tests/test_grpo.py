"""Optimizer math: advantages, ratios, clipping, KL, objective, gradients, training."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from agentloop import grpo
from agentloop.errors import (
    ConfigError,
    GroupTooSmall,
    MissingLogprobs,
    NonFiniteRatio,
)
from agentloop.policy import LinearSoftmaxPolicy, PolicyParameters, iter_prefixes
from agentloop.synthenv import ARITH_TARGET, SynthEnvironment
from conftest import fabricate_group, fabricate_trajectory, make_turn


def _perturbed(policy, params, rng, scale):
    return PolicyParameters(theta=params.theta + rng.normal(0.0, scale, policy.param_count),
                            version="v1")


# --- group advantages -------------------------------------------------------------


def test_group_advantages_degenerate_all_equal():
    assert grpo.group_advantages([1, 1, 1, 1]) == [0.0, 0.0, 0.0, 0.0]
    assert grpo.group_advantages([0, 0]) == [0.0, 0.0]


def test_group_advantages_symmetric_pair():
    advantages = grpo.group_advantages([1, 0])
    assert advantages == pytest.approx([1.0, -1.0], abs=1e-12)


def test_group_advantages_single_success_frozen_values():
    # Expected values recomputed independently: mean 0.25, population std
    # sqrt(3)/4; (1 - 0.25) / (sqrt(3)/4) = sqrt(3) and (0 - 0.25each) likewise.
    advantages = grpo.group_advantages([1, 0, 0, 0])
    assert advantages == pytest.approx([1.7320508, -0.5773503, -0.5773503, -0.5773503],
                                       abs=1e-6)


def test_group_advantages_normalization_property():
    rng = np.random.default_rng(0)
    for _ in range(500):
        size = int(rng.choice([2, 4, 8]))
        rewards = rng.integers(0, 2, size).astype(float)
        if rewards.min() == rewards.max():
            rewards[0] = 1.0 - rewards[0]
        advantages = np.array(grpo.group_advantages(list(rewards)))
        assert abs(advantages.mean()) < 1e-9
        assert abs(advantages.std() - 1.0) < 1e-9


def test_group_advantages_too_small():
    with pytest.raises(GroupTooSmall):
        grpo.group_advantages([1.0])


# --- token ratio / clipped term ------------------------------------------------------


def test_token_ratio_identity_and_ln2():
    assert grpo.token_ratio(-1.5, -1.5) == 1.0
    assert grpo.token_ratio(math.log(2) - 1.0, -1.0) == pytest.approx(2.0, abs=1e-12)


def test_token_ratio_matches_direct_quotient():
    # Direct-quotient oracle over random small distributions.
    rng = np.random.default_rng(1)
    for _ in range(200):
        p_new = rng.dirichlet(np.ones(5))
        p_old = rng.dirichlet(np.ones(5))
        token = int(rng.integers(5))
        ratio = grpo.token_ratio(math.log(p_new[token]), math.log(p_old[token]))
        assert ratio == pytest.approx(p_new[token] / p_old[token], rel=1e-12)


def test_token_ratio_rejects_non_finite():
    with pytest.raises(NonFiniteRatio):
        grpo.token_ratio(float("-inf"), -1.0)


def test_clipped_term_cases():
    assert grpo.clipped_term(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert grpo.clipped_term(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert grpo.clipped_term(1.0, 2.0, 0.2) == pytest.approx(2.0)


def test_clipped_term_bound_property():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        rho = float(rng.uniform(0.0, 3.0))
        advantage = float(rng.normal())
        epsilon = float(rng.uniform(0.05, 0.5))
        term = grpo.clipped_term(rho, advantage, epsilon)
        clamped = min(max(rho, 1 - epsilon), 1 + epsilon)
        assert term <= rho * advantage + 1e-15
        assert term <= clamped * advantage + 1e-15


# --- KL penalty ------------------------------------------------------------------------


def test_kl_penalty_zero_at_reference(policy):
    rng = np.random.default_rng(3)
    params = _perturbed(policy, policy.init_params(), rng, 0.5)
    trajectories = [fabricate_trajectory(policy, params, rng, 2) for _ in range(5)]
    assert abs(grpo.kl_penalty(policy, params, params, trajectories)) < 1e-12


def test_kl_penalty_matches_exact_kl_monte_carlo(policy):
    # Oracle: closed-form KL over the first-position token distribution.
    rng = np.random.default_rng(4)
    params = _perturbed(policy, policy.init_params(), rng, 0.7)
    params_ref = _perturbed(policy, policy.init_params(), rng, 0.7)
    features = rng.uniform(-1, 1, policy.feature_dim)

    p = policy.token_distribution(params, features, ())
    p_ref = policy.token_distribution(params_ref, features, ())
    exact_kl = float(np.sum(p * (np.log(p) - np.log(p_ref))))

    n = 100_000
    tokens = rng.choice(len(p), size=n, p=p)
    samples = []
    trajectories = []
    for token in tokens:
        lp_new = policy.token_logprob(params, features, (), int(token))
        lp_ref = policy.token_logprob(params_ref, features, (), int(token))
        x = lp_ref - lp_new
        samples.append(math.exp(x) - x - 1.0)
    estimate = float(np.mean(samples))
    sigma = float(np.std(samples) / math.sqrt(n))
    assert abs(estimate - exact_kl) < 3 * sigma + 1e-12


def test_kl_penalty_samples_are_non_negative(policy):
    rng = np.random.default_rng(5)
    params_old = _perturbed(policy, policy.init_params(), rng, 0.5)
    params_ref = _perturbed(policy, policy.init_params(), rng, 0.5)
    trajectories = [fabricate_trajectory(policy, params_old, rng, 3) for _ in range(10)]
    assert grpo.kl_penalty(policy, params_old, params_ref, trajectories) >= 0.0


# --- objective -------------------------------------------------------------------------


def _random_groups(policy, params_old, rng, n_groups=2, group_size=4):
    groups = []
    for _ in range(n_groups):
        rewards = rng.integers(0, 2, group_size).astype(float)
        if rewards.min() == rewards.max():
            rewards[0] = 1.0 - rewards[0]
        groups.append(fabricate_group(policy, params_old, rng, list(rewards)))
    return groups


def test_objective_identity_policy_zero(policy):
    rng = np.random.default_rng(6)
    for _ in range(25):
        params_old = _perturbed(policy, policy.init_params(), rng, 0.5)
        groups = _random_groups(policy, params_old, rng)
        value = grpo.flow_grpo_objective(groups, policy, params_old, params_old, params_old,
                                         clip_epsilon=0.2, kl_coefficient=0.0)
        assert abs(value) < 1e-9


def test_objective_degenerate_group_is_zero(policy):
    rng = np.random.default_rng(7)
    params_old = policy.init_params()
    group = fabricate_group(policy, params_old, rng, [1.0, 1.0, 1.0, 1.0])
    value = grpo.flow_grpo_objective([group], policy, params_old, params_old, params_old,
                                     clip_epsilon=0.2, kl_coefficient=0.0)
    assert value == 0.0


def _reference_objective(groups, policy, params, params_old, params_ref, epsilon, beta):
    """Independent straight-line evaluator of the training objective."""
    per_group = []
    kl_terms = []
    for group in groups:
        per_traj = []
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            per_turn = []
            for turn in trajectory.turns:
                action = turn.action
                per_token = []
                for j in range(len(action.tokens)):
                    prefix = tuple(action.tokens[:j])
                    token = action.tokens[j]
                    lp_new = policy.token_logprob(params, action.features, prefix, token)
                    lp_old = policy.token_logprob(params_old, action.features, prefix, token)
                    rho = math.exp(lp_new - lp_old)
                    clipped = min(max(rho, 1 - epsilon), 1 + epsilon)
                    per_token.append(min(rho * advantage, clipped * advantage))
                    lp_ref = policy.token_logprob(params_ref, action.features, prefix, token)
                    x = lp_ref - lp_new
                    kl_terms.append(math.exp(x) - x - 1.0)
                per_turn.append(sum(per_token) / len(per_token))
            per_traj.append(sum(per_turn) / len(per_turn))
        per_group.append(sum(per_traj) / len(per_traj))
    clip_part = sum(per_group) / len(per_group)
    kl_part = sum(kl_terms) / len(kl_terms) if kl_terms else 0.0
    return clip_part - beta * kl_part


def test_objective_matches_reference_evaluator(policy):
    rng = np.random.default_rng(8)
    for _ in range(10):
        params_old = _perturbed(policy, policy.init_params(), rng, 0.4)
        params = _perturbed(policy, params_old, rng, 0.1)
        params_ref = _perturbed(policy, policy.init_params(), rng, 0.4)
        groups = _random_groups(policy, params_old, rng, n_groups=3)
        beta = float(rng.uniform(0.0, 0.5))
        ours = grpo.flow_grpo_objective(groups, policy, params, params_old, params_ref,
                                        clip_epsilon=0.2, kl_coefficient=beta)
        reference = _reference_objective(groups, policy, params, params_old, params_ref,
                                         0.2, beta)
        assert ours == pytest.approx(reference, abs=1e-12)


def test_objective_requires_logprobs(policy):
    rng = np.random.default_rng(9)
    params = policy.init_params()
    group = fabricate_group(policy, params, rng, [1.0, 0.0])
    stripped_turns = tuple(
        make_turn(None, t.turn_index) for t in group.trajectories[0].turns)
    import dataclasses

    bad_traj = dataclasses.replace(group.trajectories[0], turns=stripped_turns)
    bad_group = dataclasses.replace(group, trajectories=(bad_traj, group.trajectories[1]))
    with pytest.raises(MissingLogprobs):
        grpo.flow_grpo_objective([bad_group], policy, params, params, params, 0.2, 0.0)


# --- gradient -----------------------------------------------------------------------


def test_gradient_zero_for_zero_advantages(policy):
    rng = np.random.default_rng(10)
    params = policy.init_params()
    group = fabricate_group(policy, params, rng, [1.0, 1.0, 1.0, 1.0])
    gradient = grpo.objective_gradient([group], policy, params, params, params, 0.2, 0.0)
    assert np.all(gradient == 0.0)


def _fd_gradient(groups, policy, params, params_old, params_ref, epsilon, beta, h=1e-5):
    theta = params.theta
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        plus = PolicyParameters(theta=theta.copy(), version="fd")
        plus.theta[i] += h
        minus = PolicyParameters(theta=theta.copy(), version="fd")
        minus.theta[i] -= h
        f_plus = grpo.flow_grpo_objective(groups, policy, plus, params_old, params_ref,
                                          epsilon, beta)
        f_minus = grpo.flow_grpo_objective(groups, policy, minus, params_old, params_ref,
                                           epsilon, beta)
        fd[i] = (f_plus - f_minus) / (2 * h)
    return fd


def _ratios_near_boundary(groups, policy, params, params_old, epsilon, margin=0.02):
    for group in groups:
        for trajectory in group.trajectories:
            for turn in trajectory.turns:
                action = turn.action
                for prefix, token in iter_prefixes(action.tokens):
                    lp_new = policy.token_logprob(params, action.features, prefix, token)
                    lp_old = policy.token_logprob(params_old, action.features, prefix, token)
                    rho = math.exp(lp_new - lp_old)
                    if abs(rho - (1 - epsilon)) < margin or abs(rho - (1 + epsilon)) < margin:
                        return True
    return False


def test_gradient_matches_finite_differences(policy):
    rng = np.random.default_rng(11)
    epsilon = 0.2
    checked = 0
    while checked < 6:  # a denser sweep runs in the acceptance suite
        params_old = _perturbed(policy, policy.init_params(), rng, 0.3)
        params = _perturbed(policy, params_old, rng, 0.05)
        params_ref = _perturbed(policy, policy.init_params(), rng, 0.3)
        groups = _random_groups(policy, params_old, rng)
        if _ratios_near_boundary(groups, policy, params, params_old, epsilon):
            continue
        beta = float(rng.choice([0.0, 0.1]))
        analytic = grpo.objective_gradient(groups, policy, params, params_old, params_ref,
                                           epsilon, beta)
        fd = _fd_gradient(groups, policy, params, params_old, params_ref, epsilon, beta)
        scale = max(np.max(np.abs(fd)), 1e-8)
        assert np.max(np.abs(analytic - fd)) / scale < 1e-4
        checked += 1


def test_gradient_zero_when_fully_clipped(policy):
    # One single-token action with A > 0: push the new policy's ratio far above
    # 1 + epsilon; the clipped branch is active and the surrogate gradient dies.
    import dataclasses

    from agentloop.policy import SampledAction

    rng = np.random.default_rng(12)
    params_old = policy.init_params()
    features = rng.uniform(-1, 1, policy.feature_dim)
    action = policy.sample_action(params_old, features, rng)
    single = SampledAction(features=action.features, tokens=(action.tokens[0],),
                           logprobs=(action.logprobs[0],))
    trajectory = dataclasses.replace(
        fabricate_trajectory(policy, params_old, rng, 1, reward=1.0),
        turns=(make_turn(single, 1, stop=True),),
    )
    partner = fabricate_trajectory(policy, params_old, rng, 1, reward=0.0)
    group = grpo.RolloutGroup(
        query="q", ground_truth=None,
        trajectories=(trajectory, partner),
        rewards=(1.0, 0.0),
        # Zero out the partner's advantage: any surviving gradient must come
        # from the boosted, clipped token.
        advantages=(grpo.group_advantages([1.0, 0.0])[0], 0.0),
    )
    boost = policy.logprob_gradient(params_old, np.array(single.features), (),
                                    single.tokens[0])
    params_boosted = PolicyParameters(theta=params_old.theta + 5.0 * boost, version="v1")
    lp_new = policy.token_logprob(params_boosted, single.features, (), single.tokens[0])
    assert math.exp(lp_new - single.logprobs[0]) > 1.2
    gradient = grpo.objective_gradient([group], policy, params_boosted, params_old,
                                       params_old, 0.2, 0.0)
    assert np.all(gradient == 0.0)


# --- equivalence check ------------------------------------------------------------------


def test_equivalence_check_identities(policy):
    rng = np.random.default_rng(13)
    params_old = _perturbed(policy, policy.init_params(), rng, 0.4)
    params = _perturbed(policy, params_old, rng, 0.1)

    single = [(fabricate_trajectory(policy, params_old, rng, 3), 0.7)]
    g, l = grpo.equivalence_check(single, policy, params, params_old, 0.2)
    assert g == pytest.approx(l, abs=1e-12)

    samples = [
        (fabricate_trajectory(policy, params_old, rng, int(rng.integers(1, 6))),
         float(rng.normal()))
        for _ in range(40)
    ]
    g, l = grpo.equivalence_check(samples, policy, params, params_old, 0.2)
    assert g == pytest.approx(l, abs=1e-12)


def test_equivalence_check_single_turn_collapse(policy):
    # With T=1 everywhere both sides reduce to the plain single-turn value.
    rng = np.random.default_rng(14)
    params_old = _perturbed(policy, policy.init_params(), rng, 0.4)
    params = _perturbed(policy, params_old, rng, 0.1)
    samples = [(fabricate_trajectory(policy, params_old, rng, 1), float(rng.normal()))
               for _ in range(10)]
    g, l = grpo.equivalence_check(samples, policy, params, params_old, 0.2)
    direct = []
    for trajectory, advantage in samples:
        action = trajectory.turns[0].action
        terms = []
        for prefix, token in iter_prefixes(action.tokens):
            lp_new = policy.token_logprob(params, action.features, prefix, token)
            lp_old = policy.token_logprob(params_old, action.features, prefix, token)
            terms.append(grpo.clipped_term(math.exp(lp_new - lp_old), advantage, 0.2))
        direct.append(sum(terms) / len(terms))
    expected = sum(direct) / len(direct)
    assert g == pytest.approx(expected, abs=1e-12)
    assert l == pytest.approx(expected, abs=1e-12)


# --- update + training -------------------------------------------------------------------


def test_update_step_versioning(policy):
    params = policy.init_params()
    updated = grpo.update_step(params, np.zeros(policy.param_count), 0.5)
    assert np.array_equal(updated.theta, params.theta)
    assert updated.version == "v1"
    again = grpo.update_step(updated, np.ones(policy.param_count), 0.0)
    assert np.array_equal(again.theta, params.theta)
    assert again.version == "v2"


def test_trainer_config_validation():
    with pytest.raises(GroupTooSmall):
        grpo.TrainerConfig(group_size=1).validate()
    with pytest.raises(ConfigError):
        grpo.TrainerConfig(clip_epsilon=0.0).validate()
    with pytest.raises(ConfigError):
        grpo.TrainerConfig(kl_coefficient=-1.0).validate()
    grpo.TrainerConfig().validate()


def _mini_config(**overrides):
    defaults = dict(group_size=2, batch_size=2, total_steps=25, learning_rate=0.05,
                    seed=3, kl_coefficient=0.001)
    defaults.update(overrides)
    return grpo.TrainerConfig(**defaults)


def test_train_metrics_shape_and_fields(tmp_path):
    env = SynthEnvironment(kinds=(ARITH_TARGET,), difficulties=(1,), seed=3)
    metrics_path = tmp_path / "metrics.jsonl"
    result = grpo.train(_mini_config(), env, metrics_path=str(metrics_path))
    assert len(result.metrics) == 25
    for row in result.metrics:
        assert tuple(row.keys()) == grpo.METRIC_FIELDS
        assert 0.0 <= row["mean_reward"] <= 1.0
        assert 1.0 <= row["mean_T"] <= 3.0
        assert 0.0 <= row["degenerate_group_fraction"] <= 1.0
    lines = metrics_path.read_text().splitlines()
    assert len(lines) == 25
    assert json.loads(lines[0])["step"] == 0
    assert result.params.version == "v25"


def test_train_deterministic_across_runs(tmp_path):
    env_a = SynthEnvironment(kinds=(ARITH_TARGET,), difficulties=(1,), seed=3)
    env_b = SynthEnvironment(kinds=(ARITH_TARGET,), difficulties=(1,), seed=3)
    path_a = tmp_path / "a.jsonl"
    path_b = tmp_path / "b.jsonl"
    result_a = grpo.train(_mini_config(), env_a, metrics_path=str(path_a))
    result_b = grpo.train(_mini_config(), env_b, metrics_path=str(path_b))
    assert path_a.read_bytes() == path_b.read_bytes()
    assert np.array_equal(result_a.params.theta, result_b.params.theta)


def test_checkpoint_round_trip(tmp_path):
    policy = LinearSoftmaxPolicy()
    rng = np.random.default_rng(15)
    params = PolicyParameters(theta=rng.normal(0, 1, policy.param_count), version="v7")
    config = grpo.TrainerConfig()
    path = tmp_path / "checkpoint.json"
    grpo.save_checkpoint(str(path), params, config)
    loaded = grpo.load_checkpoint(str(path))
    assert loaded.version == "v7"
    assert np.array_equal(loaded.theta, params.theta)  # bit-exact via float.hex


def test_block_means_and_non_decreasing():
    series = [0.0, 1.0, 2.0, 3.0]
    assert grpo.block_means(series, 2) == [0.5, 2.5]
    assert grpo.non_decreasing_fraction([1, 1, 2, 1]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        grpo.block_means(series, 0)


def test_train_drops_groups_when_rollouts_abort(monkeypatch):
    from agentloop.errors import BackendUnavailable

    def failing_rollout(*args, **kwargs):
        raise BackendUnavailable("injected outage")

    monkeypatch.setattr(grpo, "run_rollout", failing_rollout)
    env = SynthEnvironment(kinds=(ARITH_TARGET,), difficulties=(1,), seed=0)
    result = grpo.train(_mini_config(total_steps=2), env)
    assert result.dropped_groups == 4  # 2 steps x 2 groups, all dropped
    for row in result.metrics:
        assert row["mean_reward"] == 0.0
        assert row["degenerate_group_fraction"] == 1.0
