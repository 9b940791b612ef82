"""Linear-softmax policy: distributions, sampling, closed-form gradients."""
from __future__ import annotations

import numpy as np
import pytest

from agentloop.memory import init_memory, parse_planner_output
from agentloop.policy import (
    SOLVE,
    TRY_CANDIDATE,
    LinearSoftmaxPolicy,
    action_fields,
    build_state_features,
    iter_prefixes,
    render_planner_text,
)


def _random_params(policy, rng, scale=0.8):
    params = policy.init_params()
    return type(params)(theta=rng.normal(0.0, scale, policy.param_count), version="v0")


def test_distributions_normalize_at_every_prefix(policy):
    rng = np.random.default_rng(0)
    for _ in range(50):
        params = _random_params(policy, rng)
        features = rng.uniform(-1, 1, policy.feature_dim)
        for prefix in ((), (1,), (2, TRY_CANDIDATE)):
            probs = policy.token_distribution(params, features, prefix)
            assert abs(probs.sum() - 1.0) < 1e-9
            logprob_sum = sum(
                np.exp(policy.token_logprob(params, features, prefix, t))
                for t in range(len(probs))
            )
            assert abs(logprob_sum - 1.0) < 1e-9


def test_sampling_deterministic_given_seed(policy):
    params = policy.init_params()
    features = np.ones(policy.feature_dim)
    a = policy.sample_action(params, features, np.random.default_rng(42))
    b = policy.sample_action(params, features, np.random.default_rng(42))
    assert a == b


def test_sampled_logprobs_match_token_logprob(policy):
    rng = np.random.default_rng(1)
    for _ in range(20):
        params = _random_params(policy, rng)
        features = rng.uniform(-1, 1, policy.feature_dim)
        action = policy.sample_action(params, features, rng)
        for (prefix, token), logprob in zip(iter_prefixes(action.tokens), action.logprobs):
            assert policy.token_logprob(params, action.features, prefix, token) == logprob


def test_action_length_depends_on_strategy(policy):
    rng = np.random.default_rng(2)
    params = policy.init_params()
    lengths = set()
    for _ in range(200):
        action = policy.sample_action(params, np.ones(policy.feature_dim), rng)
        lengths.add(len(action.tokens))
        if action.tokens[1] == TRY_CANDIDATE:
            assert len(action.tokens) == 3
        else:
            assert len(action.tokens) == 2
    assert lengths == {2, 3}


def test_logprob_gradient_matches_finite_differences(policy):
    # Oracle: central finite differences on token_logprob.
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(10):
        params = _random_params(policy, rng, scale=0.5)
        features = rng.uniform(-1, 1, policy.feature_dim)
        action = policy.sample_action(params, features, rng)
        for prefix, token in iter_prefixes(action.tokens):
            analytic = policy.logprob_gradient(params, features, prefix, token)
            check_indices = rng.choice(policy.param_count, size=12, replace=False)
            for index in check_indices:
                theta_plus = params.theta.copy()
                theta_plus[index] += h
                theta_minus = params.theta.copy()
                theta_minus[index] -= h
                plus = policy.token_logprob(type(params)(theta=theta_plus), features, prefix, token)
                minus = policy.token_logprob(type(params)(theta=theta_minus), features, prefix, token)
                fd = (plus - minus) / (2 * h)
                assert abs(fd - analytic[index]) < 5e-7


def test_temperature_scales_distribution():
    sharp = LinearSoftmaxPolicy(temperature=0.5)
    flat = LinearSoftmaxPolicy(temperature=2.0)
    rng = np.random.default_rng(4)
    theta = rng.normal(0, 1, sharp.param_count)
    features = rng.uniform(-1, 1, sharp.feature_dim)
    params_sharp = sharp.init_params()
    params_sharp = type(params_sharp)(theta=theta)
    p_sharp = sharp.token_distribution(params_sharp, features, ())
    p_flat = flat.token_distribution(params_sharp, features, ())
    assert p_sharp.max() > p_flat.max()
    with pytest.raises(ValueError):
        LinearSoftmaxPolicy(temperature=0.0)


def test_rendered_planner_text_round_trips_through_parser():
    memory = init_memory("Using the numbers [1, 2, 3], create an expression that equals 6.")
    for tokens in ((0, SOLVE), (1, 2), (0, TRY_CANDIDATE, 2)):
        text = render_planner_text(tokens, memory)
        decision = parse_planner_output(text)
        tool, sub_goal = action_fields(tokens)
        assert decision.tool_name == tool
        assert decision.sub_goal == sub_goal


def test_state_features_shape_and_signals():
    memory = init_memory("Using the numbers [1, 2, 3], create an expression that equals 6.")
    features = build_state_features(memory.query, memory)
    assert features.shape == (10,)
    assert features[1] == 1.0  # expression-building task
    assert features[2] == 0.0
    assert features[8] == 1.0  # empty memory
    hop = init_memory("Starting from X, follow the parent link. Which entity do you reach?")
    hop_features = build_state_features(hop.query, hop)
    assert hop_features[2] == 1.0
