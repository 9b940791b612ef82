"""Group-relative policy optimization over multi-turn rollouts.

The objective is a triple mean (trajectories, turns, tokens) of the clipped
importance-weighted advantage, minus a KL penalty to a frozen reference
policy. Advantages are group-normalized per query and constant across the
turns of a trajectory because the reward is a single broadcast outcome.
Gradients are analytic against the policy contract; summation order is fixed
(group, trajectory, turn, token) so runs are bit-reproducible.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BackendUnavailable,
    ConfigError,
    GroupTooSmall,
    MissingLogprobs,
    NonFiniteGradient,
    NonFiniteParameters,
    NonFiniteRatio,
)
from .judge import RULE, JudgeVerdict, broadcast_reward
from .orchestrator import TRAIN, RolloutConfig, Trajectory, run_rollout
from .policy import LinearSoftmaxPolicy, PolicyParameters, iter_prefixes
from .synthenv import synth_suite


@dataclass(frozen=True)
class RolloutGroup:
    """G trajectories for one query, with group-normalized advantages."""

    query: str
    ground_truth: Optional[str]
    trajectories: tuple
    rewards: tuple
    advantages: tuple
    policy_version: str = ""


@dataclass(frozen=True)
class TrainerConfig:
    group_size: int = 4
    batch_size: int = 8
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.001
    learning_rate: float = 0.02
    max_turns: int = 3
    planner_temperature: float = 1.0
    total_steps: int = 500
    seed: int = 0
    std_floor: float = 1e-8

    def validate(self) -> None:
        if self.group_size < 2:
            raise GroupTooSmall(f"group_size must be >= 2, got {self.group_size}")
        if self.clip_epsilon <= 0:
            raise ConfigError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        if self.kl_coefficient < 0:
            raise ConfigError(f"kl_coefficient must be >= 0, got {self.kl_coefficient}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.max_turns < 1:
            raise ConfigError(f"max_turns must be >= 1, got {self.max_turns}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.std_floor <= 0:
            raise ConfigError(f"std_floor must be > 0, got {self.std_floor}")


# --- primitive operations -----------------------------------------------------


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> list:
    """Standardize rewards against the group: zero mean, unit population std.

    A degenerate group (all rewards equal, std below the floor) gets all-zero
    advantages and therefore contributes no policy gradient.
    """
    if len(rewards) < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {len(rewards)}")
    values = np.asarray(rewards, dtype=np.float64)
    mean = values.mean()
    std = values.std()  # population: divide by G
    if std < std_floor:
        return [0.0] * len(rewards)
    return [float(x) for x in (values - mean) / std]


def token_ratio(logp_new: float, logp_old: float) -> float:
    """Importance ratio for one token, computed in log space."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise NonFiniteRatio(f"log-probs must be finite, got {logp_new}, {logp_old}")
    try:
        return math.exp(logp_new - logp_old)
    except OverflowError:
        return math.inf


def clipped_term(rho: float, advantage: float, epsilon: float) -> float:
    """min(rho * A, clamp(rho, 1 - eps, 1 + eps) * A)."""
    if advantage == 0.0:
        return 0.0  # also keeps an infinite ratio from producing inf * 0
    clamped = min(max(rho, 1.0 - epsilon), 1.0 + epsilon)
    return min(rho * advantage, clamped * advantage)


def _k3(logp_new: float, logp_ref: float) -> float:
    # Non-negative per-token divergence sample: exp(x) - x - 1, x = ref - new.
    # Unbiased for KL(pi || pi_ref) under on-policy sampling, and its gradient
    # pulls the policy toward the reference (the plain log-difference sample
    # has a zero-mean gradient and anchors nothing). The exponent is capped so
    # a diverged policy reports a huge finite penalty instead of overflowing.
    x = min(logp_ref - logp_new, 700.0)
    return math.exp(x) - x - 1.0


def _require_action(turn):
    if turn.action is None:
        raise MissingLogprobs(
            f"turn {turn.turn_index} carries no per-token log-probs; "
            "the trajectory is not trainable"
        )
    return turn.action


def _iter_tokens(trajectory: Trajectory):
    for turn in trajectory.turns:
        action = _require_action(turn)
        for prefix, token in iter_prefixes(action.tokens):
            yield action, prefix, token


def kl_penalty(policy, params: PolicyParameters, params_ref: PolicyParameters,
               trajectories: Sequence[Trajectory]) -> float:
    """Mean per-token divergence sample over all sampled tokens (beta applied by caller)."""
    total = 0.0
    count = 0
    for trajectory in trajectories:
        for action, prefix, token in _iter_tokens(trajectory):
            lp_new = policy.token_logprob(params, action.features, prefix, token)
            lp_ref = policy.token_logprob(params_ref, action.features, prefix, token)
            total += _k3(lp_new, lp_ref)
            count += 1
    return total / count if count else 0.0


@dataclass(frozen=True)
class BatchEvaluation:
    objective: float
    clip_value: float
    kl_value: float
    clip_fraction: float
    token_count: int


def evaluate_batch(groups: Sequence[RolloutGroup], policy, params: PolicyParameters,
                   params_old: PolicyParameters, params_ref: PolicyParameters,
                   clip_epsilon: float, kl_coefficient: float) -> BatchEvaluation:
    """One pass computing the objective and its diagnostics at `params`."""
    if not groups:
        raise ValueError("evaluate_batch needs at least one group")
    clip_total = 0.0
    kl_sum = 0.0
    clipped_tokens = 0
    token_count = 0
    for group in groups:
        group_total = 0.0
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            trajectory_total = 0.0
            for turn in trajectory.turns:
                action = _require_action(turn)
                token_total = 0.0
                for prefix, token in iter_prefixes(action.tokens):
                    lp_new = policy.token_logprob(params, action.features, prefix, token)
                    lp_old = policy.token_logprob(params_old, action.features, prefix, token)
                    rho = token_ratio(lp_new, lp_old)
                    unclipped = rho * advantage
                    term = clipped_term(rho, advantage, clip_epsilon)
                    token_total += term
                    if term < unclipped:
                        clipped_tokens += 1
                    token_count += 1
                    if kl_coefficient != 0.0:
                        lp_ref = policy.token_logprob(params_ref, action.features, prefix, token)
                        kl_sum += _k3(lp_new, lp_ref)
                trajectory_total += token_total / len(action.tokens)
            group_total += trajectory_total / len(trajectory.turns)
        clip_total += group_total / len(group.trajectories)
    clip_value = clip_total / len(groups)
    kl_value = (kl_sum / token_count) if (kl_coefficient != 0.0 and token_count) else 0.0
    return BatchEvaluation(
        objective=clip_value - kl_coefficient * kl_value,
        clip_value=clip_value,
        kl_value=kl_value,
        clip_fraction=(clipped_tokens / token_count) if token_count else 0.0,
        token_count=token_count,
    )


def flow_grpo_objective(groups: Sequence[RolloutGroup], policy, params: PolicyParameters,
                        params_old: PolicyParameters, params_ref: PolicyParameters,
                        clip_epsilon: float, kl_coefficient: float) -> float:
    """The scalar training objective at `params` for a batch of rollout groups."""
    return evaluate_batch(groups, policy, params, params_old, params_ref,
                          clip_epsilon, kl_coefficient).objective


def objective_gradient(groups: Sequence[RolloutGroup], policy, params: PolicyParameters,
                       params_old: PolicyParameters, params_ref: PolicyParameters,
                       clip_epsilon: float, kl_coefficient: float) -> np.ndarray:
    """Analytic ascent gradient of the objective at `params`.

    Clipped tokens contribute zero through the surrogate (ties go to the
    unclipped branch); the KL penalty contributes through every token.
    """
    if not groups:
        raise ValueError("objective_gradient needs at least one group")
    gradient = np.zeros(policy.param_count, dtype=np.float64)
    kl_gradient = np.zeros_like(gradient)
    token_count = 0
    for group in groups:
        group_weight = 1.0 / (len(groups) * len(group.trajectories))
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            trajectory_weight = group_weight / len(trajectory.turns)
            for turn in trajectory.turns:
                action = _require_action(turn)
                token_weight = trajectory_weight / len(action.tokens)
                for prefix, token in iter_prefixes(action.tokens):
                    lp_new = policy.token_logprob(params, action.features, prefix, token)
                    lp_old = policy.token_logprob(params_old, action.features, prefix, token)
                    rho = token_ratio(lp_new, lp_old)
                    token_count += 1
                    needs_surrogate = advantage != 0.0 and (
                        rho * advantage <= clipped_term(rho, advantage, clip_epsilon))
                    needs_kl = kl_coefficient != 0.0
                    if not (needs_surrogate or needs_kl):
                        continue
                    grad_lp = policy.logprob_gradient(params, action.features, prefix, token)
                    if needs_surrogate:
                        gradient += token_weight * rho * advantage * grad_lp
                    if needs_kl:
                        lp_ref = policy.token_logprob(params_ref, action.features, prefix, token)
                        kl_gradient += (1.0 - math.exp(min(lp_ref - lp_new, 700.0))) * grad_lp
    if kl_coefficient != 0.0 and token_count:
        gradient -= kl_coefficient * (kl_gradient / token_count)
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradient("objective gradient has non-finite entries")
    return gradient


def equivalence_check(samples: Sequence[tuple], policy, params: PolicyParameters,
                      params_old: PolicyParameters, clip_epsilon: float) -> tuple[float, float]:
    """Two computations of the clip objective that must agree as an identity.

    Global: trajectory-major triple mean. Local: flatten every state into a
    visitation-weighted list (each state of a length-T trajectory weighs 1/T)
    and take the weighted sum of per-state local objectives. `samples` is a
    sequence of (trajectory, advantage) pairs.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("equivalence_check needs at least one trajectory")

    # Path 1: nested trajectory-major accumulation.
    global_total = 0.0
    for trajectory, advantage in samples:
        per_turn = 0.0
        for turn in trajectory.turns:
            action = _require_action(turn)
            token_total = 0.0
            for prefix, token in iter_prefixes(action.tokens):
                lp_new = policy.token_logprob(params, action.features, prefix, token)
                lp_old = policy.token_logprob(params_old, action.features, prefix, token)
                token_total += clipped_term(token_ratio(lp_new, lp_old), advantage, clip_epsilon)
            per_turn += token_total / len(action.tokens)
        global_total += per_turn / len(trajectory.turns)
    global_value = global_total / n

    # Path 2: flat visitation-weighted states.
    weighted_states = []
    for trajectory, advantage in samples:
        weight = 1.0 / (n * len(trajectory.turns))
        for turn in trajectory.turns:
            weighted_states.append((weight, turn, advantage))

    def _local(turn, advantage: float) -> float:
        action = _require_action(turn)
        terms = []
        for prefix, token in iter_prefixes(action.tokens):
            lp_new = policy.token_logprob(params, action.features, prefix, token)
            lp_old = policy.token_logprob(params_old, action.features, prefix, token)
            terms.append(clipped_term(token_ratio(lp_new, lp_old), advantage, clip_epsilon))
        return math.fsum(terms) / len(terms)

    local_value = math.fsum(w * _local(turn, adv) for w, turn, adv in weighted_states)
    return global_value, local_value


def update_step(params: PolicyParameters, gradient: np.ndarray,
                learning_rate: float) -> PolicyParameters:
    """Plain gradient ascent; the version stamp changes on every update."""
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradient("refusing to apply a non-finite gradient")
    theta = params.theta + learning_rate * np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteParameters("parameters became non-finite after the update")
    number = int(params.version[1:]) if params.version[1:].isdigit() else 0
    return PolicyParameters(theta=theta, version=f"v{number + 1}")


# --- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list
    params: PolicyParameters
    params_ref: PolicyParameters
    policy: LinearSoftmaxPolicy
    dropped_groups: int = 0


METRIC_FIELDS = ("step", "mean_reward", "objective", "kl", "mean_T",
                 "clip_fraction", "degenerate_group_fraction")


def _collect_group(task, environment, registry, policy, params_old, config: TrainerConfig,
                   step: int, task_index: int) -> Optional[RolloutGroup]:
    suite = synth_suite(policy, params_old)
    rollout_config = RolloutConfig(
        max_turns=config.max_turns,
        planner_temperature=config.planner_temperature,
        mode=TRAIN,
        seed=config.seed,
    )
    trajectories = []
    for g in range(config.group_size):
        rng = np.random.default_rng([abs(config.seed), step, task_index, g, 7])
        try:
            trajectory = run_rollout(
                task.query, task.ground_truth, registry, suite, rollout_config,
                rng=rng, policy_version=params_old.version,
            )
        except BackendUnavailable:
            # Aborted rollout: excluded from its group.
            continue
        reward = environment.check_answer(task, trajectory.answer)
        verdict = JudgeVerdict(analysis="environment answer checker", correct=bool(reward),
                               source=RULE)
        trajectories.append(broadcast_reward(trajectory, verdict))
    if len(trajectories) < 2:
        return None
    rewards = tuple(t.reward for t in trajectories)
    advantages = tuple(group_advantages(rewards, config.std_floor))
    return RolloutGroup(
        query=task.query,
        ground_truth=task.ground_truth,
        trajectories=tuple(trajectories),
        rewards=rewards,
        advantages=advantages,
        policy_version=params_old.version,
    )


def train(config: TrainerConfig, environment, registry=None,
          metrics_path: Optional[str] = None) -> TrainResult:
    """Full training loop: rollout groups under a parameter snapshot, judge,
    broadcast, normalize, one gradient step per outer step.

    The objective/kl/clip_fraction metrics are evaluated on the step's batch
    at the post-update parameters (at the snapshot itself the clip part is
    identically ~0 and nothing is clipped, which diagnoses nothing).
    """
    config.validate()
    registry = registry if registry is not None else environment.registry()
    policy = LinearSoftmaxPolicy(temperature=config.planner_temperature)
    params = policy.init_params()
    params_ref = params.copy()
    metrics: list = []
    dropped_groups = 0
    handle = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(config.total_steps):
            params_old = params
            tasks = environment.sample_tasks(step, config.batch_size)
            groups = []
            degenerate = 0
            rollouts = 0
            reward_sum = 0.0
            turn_sum = 0
            for task_index, task in enumerate(tasks):
                group = _collect_group(task, environment, registry, policy, params_old,
                                       config, step, task_index)
                if group is None:
                    dropped_groups += 1
                    continue
                groups.append(group)
                rollouts += len(group.trajectories)
                reward_sum += sum(group.rewards)
                turn_sum += sum(t.turn_count for t in group.trajectories)
                if all(a == 0.0 for a in group.advantages):
                    degenerate += 1
            if groups:
                gradient = objective_gradient(groups, policy, params, params_old, params_ref,
                                              config.clip_epsilon, config.kl_coefficient)
            else:
                gradient = np.zeros(policy.param_count)
            params = update_step(params, gradient, config.learning_rate)
            if groups:
                evaluation = evaluate_batch(groups, policy, params, params_old, params_ref,
                                            config.clip_epsilon, config.kl_coefficient)
            else:
                evaluation = BatchEvaluation(0.0, 0.0, 0.0, 0.0, 0)
            row = {
                "step": step,
                "mean_reward": (reward_sum / rollouts) if rollouts else 0.0,
                "objective": evaluation.objective,
                "kl": evaluation.kl_value,
                "mean_T": (turn_sum / rollouts) if rollouts else 0.0,
                "clip_fraction": evaluation.clip_fraction,
                "degenerate_group_fraction": (degenerate / len(groups)) if groups else 1.0,
            }
            metrics.append(row)
            if handle:
                handle.write(json.dumps(row) + "\n")
    finally:
        if handle:
            handle.close()
    return TrainResult(metrics=metrics, params=params, params_ref=params_ref,
                       policy=policy, dropped_groups=dropped_groups)


# --- checkpoints and series helpers ----------------------------------------------


def config_digest(config: TrainerConfig) -> str:
    payload = json.dumps(config.__dict__, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(path: str, params: PolicyParameters, config: TrainerConfig) -> None:
    """Text checkpoint: version, config digest, and the exact parameter bytes.

    Layout: JSON object with dtype, shape, and the flat vector as float.hex()
    strings (lossless round-trip across platforms).
    """
    payload = {
        "format": "agentloop-checkpoint-v1",
        "version": params.version,
        "config_digest": config_digest(config),
        "dtype": "float64",
        "shape": [int(params.theta.size)],
        "data_hex": [float(x).hex() for x in params.theta],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)
        handle.write("\n")


def load_checkpoint(path: str) -> PolicyParameters:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format") != "agentloop-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    theta = np.array([float.fromhex(x) for x in payload["data_hex"]], dtype=np.float64)
    return PolicyParameters(theta=theta, version=payload["version"])


def block_means(values: Sequence[float], window: int = 50) -> list:
    """Means of consecutive disjoint windows (the smoothed training series)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return [sum(values[i:i + window]) / window
            for i in range(0, len(values) - window + 1, window)]


def non_decreasing_fraction(series: Sequence[float]) -> float:
    """Fraction of consecutive pairs that do not decrease."""
    if len(series) < 2:
        return 1.0
    ok = sum(1 for a, b in zip(series, series[1:]) if b >= a)
    return ok / (len(series) - 1)
