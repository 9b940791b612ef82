"""Trainable planner policies.

The reference trainable policy is a linear-softmax model over hand-crafted
state features. An action is a short token sequence: a tool-selection token,
a strategy token, and (for strategies that take one) an argument token. Every
later position is conditioned on the sampled prefix by appending its one-hot
encoding to the feature vector, so log-probabilities and gradients have closed
forms and no autodiff is needed.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .memory import MemoryState

TOOL_TOKENS = ("Calculator", "Knowledge Lookup", "Web Search", "Base Generator")

SOLVE, TRY_CANDIDATE, NEXT_HOP, RESTATE = range(4)
STRATEGY_PHRASES = (
    "Search systematically for an expression that reaches the target.",
    "Evaluate candidate expression option {k}.",
    "Look up the next link in the chain.",
    "Ask the question directly.",
)
ARG_COUNT = 4

FEATURE_DIM = 10

_HOP_RESULT = re.compile(r"The \w+ of \S+ is \S+\.")


def build_state_features(query: str, memory: MemoryState, max_turns: int = 10) -> np.ndarray:
    """Hand-crafted features of the planner state (query, memory)."""
    q = query.casefold()
    last = memory.last_entry
    last_result = last.result if last else ""
    entries = memory.entries
    n = len(entries)
    resolved = sum(1 for e in entries if _HOP_RESULT.search(e.result))
    features = np.array(
        [
            1.0,
            1.0 if "expression" in q else 0.0,
            1.0 if "follow" in q else 0.0,
            min(1.0, n / max(1, max_turns)),
            1.0 if last is not None and (last.error_flag or last_result.startswith("Error")) else 0.0,
            1.0 if last_result.startswith("No results") else 0.0,
            1.0 if ("equals" in last_result or " = " in last_result) else 0.0,
            (sum(1 for e in entries if e.error_flag) / n) if n else 0.0,
            1.0 if n == 0 else 0.0,
            min(1.0, resolved / 3.0),
        ],
        dtype=np.float64,
    )
    return features


@dataclass(frozen=True, eq=False)
class PolicyParameters:
    """Flat trainable vector plus the version stamp of the update that made it."""

    theta: np.ndarray
    version: str = "v0"

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(theta=self.theta.copy(), version=self.version)


@dataclass(frozen=True)
class SampledAction:
    """One planner action: state features, token ids, per-token log-probs."""

    features: tuple
    tokens: tuple
    logprobs: tuple

    def __len__(self) -> int:
        return len(self.tokens)


def iter_prefixes(tokens: Sequence[int]):
    for j in range(len(tokens)):
        yield tuple(tokens[:j]), tokens[j]


class LinearSoftmaxPolicy:
    """Linear-softmax policy over state features with prefix conditioning.

    Temperature is part of the policy definition: sampling, log-probs, and
    gradients all use the tempered distribution, so importance ratios stay
    exactly on-policy.
    """

    def __init__(self, feature_dim: int = FEATURE_DIM, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.feature_dim = feature_dim
        self.temperature = temperature
        self.n_tool = len(TOOL_TOKENS)
        self.n_strategy = len(STRATEGY_PHRASES)
        self.n_arg = ARG_COUNT
        d = feature_dim
        self._blocks = (
            (self.n_tool, d),
            (self.n_strategy, d + self.n_tool),
            (self.n_arg, d + self.n_tool + self.n_strategy),
        )
        self._offsets = []
        offset = 0
        for rows, cols in self._blocks:
            self._offsets.append(offset)
            offset += rows * cols
        self.param_count = offset

    def init_params(self, seed: Optional[int] = None, scale: float = 0.0) -> PolicyParameters:
        """Zero initialization by default: exactly uniform token distributions."""
        theta = np.zeros(self.param_count, dtype=np.float64)
        if scale > 0.0:
            theta = np.random.default_rng(seed).normal(0.0, scale, self.param_count)
        return PolicyParameters(theta=theta, version="v0")

    # -- internals ------------------------------------------------------------

    def _position(self, prefix: Sequence[int]) -> int:
        if len(prefix) >= len(self._blocks):
            raise IndexError(f"prefix of length {len(prefix)} exceeds action length")
        return len(prefix)

    def _position_features(self, features: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        parts = [np.asarray(features, dtype=np.float64)]
        sizes = (self.n_tool, self.n_strategy)
        for token, size in zip(prefix, sizes):
            onehot = np.zeros(size, dtype=np.float64)
            onehot[token] = 1.0
            parts.append(onehot)
        return np.concatenate(parts)

    def _block_matrix(self, theta: np.ndarray, position: int) -> np.ndarray:
        rows, cols = self._blocks[position]
        offset = self._offsets[position]
        return theta[offset : offset + rows * cols].reshape(rows, cols)

    def _log_distribution(self, params: PolicyParameters, features, prefix) -> np.ndarray:
        position = self._position(prefix)
        phi = self._position_features(np.asarray(features, dtype=np.float64), prefix)
        logits = self._block_matrix(params.theta, position) @ phi / self.temperature
        logits = logits - logits.max()
        return logits - np.log(np.exp(logits).sum())

    # -- contract -------------------------------------------------------------

    def token_logprob(self, params: PolicyParameters, features, prefix, token: int) -> float:
        return float(self._log_distribution(params, features, prefix)[token])

    def token_distribution(self, params: PolicyParameters, features, prefix) -> np.ndarray:
        return np.exp(self._log_distribution(params, features, prefix))

    def sample_action(self, params: PolicyParameters, features, rng: np.random.Generator) -> SampledAction:
        """Sample tokens position by position under the tempered softmax."""
        features = np.asarray(features, dtype=np.float64)
        tokens: list[int] = []
        logprobs: list[float] = []
        for position in range(3):
            log_dist = self._log_distribution(params, features, tuple(tokens))
            probs = np.exp(log_dist)
            token = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            token = min(token, len(probs) - 1)
            tokens.append(token)
            logprobs.append(float(log_dist[token]))
            if position == 1 and token != TRY_CANDIDATE:
                break
        return SampledAction(
            features=tuple(float(x) for x in features),
            tokens=tuple(tokens),
            logprobs=tuple(logprobs),
        )

    def logprob_gradient(self, params: PolicyParameters, features, prefix, token: int) -> np.ndarray:
        """d log pi(token | state, prefix) / d theta, dense flat vector."""
        position = self._position(prefix)
        phi = self._position_features(np.asarray(features, dtype=np.float64), prefix)
        probs = self.token_distribution(params, features, prefix)
        indicator = np.zeros_like(probs)
        indicator[token] = 1.0
        block_grad = np.outer(indicator - probs, phi) / self.temperature
        grad = np.zeros(self.param_count, dtype=np.float64)
        rows, cols = self._blocks[position]
        offset = self._offsets[position]
        grad[offset : offset + rows * cols] = block_grad.ravel()
        return grad


def action_fields(tokens: Sequence[int]) -> tuple[str, str]:
    """Map sampled tokens to (tool_name, sub_goal) text."""
    tool_name = TOOL_TOKENS[tokens[0]]
    strategy = tokens[1]
    phrase = STRATEGY_PHRASES[strategy]
    if strategy == TRY_CANDIDATE:
        option = tokens[2] + 1 if len(tokens) > 2 else 1
        phrase = phrase.format(k=option)
    return tool_name, phrase


def render_planner_text(tokens: Sequence[int], memory: MemoryState) -> str:
    """Planner-protocol text for a sampled action (parseable by the memory parsers)."""
    tool_name, sub_goal = action_fields(tokens)
    return (
        f"Justification: The {tool_name} tool is the most direct way to advance the task.\n"
        f"Context: {memory.turn_count} prior turn(s) recorded for this query.\n"
        f"Sub-Goal: {sub_goal}\n"
        f"Tool Name: {tool_name}"
    )
