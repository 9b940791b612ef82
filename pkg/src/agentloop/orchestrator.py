"""The multi-turn loop: plan, execute, verify, update memory, then generate.

Each turn runs planner -> executor -> verifier and appends one memory entry.
Parse failures and unknown tools never abort a rollout: they become degraded
turns with an error flag and a forced CONTINUE verdict, so every rollout
terminates within the turn budget and stays judgeable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import prompts
from .errors import (
    MalformedExecutorOutput,
    MalformedPlannerOutput,
    MalformedVerifierOutput,
)
from .gateway import GenerationRequest
from .memory import (
    CONTINUE,
    STOP,
    TOOL_NOT_FOUND,
    MemoryState,
    PlannerDecision,
    VerificationVerdict,
    append_turn,
    init_memory,
    parse_executor_output,
    parse_planner_output,
    parse_verifier_output,
    render_memory,
)
from .policy import SampledAction, build_state_features, render_planner_text
from .toolkit import (
    OK,
    TOOL_ERROR,
    ExecutionResult,
    Tool,
    ToolRegistry,
    execute_command,
    render_metadata_card,
)

TRAIN = "TRAIN"
EVAL = "EVAL"


@dataclass(frozen=True)
class RolloutConfig:
    max_turns: int = 3
    planner_temperature: float = 0.5
    tool_timeout: float = 500.0
    mode: str = TRAIN
    seed: int = 0

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be TRAIN or EVAL, got {self.mode!r}")


@dataclass(frozen=True)
class TurnRecord:
    turn_index: int
    state_snapshot: str  # the rendered planner prompt for this turn
    raw_planner_text: str
    decision: PlannerDecision
    action: Optional[SampledAction]  # token-level view when a trainable policy acted
    command: str
    execution: ExecutionResult
    verdict: VerificationVerdict
    error_flag: Optional[str] = None


@dataclass(frozen=True)
class Trajectory:
    query: str
    ground_truth: Optional[str]
    turns: tuple
    solution: str
    answer: str
    answer_flagged: bool
    policy_version: str
    seed: int
    trainable: bool
    reward: Optional[float] = None
    turn_rewards: tuple = ()

    @property
    def turn_count(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class PlannerSample:
    raw_text: str
    action: Optional[SampledAction] = None


@dataclass(frozen=True)
class PendingTurn:
    """The current turn as the verifier sees it, before the memory update."""

    tool_name: str
    sub_goal: str
    command: str
    result: str


@dataclass(frozen=True)
class ModuleSuite:
    planner: object
    executor: object
    verifier: object
    generator: object


# --- LLM-backed modules -------------------------------------------------------


def _token_cap(text: str, limit: int) -> tuple[str, bool]:
    words = text.split()
    if len(words) <= limit:
        return text, False
    return " ".join(words[:limit]), True


class LLMPlanner:
    def __init__(self, backend, temperature: float = 0.5, max_tokens: int = 2048):
        self.backend = backend
        self.temperature = temperature
        self.max_tokens = max_tokens

    def plan(self, prompt: str, query: str, memory: MemoryState,
             rng: np.random.Generator) -> PlannerSample:
        request = GenerationRequest(prompt=prompt, temperature=self.temperature,
                                    max_tokens=self.max_tokens)
        return PlannerSample(raw_text=self.backend.generate(request).text)


class LLMExecutor:
    def __init__(self, backend, temperature: float = 0.0, max_tokens: int = 2048):
        self.backend = backend
        self.temperature = temperature
        self.max_tokens = max_tokens

    def command_text(self, query: str, decision: PlannerDecision, tool: Tool,
                     memory: MemoryState) -> tuple[str, Optional[str]]:
        # Planner prose is re-injected here; cap it at the gateway token limit.
        context, truncated = _token_cap(decision.context, self.max_tokens)
        prompt = prompts.render_prompt(
            prompts.EXECUTOR,
            {
                "Question": query,
                "Sub-Goal": decision.sub_goal,
                "Tool Name": decision.tool_name,
                "Selected Tool Metadata": _card_for(tool),
                "Relevant Data": context,
            },
        )
        request = GenerationRequest(prompt=prompt, temperature=self.temperature,
                                    max_tokens=self.max_tokens)
        note = "context_truncated" if truncated else None
        return self.backend.generate(request).text, note


class LLMVerifier:
    def __init__(self, backend, temperature: float = 0.0, max_tokens: int = 2048):
        self.backend = backend
        self.temperature = temperature
        self.max_tokens = max_tokens

    def verify_text(self, query: str, memory: MemoryState, pending: PendingTurn,
                    registry: ToolRegistry) -> str:
        actions = render_memory(memory) + (
            f"\n\nAction Turn {memory.turn_count + 1} (pending verification):\n"
            f"Tool Name: {pending.tool_name}\n"
            f"Sub-Goal: {pending.sub_goal}\n"
            f"Command: {pending.command}\n"
            f"Result: {pending.result}"
        )
        prompt = prompts.render_prompt(
            prompts.VERIFIER,
            {
                "Question": query,
                "Available Tools": ", ".join(registry.names()),
                "Toolbox Metadata": "\n\n".join(registry.rendered_cards()),
                "Actions from Memory": actions,
            },
        )
        request = GenerationRequest(prompt=prompt, temperature=self.temperature,
                                    max_tokens=self.max_tokens)
        return self.backend.generate(request).text


class LLMGenerator:
    def __init__(self, backend, temperature: float = 0.0, max_tokens: int = 2048):
        self.backend = backend
        self.temperature = temperature
        self.max_tokens = max_tokens

    def solution_text(self, query: str, memory: MemoryState) -> str:
        prompt = prompts.render_prompt(
            prompts.GENERATOR,
            {
                "Question": query,
                # No separate analysis stage exists; the query itself fills the slot.
                "Initial Analysis": query,
                "Actions from Memory": render_memory(memory),
            },
        )
        request = GenerationRequest(prompt=prompt, temperature=self.temperature,
                                    max_tokens=self.max_tokens)
        return self.backend.generate(request).text


class PolicyPlanner:
    """Planner backed by a trainable policy; emits protocol text plus token data."""

    def __init__(self, policy, params):
        self.policy = policy
        self.params = params

    def plan(self, prompt: str, query: str, memory: MemoryState,
             rng: np.random.Generator) -> PlannerSample:
        features = build_state_features(query, memory)
        action = self.policy.sample_action(self.params, features, rng)
        return PlannerSample(raw_text=render_planner_text(action.tokens, memory), action=action)


def llm_suite(backend, planner_temperature: float = 0.5, module_temperature: float = 0.0,
              max_tokens: int = 2048) -> ModuleSuite:
    return ModuleSuite(
        planner=LLMPlanner(backend, planner_temperature, max_tokens),
        executor=LLMExecutor(backend, module_temperature, max_tokens),
        verifier=LLMVerifier(backend, module_temperature, max_tokens),
        generator=LLMGenerator(backend, module_temperature, max_tokens),
    )


def _card_for(tool: Tool) -> str:
    return render_metadata_card(tool.metadata)


def render_planner_prompt(query: str, registry: ToolRegistry, memory: MemoryState) -> str:
    """Pure function of (query, registry metadata, memory): the planner state."""
    return prompts.render_prompt(
        prompts.PLANNER,
        {
            "Question": query,
            "Available Tools": ", ".join(registry.names()),
            "Toolbox Metadata": "\n\n".join(registry.rendered_cards()),
            "Actions from Memory": render_memory(memory),
        },
    )


_EMPTY_EXECUTION = ExecutionResult(output="", elapsed=0.0, status=TOOL_ERROR,
                                   error_detail="turn degraded before execution")

_FORCED_CONTINUE = "forced CONTINUE: this turn was degraded before verification"


def run_turn(
    memory: MemoryState,
    registry: ToolRegistry,
    suite: ModuleSuite,
    config: RolloutConfig,
    rng: Optional[np.random.Generator] = None,
    clock=time.time,
) -> tuple[TurnRecord, MemoryState]:
    """One planner -> executor -> verifier transition plus the memory update."""
    if memory.turn_count >= config.max_turns:
        raise ValueError("turn budget already exhausted")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    query = memory.query
    snapshot = render_planner_prompt(query, registry, memory)
    planned = suite.planner.plan(snapshot, query, memory, rng)

    error_flag: Optional[str] = None
    decision: PlannerDecision
    tool: Optional[Tool] = None
    command = ""
    execution = _EMPTY_EXECUTION
    degraded = False

    try:
        decision = parse_planner_output(planned.raw_text)
    except MalformedPlannerOutput:
        decision = PlannerDecision(justification="", context="",
                                   sub_goal="(unparseable planner output)",
                                   tool_name=TOOL_NOT_FOUND)
        error_flag = "planner_parse_error"
        degraded = True

    if not degraded:
        tool = registry.lookup(decision.tool_name)
        if tool is None:
            error_flag = "tool_not_found"
            degraded = True
            execution = dataclasses.replace(
                _EMPTY_EXECUTION,
                output=f"No matched tool given for {decision.tool_name!r}. "
                       f"No command was generated.",
                error_detail="tool not found",
            )

    if not degraded:
        raw_command, note = suite.executor.command_text(query, decision, tool, memory)
        if note:
            error_flag = note
        try:
            command = parse_executor_output(raw_command)
        except MalformedExecutorOutput:
            error_flag = "executor_parse_error"
            degraded = True
            execution = dataclasses.replace(
                _EMPTY_EXECUTION,
                output="No command was generated (malformed executor output).",
                error_detail="executor parse error",
            )

    if not degraded:
        execution = execute_command(tool, command, config.tool_timeout)
        if execution.status != OK and error_flag is None:
            error_flag = f"execution_{execution.status.lower()}"

    if degraded:
        verdict = VerificationVerdict(analysis=_FORCED_CONTINUE, decision=CONTINUE)
    else:
        pending = PendingTurn(tool_name=decision.tool_name, sub_goal=decision.sub_goal,
                              command=command, result=execution.output)
        raw_verdict = suite.verifier.verify_text(query, memory, pending, registry)
        try:
            verdict = parse_verifier_output(raw_verdict)
        except MalformedVerifierOutput:
            verdict = VerificationVerdict(
                analysis="verifier output had no Conclusion marker", decision=CONTINUE)
            error_flag = (error_flag + ";" if error_flag else "") + "verifier_parse_error"

    entry_decision = decision if tool is not None else dataclasses.replace(
        decision, tool_name=TOOL_NOT_FOUND)
    new_memory = append_turn(memory, entry_decision, command, execution.output,
                             verdict, error_flag=error_flag, clock=clock)
    record = TurnRecord(
        turn_index=new_memory.turn_count,
        state_snapshot=snapshot,
        raw_planner_text=planned.raw_text,
        decision=decision,
        action=planned.action,
        command=command,
        execution=execution,
        verdict=verdict,
        error_flag=error_flag,
    )
    return record, new_memory


def extract_answer(solution: str) -> tuple[str, bool]:
    """The Answer section (last labeled occurrence); whole text flagged as fallback."""
    matches = list(re.finditer(r"(?mi)^\s*(?:\*\*)?Answer(?:\*\*)?\s*:\s*", solution))
    if not matches:
        matches = list(re.finditer(r"(?i)Answer\s*:\s*", solution))
    if not matches:
        return solution.strip(), True
    return solution[matches[-1].end():].strip(), False


def generate_solution(query: str, memory: MemoryState, generator) -> str:
    """Produce the final solution text from the finalized memory."""
    return generator.solution_text(query, memory)


def run_rollout(
    query: str,
    ground_truth: Optional[str],
    registry: ToolRegistry,
    suite: ModuleSuite,
    config: RolloutConfig,
    rng: Optional[np.random.Generator] = None,
    policy_version: str = "",
    clock=time.time,
) -> Trajectory:
    """Run turns until STOP or the budget, then generate the final solution."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    memory = init_memory(query, clock=clock)
    turns: list[TurnRecord] = []
    for _ in range(config.max_turns):
        record, memory = run_turn(memory, registry, suite, config, rng=rng, clock=clock)
        turns.append(record)
        if record.verdict.decision == STOP:
            break
    solution = generate_solution(query, memory, suite.generator)
    answer, flagged = extract_answer(solution)
    trainable = config.mode == TRAIN and all(t.action is not None for t in turns)
    return Trajectory(
        query=query,
        ground_truth=ground_truth,
        turns=tuple(turns),
        solution=solution,
        answer=answer,
        answer_flagged=flagged,
        policy_version=policy_version,
        seed=config.seed,
        trainable=trainable,
    )


# --- trajectory log (orchestrator <-> trainer contract) ------------------------


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def trajectory_log_record(trajectory: Trajectory) -> dict:
    return {
        "query": trajectory.query,
        "ground_truth": trajectory.ground_truth,
        "turns": [
            {
                "tool_name": t.decision.tool_name,
                "sub_goal": t.decision.sub_goal,
                "command": t.command,
                "result_digest": _digest(t.execution.output),
                "verdict": t.verdict.decision,
                "error_flag": t.error_flag,
            }
            for t in trajectory.turns
        ],
        "solution": trajectory.solution,
        "answer": trajectory.answer,
        "reward": trajectory.reward,
        "policy_version": trajectory.policy_version,
        "seed": trajectory.seed,
    }


def write_trajectory_log(trajectories: Sequence[Trajectory], path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for trajectory in trajectories:
            handle.write(json.dumps(trajectory_log_record(trajectory), ensure_ascii=False) + "\n")
