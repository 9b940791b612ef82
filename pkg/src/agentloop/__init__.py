"""Multi-turn planner/executor/verifier/generator agent loop with a trainable planner.

The planner policy is optimized on-policy inside the live loop: rollout groups
are judged by a binary final-outcome reward, the reward is broadcast to every
turn, and group-normalized advantages feed a clipped token-level surrogate with
a KL anchor to a frozen reference policy.
"""

from .errors import AgentLoopError
from .gateway import GenerationRequest, GenerationResponse, RemoteBackend, StubBackend
from .grpo import (
    RolloutGroup,
    TrainerConfig,
    clipped_term,
    equivalence_check,
    flow_grpo_objective,
    group_advantages,
    kl_penalty,
    objective_gradient,
    token_ratio,
    train,
    update_step,
)
from .judge import JudgeVerdict, broadcast_reward, judge_llm, judge_rule
from .memory import (
    MemoryEntry,
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
from .orchestrator import (
    ModuleSuite,
    RolloutConfig,
    Trajectory,
    TurnRecord,
    generate_solution,
    run_rollout,
    run_turn,
)
from .policy import LinearSoftmaxPolicy, PolicyParameters, SampledAction
from .replay import load_replay_fixture, run_replay
from .synthenv import SynthEnvironment, SynthTask, check_answer, env_registry, sample_task
from .toolkit import (
    ExecutionResult,
    ToolMetadata,
    ToolRegistry,
    execute_command,
    lookup_tool,
    register_tool,
    render_metadata_card,
)

__version__ = "0.1.0"
