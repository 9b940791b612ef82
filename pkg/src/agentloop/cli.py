"""Operator entry points: solve, rollout, train, replay, judge.

Exit codes: 0 success, 1 config validation, 2 runtime failure, 3 acceptance
check failure (replay mismatch). Config values merge as defaults < config
file < command-line flags; the config file is a flat JSON object whose keys
mirror the flag names.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import grpo, synthenv
from .errors import AgentLoopError, BackendUnavailable, ConfigError, GroupTooSmall
from .gateway import RemoteBackend, StubBackend
from .judge import judge_llm, judge_rule
from .orchestrator import (
    EVAL,
    RolloutConfig,
    llm_suite,
    run_rollout,
    write_trajectory_log,
)
from .policy import LinearSoftmaxPolicy
from .replay import BUILTIN_FIXTURES, load_replay_fixture, run_replay
from .synthenv import ARITH_TARGET, MULTIHOP_LOOKUP, SynthEnvironment, synth_suite
from .toolkit import reference_registry

# Desk-scale defaults: small enough to train the bundled policy in minutes.
DESK_PRESET = {
    "batch": 8,
    "group_size": 4,
    "steps": 500,
    "lr": 0.02,
    "kl_coefficient": 0.001,
    "clip_epsilon": 0.2,
    "max_turns": 3,
    "temperature": 1.0,
}

# Full-scale constants, recorded for documentation. They parameterize training
# of a large LLM planner over remote infrastructure and cannot run here.
PAPER_SCALE_PRESET = {
    "batch": 32,
    "group_size": 8,
    "steps": None,
    "lr": 1e-6,
    "kl_coefficient": 0.001,
    "clip_epsilon": 0.2,
    "max_turns": 3,
    "temperature": 0.5,
    "max_tokens": 2048,
    "tool_timeout": 500.0,
    "eval_max_turns": 10,
    "eval_temperature": 0.7,
}

_KIND_NAMES = {"arith": ARITH_TARGET, "multihop": MULTIHOP_LOOKUP}


@dataclass
class RunConfig:
    seed: int = 0
    max_turns: Optional[int] = None
    group_size: int = 4
    batch: int = 8
    steps: int = 500
    backend: str = "toy"
    endpoint: str = "http://localhost:8000"
    model: str = "default"
    api_key_env: str = "AGENTLOOP_API_KEY"
    stub_script: Optional[str] = None
    out: Optional[str] = None
    temperature: Optional[float] = None
    lr: float = 0.02
    kl_coefficient: float = 0.001
    clip_epsilon: float = 0.2
    kind: str = "arith"
    difficulty: str = "1,2"
    count: int = 20
    checkpoint: Optional[str] = None
    max_tokens: int = 2048
    tool_timeout: float = 500.0
    parallelism: int = max(1, os.cpu_count() or 1)
    preset: str = "desk"
    use_llm_judge: bool = False

    def validate(self) -> None:
        if self.backend not in ("remote", "stub", "toy"):
            raise ConfigError(f"backend: must be remote, stub, or toy, got {self.backend!r}")
        if self.group_size < 2:
            raise ConfigError(f"group_size: must be >= 2, got {self.group_size}")
        if self.batch < 1:
            raise ConfigError(f"batch: must be >= 1, got {self.batch}")
        if self.steps < 1:
            raise ConfigError(f"steps: must be >= 1, got {self.steps}")
        if self.max_turns is not None and self.max_turns < 1:
            raise ConfigError(f"max_turns: must be >= 1, got {self.max_turns}")
        if self.preset not in ("desk", "paper-scale"):
            raise ConfigError(f"preset: must be desk or paper-scale, got {self.preset!r}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism: must be >= 1, got {self.parallelism}")
        for part in self.difficulty.split(","):
            if not part.strip():
                continue
            try:
                value = int(part)
            except ValueError:
                raise ConfigError(f"difficulty: not an integer: {part.strip()!r}") from None
            if not 1 <= value <= 5:
                raise ConfigError(f"difficulty: values must be in 1..5, got {value}")
        if self.kind not in _KIND_NAMES:
            raise ConfigError(f"kind: must be one of {sorted(_KIND_NAMES)}, got {self.kind!r}")

    def difficulties(self) -> tuple:
        return tuple(int(p) for p in self.difficulty.split(",") if p.strip())


def _load_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, dict):
        raise ConfigError("config: file must contain a flat JSON object")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for key, value in file_values.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown config file field")
            values[key] = value
    for field_info in dataclasses.fields(RunConfig):
        flag_value = getattr(args, field_info.name, None)
        if flag_value is not None:
            values[field_info.name] = flag_value
    config = RunConfig(**values)
    config.validate()
    return config


# --- backends / suites ----------------------------------------------------------


def _stub_from_file(path: str):
    with open(path, encoding="utf-8") as handle:
        fixture = json.load(handle)
    script = fixture["script"] if isinstance(fixture, dict) and "script" in fixture else fixture
    backend = StubBackend.from_script(script)
    tool_fixtures = fixture.get("tool_fixtures", {}) if isinstance(fixture, dict) else {}
    return backend, tool_fixtures


def _eval_setup(config: RunConfig):
    """Registry + per-rollout suite factory for solve/rollout.

    Stub scripts keep a cursor per rollout id, so each rollout gets a suite
    bound to its own session; toy and remote suites are stateless and shared.
    """
    temperature = config.temperature if config.temperature is not None else 0.7
    if config.backend == "stub":
        if not config.stub_script:
            raise ConfigError("stub_script: required when backend is stub")
        backend, tool_fixtures = _stub_from_file(config.stub_script)
        registry = reference_registry(tool_fixtures=tool_fixtures)

        def factory(rollout_id: str):
            return llm_suite(backend.for_rollout(rollout_id),
                             planner_temperature=temperature, max_tokens=config.max_tokens)

        return registry, factory
    if config.backend == "remote":
        backend = RemoteBackend(config.endpoint, config.model, api_key_env=config.api_key_env)
        registry = reference_registry(llm_backend=backend)
        suite = llm_suite(backend, planner_temperature=temperature,
                          max_tokens=config.max_tokens)
        return registry, lambda rollout_id: suite
    policy = LinearSoftmaxPolicy(temperature=temperature if config.temperature else 1.0)
    if config.checkpoint:
        params = grpo.load_checkpoint(config.checkpoint)
    else:
        params = policy.init_params()
    registry = synthenv.env_registry(seed=config.seed,
                                     difficulty=max(config.difficulties() or (2,)))
    suite = synth_suite(policy, params)
    return registry, lambda rollout_id: suite


def _print_trajectory(trajectory, stream=None) -> None:
    stream = stream if stream is not None else sys.stdout
    for turn in trajectory.turns:
        error = f" error={turn.error_flag}" if turn.error_flag else ""
        print(f"Turn {turn.turn_index}: tool={turn.decision.tool_name!r} "
              f"verdict={turn.verdict.decision}{error}", file=stream)
        result = turn.execution.output.replace("\n", " ")
        print(f"  sub-goal: {turn.decision.sub_goal}", file=stream)
        print(f"  result: {result[:120]}", file=stream)
    print("Solution:", file=stream)
    print(trajectory.solution, file=stream)
    print(f"Answer: {trajectory.answer}", file=stream)


# --- commands ---------------------------------------------------------------------


def cmd_solve(args: argparse.Namespace) -> int:
    config = build_config(args)
    registry, suite_factory = _eval_setup(config)
    suite = suite_factory("solve")
    rollout_config = RolloutConfig(
        max_turns=config.max_turns if config.max_turns is not None else 10,
        planner_temperature=config.temperature if config.temperature is not None else 0.7,
        tool_timeout=config.tool_timeout,
        mode=EVAL,
        seed=config.seed,
    )
    rng = np.random.default_rng(config.seed)
    trajectory = run_rollout(args.query, None, registry, suite, rollout_config, rng=rng)
    _print_trajectory(trajectory)
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        write_trajectory_log([trajectory], os.path.join(config.out, "solve.jsonl"))
    return 0


def cmd_rollout(args: argparse.Namespace) -> int:
    config = build_config(args)
    env = SynthEnvironment(kinds=(_KIND_NAMES[config.kind],),
                           difficulties=config.difficulties() or (1, 2), seed=config.seed)
    registry, suite_factory = _eval_setup(config)
    if config.backend == "toy":
        registry = env.registry()
    rollout_config = RolloutConfig(
        max_turns=config.max_turns if config.max_turns is not None else 10,
        planner_temperature=config.temperature if config.temperature is not None else 0.7,
        tool_timeout=config.tool_timeout,
        mode=EVAL,
        seed=config.seed,
    )
    tasks = env.sample_tasks(0, config.count)

    def _one(index_task):
        index, task = index_task
        rng = np.random.default_rng([config.seed, index, 11])
        return run_rollout(task.query, task.ground_truth, registry,
                           suite_factory(f"rollout-{index}"), rollout_config, rng=rng)

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        trajectories = list(pool.map(_one, enumerate(tasks)))
    correct = sum(env.check_answer(t, traj.answer) for t, traj in zip(tasks, trajectories))
    print(f"rollouts={len(tasks)} correct={correct} accuracy={correct / len(tasks):.3f}")
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        write_trajectory_log(trajectories, os.path.join(config.out, "rollouts.jsonl"))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    if config.preset == "paper-scale":
        raise ConfigError(
            "preset: the paper-scale preset documents full-scale constants "
            f"({json.dumps(PAPER_SCALE_PRESET)}) and needs a large remote planner "
            "backend; training here runs the bundled policy with the desk preset"
        )
    trainer_config = grpo.TrainerConfig(
        group_size=config.group_size,
        batch_size=config.batch,
        clip_epsilon=config.clip_epsilon,
        kl_coefficient=config.kl_coefficient,
        learning_rate=config.lr,
        max_turns=config.max_turns if config.max_turns is not None else 3,
        planner_temperature=config.temperature if config.temperature is not None else 1.0,
        total_steps=config.steps,
        seed=config.seed,
    )
    trainer_config.validate()
    env = SynthEnvironment(kinds=(_KIND_NAMES[config.kind],),
                           difficulties=config.difficulties() or (1, 2), seed=config.seed)
    out_dir = config.out or "train_out"
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    result = grpo.train(trainer_config, env, metrics_path=metrics_path)
    grpo.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), result.params, trainer_config)

    rewards = [row["mean_reward"] for row in result.metrics]
    smoothed = grpo.block_means(rewards, window=min(50, len(rewards)))
    if smoothed:
        initial, final = smoothed[0], smoothed[-1]
        fraction = grpo.non_decreasing_fraction(smoothed)
        print(f"steps={len(rewards)} initial_smoothed={initial:.4f} "
              f"final_smoothed={final:.4f} gain={final - initial:.4f} "
              f"non_decreasing_fraction={fraction:.4f}")
    else:
        print(f"steps={len(rewards)} (fewer than one smoothing window)")
    print(f"metrics={metrics_path}")
    print(f"checkpoint={os.path.join(out_dir, 'checkpoint.json')}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    build_config(args)  # validates shared flags
    fixture = load_replay_fixture(args.fixture)
    report = run_replay(fixture)
    for turn in report.trajectory.turns:
        print(f"Turn {turn.turn_index}: tool={turn.decision.tool_name!r} "
              f"verdict={turn.verdict.decision}")
    print(f"Answer: {report.trajectory.answer}")
    if report.passed:
        print(f"replay {report.name}: PASS")
        return 0
    print(f"replay {report.name}: FAIL", file=sys.stderr)
    for mismatch in report.mismatches:
        print(f"  {mismatch}", file=sys.stderr)
    return 3


def cmd_judge(args: argparse.Namespace) -> int:
    config = build_config(args)
    if config.use_llm_judge:
        backend = RemoteBackend(config.endpoint, config.model, api_key_env=config.api_key_env)
        verdict = judge_llm(args.question or "", args.answer, args.truth, backend)
    else:
        verdict = judge_rule(args.answer, args.truth)
    print(json.dumps({"correct": verdict.correct, "reward": verdict.reward,
                      "source": verdict.source, "analysis": verdict.analysis}))
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    print(json.dumps({"desk": DESK_PRESET, "paper-scale": PAPER_SCALE_PRESET}, indent=2))
    return 0


# --- argument parsing ---------------------------------------------------------------


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file mirroring the flag names")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-turns", dest="max_turns", type=int)
    parser.add_argument("--group-size", dest="group_size", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--backend", choices=["remote", "stub", "toy"])
    parser.add_argument("--endpoint")
    parser.add_argument("--model")
    parser.add_argument("--out")
    parser.add_argument("--stub-script", dest="stub_script")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--kl-coefficient", dest="kl_coefficient", type=float)
    parser.add_argument("--clip-epsilon", dest="clip_epsilon", type=float)
    parser.add_argument("--kind", choices=sorted(_KIND_NAMES))
    parser.add_argument("--difficulty")
    parser.add_argument("--count", type=int)
    parser.add_argument("--checkpoint")
    parser.add_argument("--max-tokens", dest="max_tokens", type=int)
    parser.add_argument("--tool-timeout", dest="tool_timeout", type=float)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--preset", choices=["desk", "paper-scale"])
    parser.add_argument("--api-key-env", dest="api_key_env")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentloop",
                                     description="Multi-turn tool-using agent loop "
                                                 "with a trainable planner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run one evaluation rollout for a query")
    p_solve.add_argument("query")
    _add_shared_flags(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_rollout = sub.add_parser("rollout", help="batch evaluation rollouts on the synthetic tasks")
    _add_shared_flags(p_rollout)
    p_rollout.set_defaults(func=cmd_rollout)

    p_train = sub.add_parser("train", help="train the bundled planner policy")
    _add_shared_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_replay = sub.add_parser("replay", help="re-run a scripted transcript fixture and diff it")
    p_replay.add_argument("fixture",
                          help=f"bundled fixture name ({', '.join(BUILTIN_FIXTURES)}) or a path")
    _add_shared_flags(p_replay)
    p_replay.set_defaults(func=cmd_replay)

    p_judge = sub.add_parser("judge", help="judge an answer against a ground truth")
    p_judge.add_argument("--answer", required=True)
    p_judge.add_argument("--truth", required=True)
    p_judge.add_argument("--question", default="")
    p_judge.add_argument("--use-llm-judge", dest="use_llm_judge", action="store_true",
                         default=None)
    _add_shared_flags(p_judge)
    p_judge.set_defaults(func=cmd_judge)

    p_presets = sub.add_parser("presets", help="print the desk and paper-scale presets")
    p_presets.set_defaults(func=cmd_presets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GroupTooSmall) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except BackendUnavailable as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 2
    except (AgentLoopError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
