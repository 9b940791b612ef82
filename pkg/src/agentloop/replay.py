"""Transcript replay: drive a rollout from a scripted fixture and diff it.

A replay fixture bundles the scripted module outputs, the canned tool results,
and the expected turn-by-turn behavior (tool sequence, verdicts, final answer).
Replays assert the full loop reproduces the recorded run exactly; the first
diverging turn is reported.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .gateway import StubBackend
from .judge import judge_rule
from .orchestrator import EVAL, RolloutConfig, Trajectory, llm_suite, run_rollout
from .toolkit import ToolRegistry, reference_registry

BUILTIN_FIXTURES = ("e1_gameof24", "e4_tropicos", "e7_multihop")


def load_replay_fixture(name_or_path: str) -> dict:
    """Load a bundled fixture by name or any fixture file by path."""
    if "/" not in name_or_path and not name_or_path.endswith(".json"):
        package_files = resources.files("agentloop") / "fixtures" / f"{name_or_path}.json"
        return json.loads(package_files.read_text(encoding="utf-8"))
    with open(name_or_path, encoding="utf-8") as handle:
        return json.load(handle)


@dataclass
class ReplayReport:
    name: str
    passed: bool
    mismatches: list
    trajectory: Trajectory

    @property
    def first_mismatch(self) -> Optional[str]:
        return self.mismatches[0] if self.mismatches else None


def run_replay(fixture: dict, registry: Optional[ToolRegistry] = None) -> ReplayReport:
    """Re-run the scripted rollout and compare it turn by turn."""
    backend = StubBackend.from_script(fixture["script"])
    if registry is None:
        registry = reference_registry(tool_fixtures=fixture.get("tool_fixtures", {}))
    config = RolloutConfig(
        max_turns=int(fixture.get("max_turns", 10)),
        planner_temperature=float(fixture.get("planner_temperature", 0.7)),
        mode=EVAL,
        seed=int(fixture.get("seed", 0)),
    )
    suite = llm_suite(backend, planner_temperature=config.planner_temperature)
    trajectory = run_rollout(
        fixture["query"], fixture.get("ground_truth"), registry, suite, config,
    )

    expected = fixture["expected"]
    mismatches: list = []
    tools = [t.decision.tool_name for t in trajectory.turns]
    verdicts = [t.verdict.decision for t in trajectory.turns]
    for i, (want_tool, want_verdict) in enumerate(zip(expected["tools"], expected["verdicts"])):
        if i >= len(trajectory.turns):
            mismatches.append(f"turn {i + 1}: missing (rollout ended after {len(tools)} turns)")
            break
        if tools[i] != want_tool:
            mismatches.append(f"turn {i + 1}: expected tool {want_tool!r}, got {tools[i]!r}")
            break
        if verdicts[i] != want_verdict:
            mismatches.append(f"turn {i + 1}: expected verdict {want_verdict}, got {verdicts[i]}")
            break
    if not mismatches and len(trajectory.turns) != len(expected["tools"]):
        mismatches.append(
            f"turn count: expected {len(expected['tools'])}, got {len(trajectory.turns)}"
        )
    for turn_number, substring in expected.get("result_contains", {}).items():
        index = int(turn_number) - 1
        if index < len(trajectory.turns) and substring not in trajectory.turns[index].execution.output:
            mismatches.append(f"turn {turn_number}: result does not contain {substring!r}")
    if trajectory.answer != expected["answer"]:
        mismatches.append(f"answer: expected {expected['answer']!r}, got {trajectory.answer!r}")
    if "solution_contains" in expected and expected["solution_contains"] not in trajectory.solution:
        mismatches.append(f"solution does not contain {expected['solution_contains']!r}")
    ground_truth = fixture.get("ground_truth")
    if ground_truth is not None and not judge_rule(trajectory.answer, ground_truth).correct:
        mismatches.append(
            f"final answer {trajectory.answer!r} is not judged equivalent to {ground_truth!r}"
        )
    return ReplayReport(
        name=fixture.get("name", "replay"),
        passed=not mismatches,
        mismatches=mismatches,
        trajectory=trajectory,
    )
