"""Deterministic offline task environment: tasks, tools, and an exact answer oracle.

Two task kinds: expression building (make the given numbers hit a target) and
multi-hop lookup over a generated fact base. Everything is a pure function of
(kind, difficulty, seed), and for every generated task an action sequence that
earns reward 1 within three turns exists by construction.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import arith
from .judge import judge_rule
from .memory import MemoryState, PlannerDecision
from .orchestrator import ModuleSuite, PendingTurn, PolicyPlanner
from .toolkit import (
    Tool,
    ToolMetadata,
    ToolRegistry,
    calculator_binding,
    fixture_binding,
)

ARITH_TARGET = "ARITH_TARGET"
MULTIHOP_LOOKUP = "MULTIHOP_LOOKUP"

RELATIONS = ("parent", "mentor", "employer", "founder", "neighbor", "rival")

_SYLLABLES = (
    "ar", "bel", "cor", "dun", "el", "fen", "gor", "hal", "ix", "jor", "kel", "lum",
    "mar", "nor", "oth", "pel", "qui", "rin", "sol", "tar", "ul", "ven", "wex", "zan",
)


@dataclass(frozen=True)
class KnowledgeBase:
    entities: tuple
    facts: dict  # (entity, relation) -> entity

    def lookup_sentences(self) -> dict:
        return {
            f"{relation} of {entity}": f"The {relation} of {entity} is {target}."
            for (entity, relation), target in self.facts.items()
        }


@dataclass(frozen=True)
class SynthTask:
    task_kind: str
    query: str
    ground_truth: str
    difficulty: int
    seed: int
    numbers: tuple = ()
    target: Optional[int] = None
    start_entity: Optional[str] = None
    relations: tuple = ()
    kb: Optional[KnowledgeBase] = None


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([abs(int(p)) for p in parts])


def _entity_name(rng: np.random.Generator, taken: set) -> str:
    while True:
        name = "".join(rng.choice(_SYLLABLES) for _ in range(3)).capitalize()
        if name not in taken:
            taken.add(name)
            return name


def build_knowledge_base(difficulty: int, seed: int) -> KnowledgeBase:
    """Fact base sized 80-240 entities; link density keeps random walks alive."""
    rng = _rng(seed, difficulty, 2)
    n_entities = 40 + 40 * difficulty
    taken: set = set()
    entities = tuple(_entity_name(rng, taken) for _ in range(n_entities))
    facts = {}
    for entity in entities:
        for relation in RELATIONS:
            if rng.random() < 0.6:
                facts[(entity, relation)] = entities[int(rng.integers(n_entities))]
    return KnowledgeBase(entities=entities, facts=facts)


def _arith_numbers(difficulty: int) -> tuple[int, int]:
    count = {1: 3, 2: 4, 3: 4, 4: 5}.get(difficulty, 5)
    high = 9 if difficulty <= 2 else 13
    return count, high


def _random_expression(numbers: Sequence[int], rng: np.random.Generator) -> tuple[str, Fraction]:
    items = [(Fraction(n), str(n)) for n in numbers]
    while len(items) > 1:
        i = int(rng.integers(len(items)))
        lhs = items.pop(i)
        j = int(rng.integers(len(items)))
        rhs = items.pop(j)
        op = ("+", "-", "*")[int(rng.integers(3))]
        if op == "+":
            value = lhs[0] + rhs[0]
        elif op == "-":
            value = lhs[0] - rhs[0]
        else:
            value = lhs[0] * rhs[0]
        items.append((value, f"({lhs[1]}{op}{rhs[1]})"))
    value, text = items[0]
    return (text[1:-1] if text.startswith("(") else text), value


def _sample_arith(difficulty: int, seed: int) -> SynthTask:
    rng = _rng(seed, difficulty, 1)
    count, high = _arith_numbers(difficulty)
    for _ in range(200):
        numbers = tuple(int(rng.integers(1, high + 1)) for _ in range(count))
        expression, value = _random_expression(numbers, rng)
        if value.denominator == 1 and 1 <= value <= 999:
            target = int(value)
            break
    else:
        numbers = tuple(int(rng.integers(1, high + 1)) for _ in range(count))
        expression = "+".join(str(n) for n in numbers)
        target = sum(numbers)
    query = (
        f"Using the numbers {list(numbers)}, create an expression that equals {target}. "
        "You must use basic arithmetic operations (+, -, *, /) and parentheses, "
        "and use each number exactly once."
    )
    return SynthTask(
        task_kind=ARITH_TARGET,
        query=query,
        ground_truth=expression,
        difficulty=difficulty,
        seed=seed,
        numbers=numbers,
        target=target,
    )


def _multihop_from_kb(kb: KnowledgeBase, difficulty: int, seed: int) -> SynthTask:
    rng = _rng(seed, difficulty, 3)
    hops = 2 if difficulty <= 2 else 3
    for _ in range(500):
        start = kb.entities[int(rng.integers(len(kb.entities)))]
        current = start
        relations: list[str] = []
        for _ in range(hops):
            available = [r for r in RELATIONS if (current, r) in kb.facts]
            if not available:
                break
            relation = available[int(rng.integers(len(available)))]
            relations.append(relation)
            current = kb.facts[(current, relation)]
        if len(relations) == hops:
            links = ", then the ".join(f"{r} link" for r in relations)
            query = f"Starting from {start}, follow the {links}. Which entity do you reach?"
            return SynthTask(
                task_kind=MULTIHOP_LOOKUP,
                query=query,
                ground_truth=current,
                difficulty=difficulty,
                seed=seed,
                start_entity=start,
                relations=tuple(relations),
                kb=kb,
            )
    raise RuntimeError("knowledge base too sparse to build a hop chain")


def sample_task(kind: str, difficulty: int, seed: int) -> SynthTask:
    """Deterministic task generation; same (kind, difficulty, seed) -> same task."""
    if not 1 <= difficulty <= 5:
        raise ValueError("difficulty must be in 1..5")
    if kind == ARITH_TARGET:
        return _sample_arith(difficulty, seed)
    if kind == MULTIHOP_LOOKUP:
        return _multihop_from_kb(build_knowledge_base(difficulty, seed), difficulty, seed)
    raise ValueError(f"unknown task kind {kind!r}")


def check_answer(task: SynthTask, answer: str) -> int:
    """Exact oracle: 1 for any valid solution, 0 otherwise (unparseable included)."""
    if task.task_kind == ARITH_TARGET:
        expression = arith.extract_candidate_expression(answer or "")
        if expression is None:
            return 0
        if not arith.uses_exactly(expression, list(task.numbers)):
            return 0
        try:
            value = arith.evaluate(expression, exact=True)
        except arith.ExpressionError:
            return 0
        return int(value == Fraction(task.target))
    return int(judge_rule(answer or " ", task.ground_truth).correct)


# --- query parsing shared by the deterministic modules -------------------------

_NUMBERS = re.compile(r"numbers \[([0-9, ]+)\]")
_TARGET = re.compile(r"equals (-?\d+)")
_START = re.compile(r"Starting from (\S+),")
_RELATION = re.compile(r"the (\w+) link")
_HOP_FACT = re.compile(r"The (\w+) of (\S+) is (\S+)\.")


def parse_arith_query(query: str) -> Optional[tuple[list, int]]:
    numbers = _NUMBERS.search(query)
    target = _TARGET.search(query)
    if numbers is None or target is None:
        return None
    values = [int(x) for x in numbers.group(1).split(",") if x.strip()]
    return values, int(target.group(1))


def parse_hop_query(query: str) -> Optional[tuple[str, list]]:
    start = _START.search(query)
    relations = _RELATION.findall(query)
    if start is None or not relations:
        return None
    return start.group(1), relations


def chain_progress(results: Sequence[str], start: str, relations: Sequence[str]) -> list:
    """Entities resolved so far by walking the relation chain through result texts."""
    current = start
    resolved = []
    for relation in relations:
        found = None
        for text in results:
            for m in _HOP_FACT.finditer(text):
                if m.group(1) == relation and m.group(2) == current:
                    found = m.group(3)
                    break
            if found:
                break
        if not found:
            break
        resolved.append(found)
        current = found
    return resolved


def candidate_expressions(numbers: Sequence[int]) -> list:
    """Fixed per-task candidate pool for the `try candidate` strategy."""
    n = [str(x) for x in numbers]
    if len(n) == 3:
        return [f"{n[0]}+{n[1]}+{n[2]}", f"{n[0]}*{n[1]}+{n[2]}",
                f"({n[0]}+{n[1]})*{n[2]}", f"{n[0]}*{n[1]}*{n[2]}"]
    if len(n) == 4:
        return [f"{n[0]}+{n[1]}+{n[2]}+{n[3]}", f"{n[0]}*{n[1]}+{n[2]}*{n[3]}",
                f"({n[0]}+{n[1]})*({n[2]}+{n[3]})", f"{n[0]}*{n[1]}*{n[2]}-{n[3]}"]
    joined = "+".join(n)
    return [joined, f"{n[0]}*{n[1]}+" + "+".join(n[2:]),
            f"({n[0]}+{n[1]})*{n[2]}-" + "-".join(n[3:]), f"{n[0]}*" + "*".join(n[1:2]) + "+" + "+".join(n[2:])]


# --- deterministic executor / verifier / generator -----------------------------

_OPTION = re.compile(r"option (\d+)")


class SynthExecutor:
    """Formats commands directly from the planner decision; no LLM involved."""

    def command_text(self, query: str, decision: PlannerDecision, tool: Tool,
                     memory: MemoryState) -> tuple[str, Optional[str]]:
        sub_goal = decision.sub_goal
        inner = query
        if "Search systematically" in sub_goal:
            parsed = parse_arith_query(query)
            if parsed:
                numbers, target = parsed
                inner = f"solve numbers={numbers} target={target}"
        elif "candidate expression option" in sub_goal:
            parsed = parse_arith_query(query)
            option = _OPTION.search(sub_goal)
            if parsed and option:
                numbers, _ = parsed
                pool = candidate_expressions(numbers)
                inner = pool[(int(option.group(1)) - 1) % len(pool)]
        elif "next link" in sub_goal:
            parsed = parse_hop_query(query)
            if parsed:
                start, relations = parsed
                resolved = chain_progress([e.result for e in memory.entries], start, relations)
                if len(resolved) < len(relations):
                    base = resolved[-1] if resolved else start
                    inner = f"{relations[len(resolved)]} of {base}"
                else:
                    inner = f"{relations[-1]} of {resolved[-2] if len(resolved) > 1 else start}"
        return f"Generated Command:\nexecution = tool.execute(query={json.dumps(inner)})", None


_RESULT_VALUE = re.compile(r"(?:=|equals)\s*(-?\d+(?:\.\d+)?)\s*\.?\s*$")


def result_value(text: str) -> Optional[float]:
    for line in text.splitlines():
        m = _RESULT_VALUE.search(line.strip())
        if m:
            return float(m.group(1))
    return None


class SynthVerifier:
    """Deterministic sufficiency check over memory plus the pending result."""

    def verify_text(self, query: str, memory: MemoryState, pending: PendingTurn,
                    registry: ToolRegistry) -> str:
        results = [entry.result for entry in memory.entries] + [pending.result]
        arith_parsed = parse_arith_query(query)
        hop_parsed = parse_hop_query(query)
        done = False
        if arith_parsed:
            _, target = arith_parsed
            done = any(result_value(r) == float(target) for r in results)
            analysis = (
                f"A result reaching the target {target} is recorded."
                if done else f"No recorded result reaches the target {target} yet."
            )
        elif hop_parsed:
            start, relations = hop_parsed
            resolved = chain_progress(results, start, relations)
            done = len(resolved) == len(relations)
            analysis = f"{len(resolved)} of {len(relations)} chain links are resolved."
        else:
            analysis = "The query shape is unknown; more evidence is needed."
        return f"{analysis}\nConclusion: {'STOP' if done else 'CONTINUE'}"


_SOLVED = re.compile(r"The expression (.+) equals (-?\d+)\.")
_EVALUATED = re.compile(r"^(.+?) = (-?\d+(?:\.\d+)?)$")


class SynthGenerator:
    """Reads the final answer straight out of memory; emits the two-part format."""

    def solution_text(self, query: str, memory: MemoryState) -> str:
        answer = "unknown"
        arith_parsed = parse_arith_query(query)
        hop_parsed = parse_hop_query(query)
        if arith_parsed:
            _, target = arith_parsed
            for entry in memory.entries:
                for line in entry.result.splitlines():
                    solved = _SOLVED.search(line)
                    if solved and int(solved.group(2)) == target:
                        answer = solved.group(1)
                        continue
                    evaluated = _EVALUATED.match(line.strip())
                    if evaluated and float(evaluated.group(2)) == float(target):
                        answer = evaluated.group(1).strip()
        elif hop_parsed:
            start, relations = hop_parsed
            resolved = chain_progress([e.result for e in memory.entries], start, relations)
            if len(resolved) == len(relations):
                answer = resolved[-1]
        used = ", ".join(dict.fromkeys(e.tool_name for e in memory.entries)) or "no tools"
        summary = (
            f"Process Summary: {memory.turn_count} turn(s) were executed using {used} "
            "to gather evidence for the query."
        )
        return f"{summary}\nAnswer: {answer}"


def synth_suite(policy, params) -> ModuleSuite:
    """Trainable planner plus the deterministic executor/verifier/generator."""
    return ModuleSuite(
        planner=PolicyPlanner(policy, params),
        executor=SynthExecutor(),
        verifier=SynthVerifier(),
        generator=SynthGenerator(),
    )


# --- environment ----------------------------------------------------------------

_CALCULATOR_METADATA = ToolMetadata(
    name="Calculator",
    description=(
        "A deterministic tool that evaluates arithmetic expressions (numbers, + - * /, "
        "parentheses) and can search for an expression over given numbers that reaches "
        "a target value via the solve form."
    ),
    input_schema=(("query", "str", "An arithmetic expression, prose containing one, or "
                                   "'solve numbers=[a, b, c] target=N'."),),
    output_schema=("str", "The evaluated value or the found expression."),
    demo_commands=(
        ('execution = tool.execute(query="(13-1)*(1+1)")', "Evaluate an expression."),
        ('execution = tool.execute(query="solve numbers=[1, 1, 6, 9] target=24")',
         "Search for an expression that reaches 24."),
    ),
    limitations=("Numbers and + - * / only; no variables, strings, or other operations.",),
    best_practices=("Put the complete expression or solve form directly in the query.",),
    requires_llm_engine=False,
)

_LOOKUP_METADATA = ToolMetadata(
    name="Knowledge Lookup",
    description=(
        "A deterministic fact-base lookup. Given a query of the form '<relation> of "
        "<entity>', returns the linked entity if the fact exists."
    ),
    input_schema=(("query", "str", "A query of the form '<relation> of <entity>'."),),
    output_schema=("str", "A sentence stating the linked entity, or a no-results notice."),
    demo_commands=(
        ('execution = tool.execute(query="parent of Solmarel")',
         "Look up the parent link of an entity."),
    ),
    limitations=("Exact relation/entity phrasing is required; one link per query.",),
    best_practices=("Resolve long chains one link at a time.",),
    requires_llm_engine=False,
)


class SynthEnvironment:
    """Task stream plus tools plus oracle, all derived from one seed."""

    def __init__(self, kinds: Sequence[str] = (ARITH_TARGET,),
                 difficulties: Sequence[int] = (1, 2), seed: int = 0):
        self.kinds = tuple(kinds)
        self.difficulties = tuple(difficulties)
        self.seed = seed
        max_difficulty = max(self.difficulties)
        self.kb = build_knowledge_base(max_difficulty, seed)
        self._registry: Optional[ToolRegistry] = None

    def registry(self) -> ToolRegistry:
        if self._registry is None:
            registry = ToolRegistry()
            registry.register(_CALCULATOR_METADATA, calculator_binding)
            registry.register(_LOOKUP_METADATA, fixture_binding(self.kb.lookup_sentences()))
            self._registry = registry
        return self._registry

    def sample_tasks(self, step: int, count: int) -> list:
        tasks = []
        for i in range(count):
            index = step * count + i
            kind = self.kinds[index % len(self.kinds)]
            difficulty = self.difficulties[index % len(self.difficulties)]
            derived_seed = self.seed * 1_000_003 + index
            if kind == MULTIHOP_LOOKUP:
                tasks.append(_multihop_from_kb(self.kb, difficulty, derived_seed))
            else:
                tasks.append(_sample_arith(difficulty, derived_seed))
        return tasks

    def check_answer(self, task: SynthTask, answer: str) -> int:
        return check_answer(task, answer)


def env_registry(seed: int = 0, difficulty: int = 2) -> ToolRegistry:
    """Fresh environment registry: calculator plus fact-base lookup."""
    return SynthEnvironment(kinds=(ARITH_TARGET, MULTIHOP_LOOKUP),
                            difficulties=(difficulty,), seed=seed).registry()
