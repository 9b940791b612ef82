"""Evolving memory: append-only turn records plus the text parsers that feed it.

The memory is the deterministic record of a multi-turn run: one entry per
completed turn, re-rendered into every module prompt. Parsers here extract
structured fields from raw planner/executor/verifier generations; they are
permissive about surrounding prose but strict about the required markers.
"""
from __future__ import annotations

import ast
import json
import re
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .errors import (
    EmptyQuery,
    MalformedExecutorOutput,
    MalformedPlannerOutput,
    MalformedVerifierOutput,
)

STOP = "STOP"
CONTINUE = "CONTINUE"

# Sentinel recorded when planner output names no registered tool.
TOOL_NOT_FOUND = "TOOL_NOT_FOUND"

Clock = Callable[[], float]


@dataclass(frozen=True)
class VerificationVerdict:
    analysis: str
    decision: str  # STOP or CONTINUE

    def __post_init__(self):
        if self.decision not in (STOP, CONTINUE):
            raise ValueError(f"decision must be STOP or CONTINUE, got {self.decision!r}")


@dataclass(frozen=True)
class PlannerDecision:
    justification: str
    context: str
    sub_goal: str
    tool_name: str


@dataclass(frozen=True)
class MemoryEntry:
    turn_index: int
    tool_name: str
    sub_goal: str
    command: str
    result: str
    verification: VerificationVerdict
    timestamp: float
    error_flag: Optional[str] = None


@dataclass(frozen=True)
class MemoryState:
    """Immutable snapshot; append_turn returns a new state."""

    query: str
    entries: tuple[MemoryEntry, ...]
    created_at: float

    @property
    def turn_count(self) -> int:
        return len(self.entries)

    @property
    def last_entry(self) -> Optional[MemoryEntry]:
        return self.entries[-1] if self.entries else None


def init_memory(query: str, clock: Clock = time.time) -> MemoryState:
    """Start a fresh memory rooted at the query."""
    if not query or not query.strip():
        raise EmptyQuery("query is blank")
    return MemoryState(query=query, entries=(), created_at=clock())


def append_turn(
    memory: MemoryState,
    decision: PlannerDecision,
    command: str,
    result: str,
    verdict: VerificationVerdict,
    error_flag: Optional[str] = None,
    clock: Clock = time.time,
) -> MemoryState:
    """Deterministic memory update: record one completed turn.

    Prior entries are carried over untouched; turn indices stay 1-based and
    contiguous. With a frozen clock this is a pure function of its inputs.
    """
    entry = MemoryEntry(
        turn_index=memory.turn_count + 1,
        tool_name=decision.tool_name,
        sub_goal=decision.sub_goal,
        command=command,
        result=result,
        verification=verdict,
        timestamp=clock(),
        error_flag=error_flag,
    )
    return MemoryState(
        query=memory.query,
        entries=memory.entries + (entry,),
        created_at=memory.created_at,
    )


# --- parsers ---------------------------------------------------------------

_PLANNER_LABELS = ("Justification", "Context", "Sub-Goal", "Tool Name")


def _label_matches(text: str, labels: Iterable[str]) -> list[tuple[str, int, int]]:
    out = []
    for label in labels:
        for m in re.finditer(rf"{re.escape(label)}\s*:", text):
            out.append((label, m.start(), m.end()))
    out.sort(key=lambda t: t[1])
    return out


def _field_after_last(text: str, label: str, matches: list[tuple[str, int, int]]) -> Optional[str]:
    own = [m for m in matches if m[0] == label]
    if not own:
        return None
    _, start, end = own[-1]
    following = [m for m in matches if m[1] > start]
    stop = following[0][1] if following else len(text)
    return text[end:stop].strip()


def parse_planner_output(text: str) -> PlannerDecision:
    """Extract the planner decision fields; the last occurrence of each marker wins."""
    matches = _label_matches(text, _PLANNER_LABELS)
    sub_goal = _field_after_last(text, "Sub-Goal", matches)
    tool_name = _field_after_last(text, "Tool Name", matches)
    if sub_goal is None or tool_name is None:
        raise MalformedPlannerOutput("planner output lacks a Sub-Goal or Tool Name marker")
    tool_name = tool_name.strip().strip("*`'\"").rstrip(".").strip()
    if not sub_goal or not tool_name:
        raise MalformedPlannerOutput("planner output has an empty Sub-Goal or Tool Name")
    return PlannerDecision(
        justification=_field_after_last(text, "Justification", matches) or "",
        context=_field_after_last(text, "Context", matches) or "",
        sub_goal=sub_goal,
        tool_name=tool_name,
    )


_EXEC_HEAD = re.compile(r"execution\s*=\s*tool\.execute\s*\(")


def _scan_balanced_call(text: str, open_paren: int) -> Optional[int]:
    """Return the index just past the closing paren, honouring string literals."""
    depth = 0
    i = open_paren
    quote: Optional[str] = None
    while i < len(text):
        ch = text[i]
        if quote is not None:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def parse_executor_output(text: str) -> str:
    """Recover the final complete `execution = tool.execute(...)` statement."""
    heads = list(_EXEC_HEAD.finditer(text))
    if not heads:
        raise MalformedExecutorOutput("no `execution = tool.execute(` assignment found")
    head = heads[-1]
    end = _scan_balanced_call(text, text.index("(", head.start()))
    if end is None:
        raise MalformedExecutorOutput("unbalanced parentheses in tool.execute call")
    return text[head.start():end]


def extract_query_argument(command: str) -> Optional[str]:
    """Pull the literal query argument out of a command, for logging only."""
    try:
        tree = ast.parse(command)
    except SyntaxError:
        return None
    for node in ast.walk(tree):
        if isinstance(node, ast.Call):
            for kw in node.keywords:
                if kw.arg == "query" and isinstance(kw.value, ast.Constant):
                    return str(kw.value.value)
            if node.args and isinstance(node.args[0], ast.Constant):
                return str(node.args[0].value)
    return None


_CONCLUSION = re.compile(r"Conclusion\s*:")
_DECISION_WORD = re.compile(r"\b(STOP|CONTINUE)\b")


def parse_verifier_output(text: str) -> VerificationVerdict:
    """Verdict from the final Conclusion marker; analysis is everything before it."""
    conclusions = list(_CONCLUSION.finditer(text))
    if not conclusions:
        raise MalformedVerifierOutput("no Conclusion marker found")
    last = conclusions[-1]
    words = _DECISION_WORD.findall(text[last.end():])
    if not words:
        raise MalformedVerifierOutput("no STOP/CONTINUE decision after the Conclusion marker")
    return VerificationVerdict(analysis=text[: last.start()].strip(), decision=words[-1])


# --- rendering -------------------------------------------------------------

_RENDER_LABELS = ("Tool Name", "Sub-Goal", "Command", "Result", "Verification Status")


def render_memory(memory: MemoryState) -> str:
    """Deterministic prompt rendering: query header, then one block per turn."""
    lines = [f"Query: {memory.query}"]
    for entry in memory.entries:
        lines.append("")
        lines.append(f"Action Turn {entry.turn_index}:")
        lines.append(f"Tool Name: {entry.tool_name}")
        lines.append(f"Sub-Goal: {entry.sub_goal}")
        lines.append(f"Command: {entry.command}")
        lines.append(f"Result: {entry.result}")
        status = entry.verification.analysis
        status = f"{status}\n" if status else ""
        lines.append(f"Verification Status: {status}Conclusion: {entry.verification.decision}")
    return "\n".join(lines)


_TURN_HEAD = re.compile(r"^Action Turn (\d+):\s*$", re.MULTILINE)


def parse_rendered_memory(text: str) -> list[dict]:
    """Re-parse a rendering back into per-turn field dicts (round-trip check).

    Guaranteed only for field text that does not itself contain the reserved
    labels at the start of a line; rendering escapes nothing.
    """
    heads = list(_TURN_HEAD.finditer(text))
    parsed = []
    for i, head in enumerate(heads):
        block_end = heads[i + 1].start() if i + 1 < len(heads) else len(text)
        block = text[head.end():block_end]
        label_positions = []
        for label in _RENDER_LABELS:
            m = re.search(rf"^{re.escape(label)}: ?", block, re.MULTILINE)
            if m is None:
                raise MalformedPlannerOutput(f"rendered turn block lacks label {label!r}")
            label_positions.append((label, m.start(), m.end()))
        label_positions.sort(key=lambda t: t[1])
        fields = {}
        for j, (label, _, end) in enumerate(label_positions):
            stop = label_positions[j + 1][1] if j + 1 < len(label_positions) else len(block)
            fields[label] = block[end:stop].rstrip("\n")
        verdict = parse_verifier_output(fields["Verification Status"])
        parsed.append(
            {
                "turn_index": int(head.group(1)),
                "tool_name": fields["Tool Name"],
                "sub_goal": fields["Sub-Goal"],
                "command": fields["Command"],
                "result": fields["Result"],
                "decision": verdict.decision,
            }
        )
    return parsed


# --- line-delimited serialization -------------------------------------------

def entry_to_record(entry: MemoryEntry) -> dict:
    return {
        "turn_index": entry.turn_index,
        "tool_name": entry.tool_name,
        "sub_goal": entry.sub_goal,
        "command": entry.command,
        "result": entry.result,
        "verification": {
            "analysis": entry.verification.analysis,
            "decision": entry.verification.decision,
        },
        "timestamp": entry.timestamp,
        "error_flag": entry.error_flag,
    }


def record_to_entry(record: dict) -> MemoryEntry:
    v = record["verification"]
    return MemoryEntry(
        turn_index=record["turn_index"],
        tool_name=record["tool_name"],
        sub_goal=record["sub_goal"],
        command=record["command"],
        result=record["result"],
        verification=VerificationVerdict(analysis=v["analysis"], decision=v["decision"]),
        timestamp=record["timestamp"],
        error_flag=record.get("error_flag"),
    )


def serialize_memory(memory: MemoryState) -> str:
    """One JSON record per line: a header record, then one record per entry."""
    lines = [json.dumps({"query": memory.query, "created_at": memory.created_at}, ensure_ascii=False)]
    for entry in memory.entries:
        lines.append(json.dumps(entry_to_record(entry), ensure_ascii=False))
    return "\n".join(lines) + "\n"


def deserialize_memory(text: str) -> MemoryState:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty memory serialization")
    header = json.loads(lines[0])
    entries = tuple(record_to_entry(json.loads(ln)) for ln in lines[1:])
    return MemoryState(query=header["query"], entries=entries, created_at=header["created_at"])
