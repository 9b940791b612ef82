"""Final-outcome reward: rule-based equivalence, LLM analyze-then-judge, broadcast.

The reward is binary and trajectory-level; broadcast_reward copies it to every
turn with no shaping of any kind.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from . import prompts
from .errors import MalformedJudgeOutput
from .gateway import GenerationRequest

RULE = "RULE"
LLM = "LLM"

# Trailing unit words stripped during normalization; extend via judge_rule's
# extra_units argument for domain-specific suffixes.
DEFAULT_UNITS = (
    "years", "year", "kg", "km", "miles", "meters", "dollars", "usd", "percent", "degrees",
)

_CURRENCY = "$€£¥"
_BOXED = re.compile(r"\\boxed\{([^{}]*)\}")
_THOUSANDS = re.compile(r"(?<=\d),(?=\d)")
_MCQ_GT = re.compile(r"^\s*([A-Za-z])[\.\)]\s*(.+)$", re.DOTALL)
_ORDINAL = re.compile(r"^(\d+)(?:st|nd|rd|th)$")


@dataclass(frozen=True)
class JudgeVerdict:
    analysis: str
    correct: bool
    source: str  # RULE or LLM

    @property
    def reward(self) -> float:
        return 1.0 if self.correct else 0.0


def normalize_answer(text: str, extra_units: tuple = ()) -> str:
    """Normalization pipeline: trim, case-fold, strip separators/units, last line."""
    s = text.strip()
    boxed = _BOXED.findall(s)
    if boxed:
        s = boxed[-1]
    lines = [ln for ln in s.splitlines() if ln.strip()]
    if lines:
        s = lines[-1]
    s = s.strip().strip("\"'` ").rstrip(".").strip()
    s = s.casefold()
    s = _THOUSANDS.sub("", s)
    s = s.strip("".join(_CURRENCY) + "%° ")
    for unit in tuple(extra_units) + DEFAULT_UNITS:
        if s.endswith(" " + unit):
            s = s[: -len(unit) - 1].rstrip()
    return " ".join(s.split())


def _as_number(text: str) -> Optional[Fraction]:
    s = text.replace(" ", "")
    frac = re.fullmatch(r"(-?\d+)\s*/\s*(\d+)", s)
    if frac:
        denominator = int(frac.group(2))
        if denominator == 0:
            return None
        return Fraction(int(frac.group(1)), denominator)
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def _letter_for_ordinal(text: str) -> Optional[str]:
    m = _ORDINAL.fullmatch(text.strip())
    if m is None:
        return None
    index = int(m.group(1))
    if 1 <= index <= 26:
        return chr(ord("a") + index - 1)
    return None


def judge_rule(answer: str, ground_truth: str, extra_units: tuple = ()) -> JudgeVerdict:
    """Deterministic equivalence check; unjudgeable inputs count as incorrect."""
    if not answer.strip() or not ground_truth.strip():
        return JudgeVerdict(analysis="unjudgeable: blank answer or ground truth",
                            correct=False, source=RULE)

    mcq = _MCQ_GT.match(ground_truth)
    norm_answer = normalize_answer(answer, extra_units)
    if mcq:
        letter = mcq.group(1).casefold()
        content = normalize_answer(mcq.group(2), extra_units)
        full = normalize_answer(ground_truth, extra_units)
        ordinal = _letter_for_ordinal(norm_answer)
        correct = norm_answer in (letter, content, full) or ordinal == letter
        return JudgeVerdict(
            analysis=f"MCQ match of {norm_answer!r} against option {letter!r} / {content!r}",
            correct=correct,
            source=RULE,
        )

    norm_truth = normalize_answer(ground_truth, extra_units)
    answer_number = _as_number(norm_answer)
    truth_number = _as_number(norm_truth)
    if answer_number is not None and truth_number is not None:
        correct = answer_number == truth_number
        return JudgeVerdict(
            analysis=f"numeric comparison {norm_answer!r} vs {norm_truth!r}",
            correct=correct,
            source=RULE,
        )
    correct = norm_answer == norm_truth
    return JudgeVerdict(
        analysis=f"normalized comparison {norm_answer!r} vs {norm_truth!r}",
        correct=correct,
        source=RULE,
    )


_TRUE_FALSE = re.compile(r"<true_false>", re.IGNORECASE)


def _parse_judge_text(text: str) -> bool:
    matches = list(_TRUE_FALSE.finditer(text))
    if not matches:
        raise MalformedJudgeOutput("no <true_false> marker in judge output")
    tail = text[matches[-1].end():]
    tail = tail.lstrip(">: \t\n").strip()
    word = re.match(r"\"?'?(true|false)\b", tail, re.IGNORECASE)
    if word is None:
        raise MalformedJudgeOutput("no True/False value after <true_false> marker")
    return word.group(1).casefold() == "true"


def judge_llm(question: str, answer: str, ground_truth: str, backend,
              max_tokens: int = 1024) -> JudgeVerdict:
    """Analyze-then-judge grading; one retry at temperature 0, then rule fallback."""
    prompt = prompts.render_prompt(
        prompts.JUDGE,
        {"Question": question, "Final Response": answer, "GT": ground_truth},
    )
    last_text = ""
    for _ in range(2):
        response = backend.generate(
            GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=max_tokens)
        )
        last_text = response.text
        try:
            correct = _parse_judge_text(response.text)
        except MalformedJudgeOutput:
            continue
        analysis = response.text.split("<true_false>")[0].strip()
        return JudgeVerdict(analysis=analysis, correct=correct, source=LLM)
    fallback = judge_rule(answer, ground_truth)
    return JudgeVerdict(
        analysis=f"judge output malformed twice (last: {last_text[:80]!r}); "
                 f"rule fallback: {fallback.analysis}",
        correct=fallback.correct,
        source=RULE,
    )


def broadcast_reward(trajectory, verdict: JudgeVerdict):
    """Assign the trajectory-level reward to every turn, uniformly."""
    if not trajectory.turns:
        raise ValueError("cannot broadcast a reward onto an empty trajectory")
    reward = verdict.reward
    return dataclasses.replace(
        trajectory,
        reward=reward,
        turn_rewards=tuple(reward for _ in trajectory.turns),
    )
