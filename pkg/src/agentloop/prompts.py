"""Module prompt templates and their renderer.

Placeholders use {Name} syntax and every placeholder must be bound at render
time; a silent empty substitution would corrupt the turn protocol. Template
bodies define the plain-text contracts the parsers in `memory` rely on
(Sub-Goal / Tool Name sections, trailing Conclusion line, two-part solution,
analyze-then-judge markers).
"""
from __future__ import annotations

import re

from .errors import MissingBinding

PLANNER = "PLANNER"
EXECUTOR = "EXECUTOR"
VERIFIER = "VERIFIER"
GENERATOR = "GENERATOR"
JUDGE = "JUDGE"

_TEMPLATES = {
    PLANNER: """Task: Determine the optimal next step to address the query using available tools and previous context.

Context:
Query: {Question}
Available Tools: [{Available Tools}]
Toolbox Metadata:
{Toolbox Metadata}
Previous Steps:
{Actions from Memory}

Instructions:
1. Analyze the current objective, the history of executed steps, and the capabilities of the available tools.
2. Select the single most appropriate tool for the next action.
3. Formulate a clear, concise, and achievable sub-goal that precisely defines what the selected tool should accomplish.
4. Provide all necessary context so the tool can execute its task without ambiguity.

Response Format:
Justification: Explain why the chosen tool is optimal for the sub-goal.
Context: Provide all prerequisite information for the tool.
Sub-Goal: State the exact objective for the tool.
Tool Name: State the exact name of the selected tool.

Rules:
- Select only one tool per step.
- The Sub-Goal must be directly and solely achievable by the selected tool.
- The final response must end with the Context, Sub-Goal, and Tool Name sections in that order. No additional text should follow.""",
    EXECUTOR: """Task: Generate a precise command to execute the selected tool.

Context:
Query: {Question}
Sub-Goal: {Sub-Goal}
Tool Name: {Tool Name}
Toolbox Metadata:
{Selected Tool Metadata}
Relevant Data: {Relevant Data}

Instructions:
1. Analyze the tool's required parameters from its metadata.
2. Construct a valid command that addresses the sub-goal using the provided context and data.
3. The command must include at least one call to tool.execute().
4. Each tool.execute() call must be assigned to a variable named execution.
5. Use exact numbers, strings, and parameters in the tool.execute() call based on the context.

Output Format:
Present your response as:
Generated Command:
execution = tool.execute(...)

Do not include any extra text or explanations.""",
    VERIFIER: """Task: Evaluate if the current memory is complete and accurate enough to answer the query, or if more tools are needed.

Context:
Query: {Question}
Available Tools: [{Available Tools}]
Toolbox Metadata:
{Toolbox Metadata}
Memory (Tools Used & Results):
{Actions from Memory}

Instructions:
1. Review the original query and the complete history of actions and results in the memory.
2. Does the accumulated information fully address all aspects of the query?
3. Are there any unanswered sub-questions, missing pieces of information, or contradictions?
4. Determine if any unused tools could provide critical missing information.

Final Determination:
- If the memory is sufficient to form a complete and accurate answer, explain why and conclude with "Conclusion: STOP".
- If more information is needed, state what is missing and conclude with "Conclusion: CONTINUE".

Rules:
- The response must end with either exactly "Conclusion: STOP" or "Conclusion: CONTINUE".
- Do not include any text after the conclusion statement.""",
    GENERATOR: """Task: Generate a concise final answer to the query based on all provided context.

Context:
Query: {Question}
Initial Analysis: {Initial Analysis}
Actions Taken:
{Actions from Memory}

Instructions:
1. Review the original query and the complete sequence of actions and their results.
2. Synthesize the key findings from the action history into a coherent narrative.
3. Provide a direct, precise, and standalone final answer to the original query.

Output Structure:
Process Summary: A clear, step-by-step breakdown of how the query was addressed.
Answer: A direct and concise final answer to the query.

Rules:
- The response must follow the exact two-part structure above.
- The Answer must be placed at the very end and be clearly identifiable.""",
    JUDGE: """Task: Determine if the Model Response is equivalent to the Ground Truth.

Instructions:
1. Extract: Isolate the final answer from the Model Response, ignoring all reasoning steps.
2. Normalize & Compare: Assess equivalence after normalization.
   - Mathematical answers must be mathematically identical (1/2 is equivalent to 0.5).
   - Numerical/textual answers: ignore formatting (commas, spaces), case, and extraneous units or currency.
   - Multiple choice: the answer must match either the correct option's content or its identifier.
3. Verdict: Return "True" only if the normalized answers are semantically or mathematically equivalent.

Inputs:
Question: {Question}
Model Response: {Final Response}
Ground Truth: {GT}

Output Format:
Present your response in the following structured format. Do not include any extra text.
<analysis>: Brief analysis of the comparison.
<true_false>: "True" or "False".""",
}

_PLACEHOLDER = re.compile(r"\{([A-Za-z][A-Za-z -]*)\}")


def template_body(template_id: str) -> str:
    if template_id not in _TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    return _TEMPLATES[template_id]


def template_placeholders(template_id: str) -> list[str]:
    return list(dict.fromkeys(_PLACEHOLDER.findall(template_body(template_id))))


def render_prompt(template_id: str, bindings: dict) -> str:
    """Substitute every placeholder; an unreplaced one is an error, not emptiness."""
    body = template_body(template_id)

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise MissingBinding(name)
        return str(bindings[name])

    return _PLACEHOLDER.sub(_sub, body)
