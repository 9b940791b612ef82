"""Tool abstraction: metadata cards, registry with exact-name lookup, timed execution.

Commands are the plain-text `execution = tool.execute(...)` statements produced
by the executor module. Argument values must resolve to literals (or names bound
by earlier assignments inside the same command); anything else is reported as a
runtime error in the result text, mirroring how failed commands surface to the
verifier instead of aborting the run.
"""
from __future__ import annotations

import ast
import hashlib
import json
import re
import threading
import time
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

from .errors import AgentLoopError, DuplicateToolName
from . import arith

OK = "OK"
TOOL_ERROR = "TOOL_ERROR"
TIMEOUT = "TIMEOUT"


class ToolError(AgentLoopError):
    """Binding-level failure; becomes a TOOL_ERROR result, never a crash."""


@dataclass(frozen=True)
class ToolMetadata:
    name: str
    description: str
    input_schema: tuple  # of (param, semantic type, description)
    output_schema: tuple  # (semantic type, description)
    demo_commands: tuple  # of (command, description)
    limitations: tuple = ()
    best_practices: tuple = ()
    requires_llm_engine: bool = False

    def __post_init__(self):
        for command, _ in self.demo_commands:
            if "tool.execute(" not in command:
                raise ValueError(f"demo command for {self.name!r} lacks a tool.execute( call")


Binding = Callable[[dict], str]


@dataclass(frozen=True)
class Tool:
    metadata: ToolMetadata
    binding: Binding


@dataclass(frozen=True)
class ExecutionResult:
    output: str
    elapsed: float
    status: str  # OK, TOOL_ERROR, or TIMEOUT
    error_detail: Optional[str] = None


class ToolRegistry:
    """Name -> tool bindings; must not be mutated while a rollout is running."""

    def __init__(self):
        self._tools: dict[str, Tool] = {}
        self._cards: Optional[tuple] = None

    def register(self, metadata: ToolMetadata, binding: Binding) -> None:
        if metadata.name in self._tools:
            raise DuplicateToolName(metadata.name)
        self._tools[metadata.name] = Tool(metadata=metadata, binding=binding)
        self._cards = None

    def lookup(self, name: str) -> Optional[Tool]:
        """Exact match after whitespace trimming; None when absent, never raises."""
        return self._tools.get(name.strip())

    def names(self) -> list[str]:
        return list(self._tools)

    def rendered_cards(self) -> tuple:
        if self._cards is None:
            self._cards = tuple(render_metadata_card(t.metadata) for t in self._tools.values())
        return self._cards

    def metadata_hash(self) -> str:
        payload = "\n\n".join(self.rendered_cards())
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def register_tool(registry: ToolRegistry, metadata: ToolMetadata, binding: Binding) -> ToolRegistry:
    registry.register(metadata, binding)
    return registry


def lookup_tool(registry: ToolRegistry, name: str) -> Optional[Tool]:
    return registry.lookup(name)


# --- command argument resolution --------------------------------------------

def _const_eval(node: ast.AST, env: dict):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        if node.id in env:
            return env[node.id]
        raise ToolError(f"name '{node.id}' is not defined")
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_const_eval(el, env) for el in node.elts]
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Add):
        left = _const_eval(node.left, env)
        right = _const_eval(node.right, env)
        try:
            return left + right
        except TypeError as exc:
            raise ToolError(str(exc)) from exc
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        value = _const_eval(node.operand, env)
        if isinstance(value, (int, float)):
            return -value
        raise ToolError("unary minus on non-numeric value")
    raise ToolError("unsupported expression in command arguments")


def _is_execute_call(node: ast.AST) -> bool:
    return (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Attribute)
        and node.func.attr == "execute"
        and isinstance(node.func.value, ast.Name)
        and node.func.value.id == "tool"
    )


def resolve_command_arguments(command: str, param_order: Sequence[str]) -> dict:
    """Extract the argument dict of the final tool.execute call in a command."""
    try:
        tree = ast.parse(command)
    except SyntaxError as exc:
        raise ToolError(f"invalid command syntax: {exc.msg}") from exc
    env: dict = {}
    call = None
    for stmt in tree.body:
        if isinstance(stmt, ast.Assign) and len(stmt.targets) == 1 and isinstance(stmt.targets[0], ast.Name):
            if _is_execute_call(stmt.value):
                call = stmt.value
            else:
                env[stmt.targets[0].id] = _const_eval(stmt.value, env)
        elif isinstance(stmt, ast.Expr) and _is_execute_call(stmt.value):
            call = stmt.value
    if call is None:
        raise ToolError("command contains no tool.execute call")
    args: dict = {}
    for position, node in enumerate(call.args):
        name = param_order[position] if position < len(param_order) else f"arg{position}"
        args[name] = _const_eval(node, env)
    for kw in call.keywords:
        if kw.arg is None:
            raise ToolError("starred arguments are not supported")
        args[kw.arg] = _const_eval(kw.value, env)
    return args


def execute_command(tool: Tool, command: str, timeout: float) -> ExecutionResult:
    """Run a parsed command against the tool's binding, bounded by timeout.

    All failures are values: argument errors and binding errors produce
    TOOL_ERROR results whose output text carries the error message, the way
    a failed step shows up in run transcripts.
    """
    started = time.monotonic()
    param_order = [p[0] for p in tool.metadata.input_schema]
    try:
        args = resolve_command_arguments(command, param_order)
    except ToolError as exc:
        return ExecutionResult(
            output=f"Error in execute_tool_command: {exc}",
            elapsed=time.monotonic() - started,
            status=TOOL_ERROR,
            error_detail=str(exc),
        )

    outcome: dict = {}

    def _run():
        try:
            outcome["output"] = tool.binding(args)
        except Exception as exc:  # binding failures become values
            outcome["error"] = exc

    worker = threading.Thread(target=_run, daemon=True)
    worker.start()
    worker.join(timeout)
    elapsed = time.monotonic() - started
    if worker.is_alive():
        return ExecutionResult(output="", elapsed=max(elapsed, timeout), status=TIMEOUT,
                               error_detail=f"timed out after {timeout} s")
    if "error" in outcome:
        detail = str(outcome["error"])
        return ExecutionResult(output=f"Error: {detail}", elapsed=elapsed,
                               status=TOOL_ERROR, error_detail=detail)
    return ExecutionResult(output=str(outcome.get("output", "")), elapsed=elapsed, status=OK)


# --- metadata cards ----------------------------------------------------------

def _bullet_list(items: Sequence[str]) -> list[str]:
    return [f"- {item}" for item in items] if items else ["- none"]


def render_metadata_card(metadata: ToolMetadata) -> str:
    """Deterministic card rendering, one section per field in fixed order."""
    lines = [f"Tool Name: {metadata.name}", f"Description: {metadata.description}", "Input:"]
    for param, semantic_type, description in metadata.input_schema:
        lines.append(f"- {param} ({semantic_type}): {description}")
    out_type, out_desc = metadata.output_schema
    lines.append("Output:")
    lines.append(f"- {out_type}: {out_desc}")
    lines.append("Demo Commands:")
    if metadata.demo_commands:
        for command, description in metadata.demo_commands:
            lines.append(f"- Command: {command}")
            lines.append(f"  Description: {description}")
    else:
        lines.append("- none")
    lines.append("Limitations:")
    lines.extend(_bullet_list(metadata.limitations))
    lines.append("Best Practices:")
    lines.extend(_bullet_list(metadata.best_practices))
    lines.append(f"LLM Engine Required: {metadata.requires_llm_engine}")
    return "\n".join(lines)


# --- bindings ----------------------------------------------------------------

def fixture_binding(mapping: Mapping[str, str]) -> Binding:
    """Deterministic query -> canned output map; read-only after creation."""
    frozen = dict(mapping)

    def _lookup(args: dict) -> str:
        query = str(args.get("query", ""))
        hit = frozen.get(query)
        if hit is None:
            return f"No results found for query: {query}"
        return hit

    return _lookup


def load_fixture_file(path: str) -> dict:
    """Fixture files are UTF-8 JSON objects mapping query strings to outputs."""
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, dict):
        raise ValueError(f"fixture file {path} must contain a JSON object")
    return data


def calculator_binding(args: dict) -> str:
    """Reference code-tool backend: a restricted arithmetic interpreter.

    Accepts a bare expression, prose containing one, or the solve form
    `solve numbers=[a, b, c] target=N` which brute-forces an expression.
    """
    query = str(args.get("query", ""))
    solve = arith_solve_request(query)
    if solve is not None:
        numbers, target = solve
        expr = arith.search_expression(tuple(numbers), target)
        if expr is None:
            # Phrasing deliberately avoids "equals N" so the verifier cannot
            # mistake a failed search for a solved target.
            return f"No expression over {list(numbers)} reaches the target {target}."
        return f"The expression {expr} equals {target}."
    expr = query.strip()
    try:
        arith.evaluate(expr)
    except arith.ExpressionError:
        found = arith.find_expression(query)
        if found is None:
            raise ToolError("could not find an arithmetic expression in query")
        expr = found
    value = arith.evaluate(expr, exact=True)
    rendered = int(value) if value.denominator == 1 else float(value)
    return f"{expr.strip()} = {rendered}"


_SOLVE_FORM = re.compile(r"solve\s+numbers\s*=\s*\[([\d,\s]+)\]\s+target\s*=\s*(-?\d+)")


def arith_solve_request(query: str):
    m = _SOLVE_FORM.search(query)
    if m is None:
        return None
    numbers = [int(x) for x in m.group(1).split(",") if x.strip()]
    return numbers, int(m.group(2))


def llm_binding(backend, temperature: float = 0.0, max_tokens: int = 2048) -> Binding:
    """Wrap a gateway backend as a tool; temperature 0 keeps tool output stable."""
    from .gateway import GenerationRequest  # local import avoids a cycle

    def _generate(args: dict) -> str:
        query = str(args.get("query", ""))
        request = GenerationRequest(prompt=query, temperature=temperature, max_tokens=max_tokens)
        return backend.generate(request).text

    return _generate


def live_search_binding(url: str, api_key_env: str = "AGENTLOOP_SEARCH_KEY",
                        timeout: float = 30.0) -> Binding:
    """HTTP GET search backend; credentials come from the named env variable."""
    import os

    def _search(args: dict) -> str:
        query = str(args.get("query", ""))
        params = {"q": query}
        key = os.environ.get(api_key_env, "")
        if key:
            params["key"] = key
        try:
            with urllib.request.urlopen(f"{url}?{urllib.parse.urlencode(params)}",
                                        timeout=timeout) as response:
                return response.read().decode("utf-8", errors="replace")
        except Exception as exc:
            raise ToolError(f"search request failed: {exc}") from exc

    return _search


def unconfigured_binding(name: str) -> Binding:
    def _fail(args: dict) -> str:
        raise ToolError(f"no backend configured for {name}")

    return _fail


# --- reference toolset --------------------------------------------------------

def reference_tool_metadata() -> list[ToolMetadata]:
    """The five standard tool cards, in registry order."""
    return [
        ToolMetadata(
            name="Base Generator",
            description=(
                "A generalized tool that takes query from the user, and answers "
                "the question step by step to the best of its ability."
            ),
            input_schema=(("query", "str", "The query that guides the agent to generate a response."),),
            output_schema=("str", "The generated response to the original query"),
            demo_commands=(
                ('execution = tool.execute(query="Summarize the following text in a few lines")',
                 "Generate a short summary given the query from the user."),
            ),
            limitations=("May provide hallucinated or incorrect responses.",),
            best_practices=(
                "Use it for general queries that don't require specialized tools.",
                "Provide clear, specific queries.",
                "Verify important information from its responses.",
            ),
            requires_llm_engine=True,
        ),
        ToolMetadata(
            name="Python Coder",
            description=(
                "A tool that generates and executes simple Python code snippets for basic "
                "arithmetical calculations and math-related problems. The generated code runs "
                "in a highly restricted environment with only basic mathematical operations available."
            ),
            input_schema=(("query", "str", "A clear, specific description of the arithmetic "
                                           "calculation or math problem to be solved, including "
                                           "any necessary numerical inputs."),),
            output_schema=("dict", "A dictionary containing the generated code, calculation "
                                   "result, and any error messages."),
            demo_commands=(
                ('execution = tool.execute(query="Find the sum of prime numbers up to 50")',
                 "Generate a Python code snippet to find the sum of prime numbers up to 50."),
            ),
            limitations=(
                "Restricted to basic arithmetic operations; no imports, strings, or data structures.",
                "No access to system resources, file operations, or network requests.",
                "Output is limited to numerical results.",
            ),
            best_practices=(
                "Provide clear queries describing the desired mathematical calculation.",
                "Include all necessary numerical inputs directly in the query string.",
            ),
            requires_llm_engine=True,
        ),
        ToolMetadata(
            name="Google Search",
            description=(
                "A web search tool powered by Google Search that provides real-time "
                "information from the internet with citation support."
            ),
            input_schema=(
                ("query", "str", "The search query to find information on the web."),
                ("add_citations", "bool", "Whether to add citations to the results. Default True."),
            ),
            output_schema=("str", "The search results of the query."),
            demo_commands=(
                ('execution = tool.execute(query="What is the capital of France?")',
                 "Search for general information with default citations enabled."),
            ),
            limitations=(
                "Only suitable for general information search.",
                "Contains less domain-specific information.",
            ),
            best_practices=(
                "Choose this tool for question-style queries about general knowledge.",
                "The tool returns summarized information.",
            ),
            requires_llm_engine=False,
        ),
        ToolMetadata(
            name="Wikipedia Search",
            description=(
                "A tool that searches Wikipedia and returns relevant pages with their titles, "
                "URLs, abstracts, and retrieved information based on a given query."
            ),
            input_schema=(("query", "str", "The search query for Wikipedia."),),
            output_schema=("dict", "A dictionary containing search results with content, "
                                   "URLs, and metadata."),
            demo_commands=(
                ('execution = tool.execute(query="When was the first moon landing?")',
                 "Search Wikipedia for information about the first moon landing."),
            ),
            limitations=(
                "Retrieves grounded information from Wikipedia pages only.",
                "Accuracy depends on Wikipedia's content quality.",
            ),
            best_practices=(
                "Use specific, targeted queries rather than broad questions.",
                "Use it as part of a multi-step research process.",
            ),
            requires_llm_engine=True,
        ),
        ToolMetadata(
            name="Web Search",
            description=(
                "A specialized tool for answering questions by retrieving relevant "
                "information from a given website."
            ),
            input_schema=(
                ("query", "str", "The search query for the website."),
                ("url", "str", "The URL of the website to retrieve information from."),
            ),
            output_schema=("str", "The answer to the query based on the website content."),
            demo_commands=(
                ('execution = tool.execute(query="What is the exact mass in kg of the moon?", '
                 'url="https://en.wikipedia.org/wiki/Moon")',
                 "Retrieve information about the moon's mass from a specific page."),
            ),
            limitations=(
                "Requires valid URLs that are accessible and contain text content.",
                "May not work with JavaScript-heavy websites or those requiring authentication.",
            ),
            best_practices=(
                "Use it after other search tools have produced real, accessible URLs.",
            ),
            requires_llm_engine=True,
        ),
    ]


def reference_registry(
    tool_fixtures: Optional[Mapping[str, Mapping[str, str]]] = None,
    llm_backend=None,
) -> ToolRegistry:
    """Registry with the five reference tools.

    A tool named in `tool_fixtures` gets a deterministic fixture binding.
    Otherwise Python Coder runs the restricted interpreter, Base Generator
    uses the given gateway backend, and search tools are unconfigured (they
    error as values until given fixtures or a live backend).
    """
    fixtures = tool_fixtures or {}
    registry = ToolRegistry()
    for metadata in reference_tool_metadata():
        if metadata.name in fixtures:
            binding = fixture_binding(fixtures[metadata.name])
        elif metadata.name == "Python Coder":
            binding = calculator_binding
        elif metadata.name == "Base Generator" and llm_backend is not None:
            binding = llm_binding(llm_backend)
        else:
            binding = unconfigured_binding(metadata.name)
        registry.register(metadata, binding)
    return registry
