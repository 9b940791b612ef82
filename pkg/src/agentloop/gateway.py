"""Text-generation backends behind one contract: a scripted stub and a remote client.

The stub replays canned responses keyed by prompt content, so whole transcripts
can be driven deterministically in tests and replays. The remote client speaks
the de-facto chat-completions HTTP protocol.
"""
from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import BackendUnavailable, ResponseTruncated


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float
    max_tokens: int
    stop_markers: tuple = ()
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    token_count: int
    backend_id: str
    latency: float


def _whitespace_tokens(text: str) -> int:
    return len(text.split())


def _apply_stop_markers(text: str, stop_markers: Sequence[str]) -> str:
    cut = len(text)
    for marker in stop_markers:
        idx = text.find(marker)
        if idx >= 0:
            cut = min(cut, idx)
    return text[:cut]


@dataclass
class StubRule:
    """One scripted response stream, matched against the rendered prompt."""

    match: str
    responses: list
    repeat_last: bool = False


class StubBackend:
    """Deterministic scripted backend.

    Each rule matches prompts by substring (typically the template's task
    sentence) and serves its responses in order. Cursors are kept per rollout
    id under a lock so parallel rollouts never interleave scripts.
    """

    backend_id = "stub"

    def __init__(self, rules: Sequence[StubRule]):
        self.rules = list(rules)
        self._cursors: dict = {}
        self._lock = threading.Lock()
        self._rollout_id = "default"

    @classmethod
    def from_script(cls, script: Sequence[dict]) -> "StubBackend":
        rules = [
            StubRule(
                match=entry["match"],
                responses=list(entry["responses"]),
                repeat_last=bool(entry.get("repeat_last", False)),
            )
            for entry in script
        ]
        return cls(rules)

    def for_rollout(self, rollout_id: str) -> "_StubSession":
        return _StubSession(self, rollout_id)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        return self._generate(self._rollout_id, request)

    def _generate(self, rollout_id: str, request: GenerationRequest) -> GenerationResponse:
        started = time.monotonic()
        with self._lock:
            for index, rule in enumerate(self.rules):
                if rule.match not in request.prompt:
                    continue
                key = (rollout_id, index)
                cursor = self._cursors.get(key, 0)
                if cursor >= len(rule.responses):
                    if rule.repeat_last and rule.responses:
                        text = rule.responses[-1]
                    else:
                        continue
                else:
                    text = rule.responses[cursor]
                    self._cursors[key] = cursor + 1
                text = _apply_stop_markers(text, request.stop_markers)
                tokens = _whitespace_tokens(text)
                if tokens > request.max_tokens:
                    raise ResponseTruncated(
                        f"scripted response has {tokens} tokens but max_tokens="
                        f"{request.max_tokens}"
                    )
                return GenerationResponse(
                    text=text,
                    token_count=tokens,
                    backend_id=self.backend_id,
                    latency=time.monotonic() - started,
                )
        raise BackendUnavailable("no matching script entry for prompt")


class _StubSession:
    """View of a stub backend with its own script cursors."""

    def __init__(self, stub: StubBackend, rollout_id: str):
        self._stub = stub
        self._rollout_id = rollout_id
        self.backend_id = stub.backend_id

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        return self._stub._generate(self._rollout_id, request)


class RemoteBackend:
    """Chat-completions client: one user message per request, retry on transport errors."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "AGENTLOOP_API_KEY",
        max_attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self._sleep = sleep
        self.backend_id = f"remote:{model}"

    def _payload(self, request: GenerationRequest) -> dict:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop_markers:
            payload["stop"] = list(request.stop_markers)
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        body = json.dumps(self._payload(request)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = f"{self.base_url}/v1/chat/completions"
        started = time.monotonic()
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            http_request = urllib.request.Request(url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                    data = json.loads(response.read().decode("utf-8"))
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
                last_error = exc
        else:
            raise BackendUnavailable(f"remote backend failed after {self.max_attempts} attempts: {last_error}")
        choice = data["choices"][0]
        text = choice["message"]["content"]
        if choice.get("finish_reason") == "length":
            raise ResponseTruncated("remote backend stopped at the token limit")
        usage = data.get("usage", {})
        token_count = int(usage.get("completion_tokens", _whitespace_tokens(text)))
        return GenerationResponse(
            text=text,
            token_count=token_count,
            backend_id=self.backend_id,
            latency=time.monotonic() - started,
        )


def generate(backend, request: GenerationRequest) -> GenerationResponse:
    """Uniform entry point over any backend object with a generate method."""
    return backend.generate(request)
