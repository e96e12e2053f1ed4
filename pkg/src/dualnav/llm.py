"""Chat-completion client with pluggable transports.

``HttpTransport`` speaks the OpenAI-compatible ``/chat/completions`` wire
format.  ``ScriptedTransport`` replays a JSONL transcript of
``{"expect_substring", "reply"}`` entries strictly in order.
``OracleTransport`` answers from ground truth (world + bound episode) and is
meant for tests and benchmarks only.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, TypeVar

import httpx

from .world import Episode, WorldGraph, geodesic

log = logging.getLogger(__name__)

API_KEY_ENV = "R3_LLM_API_KEY"
ENDPOINT_ENV = "R3_LLM_ENDPOINT"

T = TypeVar("T")


class LlmTransportError(RuntimeError):
    pass


class ScriptExhausted(LlmTransportError):
    pass


class ScriptMismatch(LlmTransportError):
    pass


class LlmParseError(ValueError):
    def __init__(self, stage: str, attempts: int, last_reply: str):
        super().__init__(f"{stage}: no parseable reply after {attempts} attempts (last: {last_reply!r})")
        self.stage = stage
        self.attempts = attempts
        self.last_reply = last_reply


@dataclass
class ChatRequest:
    stage: str
    messages: list[dict[str, str]]
    temperature: float = 0.0
    context: dict[str, Any] = field(default_factory=dict)

    @property
    def prompt(self) -> str:
        return self.messages[-1]["content"]


@dataclass
class ChatReply:
    text: str
    usage: dict[str, int] | None = None


class Transport(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> ChatReply: ...

    def begin_episode(self, world: WorldGraph, episode: Episode) -> None: ...


class HttpTransport:
    name = "http"

    def __init__(self, model: str, endpoint: str | None = None, api_key: str | None = None,
                 path: str = "/v1/chat/completions", timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.model = model
        self.endpoint = (endpoint or os.environ.get(ENDPOINT_ENV) or "https://api.openai.com").rstrip("/")
        self.path = path
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self._client = client

    def begin_episode(self, world, episode) -> None:
        pass

    def complete(self, request: ChatRequest) -> ChatReply:
        if not self.api_key:
            raise LlmTransportError(f"no API key: set {API_KEY_ENV}")
        payload = {"model": self.model, "messages": request.messages, "temperature": request.temperature}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        url = self.endpoint + self.path
        try:
            if self._client is not None:
                resp = self._client.post(url, json=payload, headers=headers, timeout=self.timeout)
            else:
                resp = httpx.post(url, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise LlmTransportError(f"{request.stage}: chat completion failed: {exc}") from exc
        choices = data.get("choices") or []
        if not choices:
            raise LlmTransportError(f"{request.stage}: response has no choices")
        content = (choices[0].get("message") or {}).get("content") or ""
        usage = data.get("usage")
        if usage is not None:
            usage = {k: int(v) for k, v in usage.items() if isinstance(v, int)}
        return ChatReply(str(content), usage)


class ScriptedTransport:
    name = "scripted"

    def __init__(self, entries):
        self.entries = [(str(e["expect_substring"]), str(e["reply"])) if isinstance(e, dict) else (str(e[0]), str(e[1]))
                        for e in entries]
        self.position = 0

    @classmethod
    def from_jsonl(cls, path) -> "ScriptedTransport":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])

    def begin_episode(self, world, episode) -> None:
        pass

    def complete(self, request: ChatRequest) -> ChatReply:
        if self.position >= len(self.entries):
            raise ScriptExhausted(f"{request.stage}: transcript exhausted after {len(self.entries)} replies")
        expect, reply = self.entries[self.position]
        if expect not in request.prompt:
            raise ScriptMismatch(
                f"{request.stage}: transcript entry {self.position} expects {expect!r} in the prompt")
        self.position += 1
        return ChatReply(reply)


class OracleTransport:
    """Ground-truth answers for every prompting stage."""

    name = "oracle"

    def __init__(self, world: WorldGraph | None = None, restart_rule: str = "off_route"):
        if restart_rule not in ("off_route", "farther"):
            raise ValueError(f"unknown restart rule {restart_rule!r}")
        self.world = world
        self.restart_rule = restart_rule
        self.episode: Episode | None = None

    def begin_episode(self, world: WorldGraph, episode: Episode) -> None:
        self.world = world
        self.episode = episode

    def complete(self, request: ChatRequest) -> ChatReply:
        if self.world is None or self.episode is None:
            raise LlmTransportError("oracle transport used without a bound episode")
        ctx = request.context
        vp = ctx.get("viewpoint")
        goal = self.episode.goal
        stage = request.stage
        if stage == "perception":
            return ChatReply(", ".join(self.world.viewpoints[vp].tags) or "nothing notable")
        if stage == "planning":
            return ChatReply(f"Head for {goal} along the shortest route.")
        if stage == "prediction":
            options: dict[str, str] = ctx["options"]
            want = "stop" if vp == goal else geodesic(self.world, vp, goal)[1][1]
            for letter, target in options.items():
                if target == want:
                    return ChatReply(letter)
            return ChatReply(next(iter(options)))
        if stage == "ending":
            return ChatReply("Yes" if vp == goal else "No")
        if stage == "formulation":
            if self.restart_rule == "off_route":
                restart = vp not in self.episode.gt_path
            else:
                restart = geodesic(self.world, vp, goal)[0] > geodesic(self.world, ctx["start"], goal)[0]
            decision = "RESTART" if restart else "CONTINUE"
            return ChatReply(f"DECISION: {decision}\nPLAN: Head for {goal} along the shortest route.")
        raise LlmTransportError(f"oracle transport has no answer for stage {stage!r}")


class RecordingTransport:
    """Wraps a transport and keeps a replayable transcript of its replies."""

    def __init__(self, inner: Transport, key: Callable[[ChatRequest], str] | None = None):
        self.inner = inner
        self.name = inner.name
        self.key = key or (lambda req: req.prompt.splitlines()[0])
        self.entries: list[dict[str, str]] = []

    def begin_episode(self, world, episode) -> None:
        self.inner.begin_episode(world, episode)

    def complete(self, request: ChatRequest) -> ChatReply:
        reply = self.inner.complete(request)
        self.entries.append({"expect_substring": self.key(request), "reply": reply.text})
        return reply

    def save(self, path) -> None:
        Path(path).write_text("".join(json.dumps(e) + "\n" for e in self.entries), encoding="utf-8")


class LlmClient:
    """Counts calls, keeps the transcript, and retries unparseable replies."""

    def __init__(self, transport: Transport, retry_limit: int = 2, temperature: float = 0.0):
        self.transport = transport
        self.retry_limit = retry_limit
        self.temperature = temperature
        self.calls = 0
        self.transcript: list[dict[str, Any]] = []

    def begin_episode(self, world: WorldGraph, episode: Episode) -> None:
        self.transport.begin_episode(world, episode)

    def chat(self, stage: str, system: str, user: str, context: dict | None = None) -> str:
        request = ChatRequest(
            stage,
            [{"role": "system", "content": system}, {"role": "user", "content": user}],
            self.temperature,
            dict(context or {}),
        )
        self.calls += 1
        entry: dict[str, Any] = {"stage": stage, "transport": self.transport.name, "prompt": user}
        try:
            reply = self.transport.complete(request)
        except LlmTransportError as exc:
            entry["error"] = str(exc)
            self.transcript.append(entry)
            raise
        entry["reply"] = reply.text
        if reply.usage:
            entry["usage"] = reply.usage
        self.transcript.append(entry)
        return reply.text

    def ask(self, stage: str, system: str, user: str, parse: Callable[[str], T],
            context: dict | None = None) -> tuple[T, int]:
        """Call until ``parse`` accepts the reply; returns (value, retries used).

        ``parse`` signals rejection by raising ``ValueError``.
        """
        last = ""
        for attempt in range(self.retry_limit + 1):
            last = self.chat(stage, system, user, context)
            try:
                value = parse(last)
            except ValueError:
                log.info("%s: unparseable reply on attempt %d: %r", stage, attempt + 1, last)
                continue
            if attempt:
                log.info("%s: parsed after %d retries", stage, attempt)
                self.transcript[-1]["retries"] = attempt
            return value, attempt
        raise LlmParseError(stage, self.retry_limit + 1, last)


def make_client(kind: str, *, world: WorldGraph | None = None, transcript=None, model: str = "gpt-4o",
                retry_limit: int = 2) -> LlmClient:
    if kind == "oracle":
        return LlmClient(OracleTransport(world), retry_limit)
    if kind == "scripted":
        if transcript is None:
            raise ValueError("scripted transport needs a transcript file")
        return LlmClient(ScriptedTransport.from_jsonl(transcript), retry_limit)
    if kind == "http":
        return LlmClient(HttpTransport(model), retry_limit)
    raise ValueError(f"unknown transport {kind!r}")
