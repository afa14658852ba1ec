"""Chat-completion client with two backends: a live HTTP endpoint speaking
the chat-completions convention, and deterministic scripted replay from
fixture files. A recording wrapper captures live exchanges into fixtures so
any run can be replayed bit-exactly.

API keys come from the ROBOTGPT_API_KEY env var and never appear in
transcripts or fixtures.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .config import ENV_API_KEY, LlmConfig

VALID_ROLES = ("system", "user", "assistant")


class LlmError(Exception):
    pass


class TransportError(LlmError):
    """Network failure that persisted through retries."""


class ApiError(LlmError):
    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned {status}: {body[:200]}")
        self.status = status
        self.body = body


class FixtureExhausted(LlmError):
    """The scripted fixture has no reply left; nothing is fabricated."""


class FixtureMismatch(LlmError):
    """Strict replay: the sent message differs from the recorded one."""


class MalformedFixture(LlmError):
    pass


@dataclass
class Message:
    role: str
    content: str


@dataclass
class ChatTranscript:
    model: str
    temperature: float
    messages: list[Message] = field(default_factory=list)

    def append(self, role: str, content: str):
        if role not in VALID_ROLES:
            raise ValueError(f"bad role {role!r}")
        if role == "system":
            if self.messages:
                raise ValueError("system message must come first")
        else:
            last = self.messages[-1].role if self.messages else "assistant"
            expected = "user" if last in ("system", "assistant") else "assistant"
            if role != expected:
                raise ValueError(f"expected a {expected} message, got {role}")
        self.messages.append(Message(role, content))


# ---------------------------------------------------------------------------
# backends

_inflight = threading.BoundedSemaphore(LlmConfig().max_in_flight)


def set_max_in_flight(n: int):
    """Cap concurrent live requests across all sessions."""
    global _inflight
    _inflight = threading.BoundedSemaphore(n)


class LiveBackend:
    def __init__(self, cfg: LlmConfig, temperature: float,
                 api_key: str | None = None):
        if not cfg.endpoint:
            raise LlmError("llm.endpoint is not configured")
        if not cfg.model:
            raise LlmError("llm.model is not configured")
        key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        if not key:
            raise LlmError(f"{ENV_API_KEY} is not set")
        self.cfg = cfg
        self.temperature = temperature
        self._key = key

    def complete(self, transcript: ChatTranscript) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": [{"role": m.role, "content": m.content}
                         for m in transcript.messages],
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self._key}",
                   "Content-Type": "application/json"}
        last_exc: Exception | None = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff * (2 ** (attempt - 1)))
            try:
                with _inflight:
                    resp = requests.post(self.cfg.endpoint, json=payload,
                                         headers=headers,
                                         timeout=self.cfg.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = ApiError(resp.status_code, resp.text)
                continue
            if not (200 <= resp.status_code < 300):
                raise ApiError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ApiError(resp.status_code,
                               f"malformed response body: {exc}") from exc
        raise TransportError(f"gave up after {self.cfg.retries + 1} attempts: "
                             f"{last_exc}")


class ScriptedBackend:
    def __init__(self, fixture: ChatTranscript, strict: bool = True):
        self.fixture = fixture
        self.strict = strict
        self.cursor = 0
        if fixture.messages and fixture.messages[0].role == "system":
            self.cursor = 1

    def complete(self, transcript: ChatTranscript) -> str:
        sent = transcript.messages[-1]
        if self.strict and self.fixture.messages \
                and self.fixture.messages[0].role == "system":
            first = transcript.messages[0]
            if first.role != "system" or first.content != self.fixture.messages[0].content:
                raise FixtureMismatch("system message differs from the fixture")
        if self.cursor >= len(self.fixture.messages):
            raise FixtureExhausted("no scripted reply left")
        expected = self.fixture.messages[self.cursor]
        if expected.role != "user":
            raise MalformedFixture(f"expected a user message at fixture "
                                   f"position {self.cursor}")
        if self.strict and expected.content != sent.content:
            raise FixtureMismatch(
                f"sent message differs from the fixture at position "
                f"{self.cursor}")
        self.cursor += 1
        if self.cursor >= len(self.fixture.messages):
            raise FixtureExhausted("fixture ends without an assistant reply")
        reply = self.fixture.messages[self.cursor]
        if reply.role != "assistant":
            raise MalformedFixture(f"expected an assistant message at fixture "
                                   f"position {self.cursor}")
        self.cursor += 1
        return reply.content


class RecordingBackend:
    """Live backend that checkpoints the transcript to a fixture file after
    every exchange."""

    def __init__(self, live: LiveBackend, capture_path: str | Path):
        self.live = live
        self.capture_path = Path(capture_path)

    def complete(self, transcript: ChatTranscript) -> str:
        return self.live.complete(transcript)


# ---------------------------------------------------------------------------
# sessions

class BotSession:
    """One conversation with one bot role; single-consumer."""

    def __init__(self, backend, model: str, temperature: float):
        self.backend = backend
        self.transcript = ChatTranscript(model=model, temperature=temperature)

    @classmethod
    def live(cls, cfg: LlmConfig, role: str, api_key: str | None = None) -> "BotSession":
        temp = cfg.temperature_for(role)
        return cls(LiveBackend(cfg, temp, api_key), cfg.model, temp)

    @classmethod
    def scripted(cls, fixture: ChatTranscript, strict: bool = True) -> "BotSession":
        return cls(ScriptedBackend(fixture, strict), fixture.model,
                   fixture.temperature)

    @classmethod
    def recording(cls, cfg: LlmConfig, role: str, capture_path: str | Path,
                  api_key: str | None = None) -> "BotSession":
        temp = cfg.temperature_for(role)
        live = LiveBackend(cfg, temp, api_key)
        return cls(RecordingBackend(live, capture_path), cfg.model, temp)

    def ensure_system(self, content: str):
        if not self.transcript.messages:
            self.transcript.append("system", content)
        elif self.transcript.messages[0].role != "system" \
                or self.transcript.messages[0].content != content:
            raise LlmError("session already primed with a different system message")

    def send(self, content: str) -> str:
        if not self.transcript.messages:
            raise LlmError("session has no system message; call ensure_system")
        self.transcript.append("user", content)
        try:
            reply = self.backend.complete(self.transcript)
        except LlmError:
            self.transcript.messages.pop()  # keep the transcript consistent
            raise
        self.transcript.append("assistant", reply)
        if isinstance(self.backend, RecordingBackend):
            save_transcript(self, self.backend.capture_path)
        return reply


# ---------------------------------------------------------------------------
# fixtures on disk: {"model": ..., "temperature": ..., "messages": [...]}

def save_transcript(session: BotSession, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "model": session.transcript.model,
        "temperature": session.transcript.temperature,
        "messages": [{"role": m.role, "content": m.content}
                     for m in session.transcript.messages],
    }
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_fixture(path: str | Path) -> ChatTranscript:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise MalformedFixture(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFixture(f"{path}: invalid JSON ({exc})") from exc
    return fixture_from_dict(doc, origin=str(path))


def fixture_from_dict(doc: dict, origin: str = "<dict>") -> ChatTranscript:
    if not isinstance(doc, dict) or "messages" not in doc \
            or "model" not in doc or "temperature" not in doc:
        raise MalformedFixture(f"{origin}: missing model/temperature/messages")
    transcript = ChatTranscript(model=str(doc["model"]),
                                temperature=float(doc["temperature"]))
    try:
        for msg in doc["messages"]:
            transcript.append(msg["role"], msg["content"])
    except (TypeError, KeyError, ValueError) as exc:
        raise MalformedFixture(f"{origin}: bad message list ({exc})") from exc
    return transcript


def scripted_fixture(system: str, exchanges: list[tuple[str, str]],
                     model: str = "scripted", temperature: float = 0.0) -> ChatTranscript:
    """Convenience builder: a system message plus (user, assistant) pairs."""
    t = ChatTranscript(model=model, temperature=temperature)
    t.append("system", system)
    for user, assistant in exchanges:
        t.append("user", user)
        t.append("assistant", assistant)
    return t
