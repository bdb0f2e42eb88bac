"""Language-model and embedding access.

Everything above this module talks to two small interfaces: a chat backend
(messages in, text out) and an embedding backend (strings in, unit vectors
out). Two implementations of each exist: an HTTP client for OpenAI-style
endpoints, and fully deterministic mocks so the whole engine runs offline
and every test is reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BackendUnavailable, ContextTooLong, SchemaViolation

log = logging.getLogger(__name__)

ENV_LLM_ENDPOINT = "KDR_LLM_ENDPOINT"
ENV_LLM_API_KEY = "KDR_LLM_API_KEY"
ENV_LLM_MODEL = "KDR_LLM_MODEL"
ENV_EMBED_ENDPOINT = "KDR_EMBED_ENDPOINT"
ENV_EMBED_MODEL = "KDR_EMBED_MODEL"


@dataclass
class ChatMessage:
    role: str  # "system" | "user" | "assistant"
    content: str


@dataclass
class GenerationConfig:
    """Decoding parameters; temperature stays 0 so runs are repeatable."""

    temperature: float = 0.0
    max_tokens: int = 2048
    stop: list[str] = field(default_factory=list)


class Transcript:
    """Append-only JSONL log of every model exchange, including retries."""

    def __init__(self, path: str | None):
        self.path = path
        self._lock = threading.Lock()

    def record(self, kind: str, payload: dict) -> None:
        if not self.path:
            return
        row = {"kind": kind, "ts": time.time(), **payload}
        line = json.dumps(row, ensure_ascii=False, default=str)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


# -- chat backends --------------------------------------------------------------


class ChatBackend:
    def complete(self, messages: list[ChatMessage], config: GenerationConfig) -> str:
        raise NotImplementedError


@dataclass
class MockRule:
    match: str
    responses: list[str]
    regex: bool = False
    _cursor: int = 0

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.match, prompt) is not None
        return self.match in prompt

    def next_response(self) -> str:
        if not self.responses:
            return ""
        response = self.responses[min(self._cursor, len(self.responses) - 1)]
        self._cursor += 1
        return response


class MockChatBackend(ChatBackend):
    """Scripted chat model.

    Rules are checked in order against the concatenated prompt text; the
    first hit answers from its response queue (the last entry repeats once
    the queue runs dry). With no hit the default response is returned.
    """

    def __init__(self, rules: list[MockRule] | None = None, default_response: str = ""):
        self.rules = rules or []
        self.default_response = default_response
        self.calls: list[str] = []

    @classmethod
    def from_script(cls, document: dict) -> "MockChatBackend":
        if not isinstance(document, dict):
            raise SchemaViolation("mock script must be a JSON object")
        unknown = set(document) - {"rules", "default_response"}
        if unknown:
            raise SchemaViolation(f"unknown mock script keys: {sorted(unknown)}")
        rules = []
        for raw in document.get("rules", []):
            unknown = set(raw) - {"match", "regex", "responses"}
            if unknown:
                raise SchemaViolation(f"unknown mock rule keys: {sorted(unknown)}")
            if "match" not in raw or "responses" not in raw:
                raise SchemaViolation("mock rules need 'match' and 'responses'")
            rules.append(MockRule(
                match=raw["match"],
                responses=list(raw["responses"]),
                regex=bool(raw.get("regex", False)),
            ))
        return cls(rules, document.get("default_response", ""))

    @classmethod
    def from_script_file(cls, path: str) -> "MockChatBackend":
        with open(path, encoding="utf-8") as handle:
            return cls.from_script(json.load(handle))

    def complete(self, messages: list[ChatMessage], config: GenerationConfig) -> str:
        prompt = "\n".join(m.content for m in messages)
        self.calls.append(prompt)
        for rule in self.rules:
            if rule.matches(prompt):
                return rule.next_response()
        return self.default_response


class HttpChatBackend(ChatBackend):
    """OpenAI-compatible chat completion client with exponential backoff."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        max_retries: int = 3,
        post=None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_LLM_ENDPOINT, "")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_LLM_API_KEY, "")
        self.model = model or os.environ.get(ENV_LLM_MODEL, "")
        self.max_retries = max_retries
        self._post = post
        self._sleep = sleep
        if not self.endpoint:
            raise BackendUnavailable(
                f"no chat endpoint configured; set {ENV_LLM_ENDPOINT} or use a mock backend"
            )

    def _do_post(self, payload: dict) -> dict:
        if self._post is not None:
            return self._post(self.endpoint, payload)
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = requests.post(self.endpoint, json=payload, headers=headers, timeout=120)
        response.raise_for_status()
        return response.json()

    def complete(self, messages: list[ChatMessage], config: GenerationConfig) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if config.stop:
            payload["stop"] = config.stop
        delay = 1.0
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                body = self._do_post(payload)
                return body["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - every transport failure retries
                last_error = exc
                log.warning("chat backend attempt %d failed: %s", attempt + 1, exc)
                if attempt + 1 < self.max_retries:
                    self._sleep(delay)
                    delay *= 2
        raise BackendUnavailable(f"chat endpoint failed after {self.max_retries} attempts: {last_error}")


# -- embedding backends -----------------------------------------------------------


class EmbeddingBackend:
    dim: int = 0

    def embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class MockEmbeddingBackend(EmbeddingBackend):
    """Deterministic unit vectors seeded from a hash of each input string.

    Equal strings always embed identically; unrelated strings land nearly
    orthogonal once the dimension is reasonably large.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "big")
            rng = np.random.default_rng(seed)
            vec = rng.standard_normal(self.dim)
            out[i] = vec / np.linalg.norm(vec)
        return out


class HttpEmbeddingBackend(EmbeddingBackend):
    """OpenAI-compatible embeddings client; vectors are L2-normalized locally."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        max_retries: int = 3,
        post=None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_EMBED_ENDPOINT, "")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_LLM_API_KEY, "")
        self.model = model or os.environ.get(ENV_EMBED_MODEL, "")
        self.max_retries = max_retries
        self._post = post
        self._sleep = sleep
        if not self.endpoint:
            raise BackendUnavailable(
                f"no embedding endpoint configured; set {ENV_EMBED_ENDPOINT} or use a mock backend"
            )

    def _do_post(self, payload: dict) -> dict:
        if self._post is not None:
            return self._post(self.endpoint, payload)
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = requests.post(self.endpoint, json=payload, headers=headers, timeout=120)
        response.raise_for_status()
        return response.json()

    def embed(self, texts: list[str]) -> np.ndarray:
        payload = {"model": self.model, "input": texts}
        delay = 1.0
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                body = self._do_post(payload)
                rows = [item["embedding"] for item in body["data"]]
                matrix = np.asarray(rows, dtype=np.float64)
                norms = np.linalg.norm(matrix, axis=1, keepdims=True)
                norms[norms == 0] = 1.0
                return matrix / norms
            except Exception as exc:  # noqa: BLE001
                last_error = exc
                log.warning("embedding backend attempt %d failed: %s", attempt + 1, exc)
                if attempt + 1 < self.max_retries:
                    self._sleep(delay)
                    delay *= 2
        raise BackendUnavailable(
            f"embedding endpoint failed after {self.max_retries} attempts: {last_error}"
        )


# -- gateway ---------------------------------------------------------------------


class LlmGateway:
    """Front door for model calls: transcript logging plus prompt size guard."""

    def __init__(
        self,
        chat: ChatBackend,
        embedder: EmbeddingBackend | None = None,
        transcript: Transcript | None = None,
        max_prompt_chars: int | None = None,
    ):
        self.chat_backend = chat
        self.embedder = embedder
        self.transcript = transcript or Transcript(None)
        self.max_prompt_chars = max_prompt_chars

    def chat(
        self,
        messages: list[ChatMessage],
        config: GenerationConfig | None = None,
        tag: str = "",
    ) -> str:
        config = config or GenerationConfig()
        total = sum(len(m.content) for m in messages)
        if self.max_prompt_chars is not None and total > self.max_prompt_chars:
            raise ContextTooLong(f"prompt is {total} chars, limit {self.max_prompt_chars}")
        self.transcript.record("request", {
            "tag": tag,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": config.temperature,
        })
        try:
            response = self.chat_backend.complete(messages, config)
        except Exception as exc:
            self.transcript.record("error", {"tag": tag, "error": str(exc)})
            raise
        self.transcript.record("response", {"tag": tag, "content": response})
        return response

    def ask(self, prompt: str, system: str | None = None, tag: str = "") -> str:
        messages = []
        if system:
            messages.append(ChatMessage("system", system))
        messages.append(ChatMessage("user", prompt))
        return self.chat(messages, tag=tag)

    def embed(self, texts: list[str]) -> np.ndarray:
        if self.embedder is None:
            raise BackendUnavailable("no embedding backend configured")
        vectors = self.embedder.embed(texts)
        self.transcript.record("embed", {"count": len(texts)})
        return vectors


def mock_gateway(
    script: dict | None = None,
    default_response: str = "",
    transcript_path: str | None = None,
    dim: int = 64,
) -> LlmGateway:
    """Offline gateway wired to the deterministic mocks; test convenience."""
    chat = MockChatBackend.from_script(script) if script else MockChatBackend(
        default_response=default_response
    )
    return LlmGateway(
        chat,
        MockEmbeddingBackend(dim=dim),
        Transcript(transcript_path),
    )
