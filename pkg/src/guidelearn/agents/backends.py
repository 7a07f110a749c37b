"""Chat-completion backends: remote HTTP service, scripted fixture, plain callable."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    """Transport-level failure: the service could not be reached or refused the call."""


class ContentError(ValueError):
    """The backend answered, but the reply is unusable (empty, unparseable, no fixture match)."""


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"bad chat role {self.role!r}")
        if not self.content:
            raise ValueError("chat turn content must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


def user_turn(text: str) -> list[ChatTurn]:
    return [ChatTurn("user", text)]


def prompt_digest(turns: Sequence[ChatTurn]) -> str:
    payload = json.dumps([t.to_dict() for t in turns], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class AgentBackend(ABC):
    """One stateless completion per call; no dialogue history is kept."""

    @abstractmethod
    def complete(self, turns: Sequence[ChatTurn], temperature: float = 0.0, seed: int | None = None) -> str:
        ...

    def complete_n(self, turns: Sequence[ChatTurn], n: int, temperature: float, seed: int) -> list[str]:
        return [self.complete(turns, temperature, seed + i) for i in range(n)]


class FunctionBackend(AgentBackend):
    """Wraps ``fn(prompt_text, seed) -> reply``; the prompt is the concatenated turn contents."""

    def __init__(self, fn: Callable[[str, int | None], str]):
        self.fn = fn

    def complete(self, turns, temperature=0.0, seed=None):
        return self.fn("\n".join(t.content for t in turns), seed)


class ScriptedBackend(AgentBackend):
    """Replays fixture records; the first matching record wins.

    A record is ``{"match": {...}, "reply": str}`` or ``{"match": {...},
    "replies": [str, ...]}``; with a list the reply is chosen by
    ``seed % len(replies)``. Match keys: ``digest`` (sha256 of the turns),
    ``contains`` (all substrings present), ``absent`` (none present),
    ``default`` (always).
    """

    def __init__(self, records: Sequence[dict[str, Any]]):
        self.records = list(records)
        for i, rec in enumerate(self.records):
            if "reply" not in rec and not rec.get("replies"):
                raise ValueError(f"fixture record {i} has no reply")

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return cls(records)

    @staticmethod
    def _matches(match: dict[str, Any], text: str, digest: str) -> bool:
        if match.get("default"):
            return True
        if "digest" in match and match["digest"] != digest:
            return False
        contains = match.get("contains", [])
        if isinstance(contains, str):
            contains = [contains]
        if any(s not in text for s in contains):
            return False
        absent = match.get("absent", [])
        if isinstance(absent, str):
            absent = [absent]
        if any(s in text for s in absent):
            return False
        return bool({"digest", "contains", "absent"} & set(match))

    def complete(self, turns, temperature=0.0, seed=None):
        text = "\n".join(t.content for t in turns)
        digest = prompt_digest(turns)
        for rec in self.records:
            if self._matches(rec.get("match", {}), text, digest):
                if "replies" in rec:
                    replies = rec["replies"]
                    return replies[(seed or 0) % len(replies)]
                return rec["reply"]
        raise ContentError(f"no fixture record matches prompt {digest[:12]}")


class RemoteChatBackend(AgentBackend):
    """Chat-completion endpoint speaking ``{model, messages, temperature, n}``.

    Transport failures (connection errors, timeouts, HTTP 429/5xx) are
    retried with exponential backoff; each retry is logged. Malformed bodies
    are never retried.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "LLM_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_parallel: int = 4,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_parallel)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"credential variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def post_json(self, payload: dict[str, Any]) -> dict[str, Any]:
        headers = self._headers()
        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=payload, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise BackendError(f"HTTP {resp.status_code} from {self.endpoint}")
                if resp.status_code >= 400:
                    # client errors are not transient
                    raise ContentError(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ContentError(f"non-JSON body from {self.endpoint}") from exc
            except (httpx.TransportError, BackendError) as exc:
                if attempt >= self.max_retries:
                    raise BackendError(f"{self.endpoint}: giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff * (2 ** attempt)
                log.warning("retry %d/%d after transport error (%s); sleeping %.1fs",
                            attempt + 1, self.max_retries, exc, delay)
                self._sleep(delay)
                attempt += 1

    def _request(self, turns, temperature, seed, n):
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [t.to_dict() for t in turns],
            "temperature": temperature,
            "n": n,
        }
        if seed is not None:
            payload["seed"] = seed
        body = self.post_json(payload)
        try:
            texts = [c["message"]["content"] for c in body["choices"]]
        except (KeyError, TypeError) as exc:
            raise ContentError(f"malformed completion body: {str(body)[:200]}") from exc
        if len(texts) < n:
            raise ContentError(f"asked for {n} choices, got {len(texts)}")
        return texts

    def complete(self, turns, temperature=0.0, seed=None):
        return self._request(turns, temperature, seed, 1)[0]

    def complete_n(self, turns, n, temperature, seed):
        return self._request(turns, temperature, seed, n)
