"""Chat-completion client with retry/backoff, plus deterministic offline fakes."""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Protocol

import httpx

log = logging.getLogger(__name__)

DEFAULT_AUTH_ENV = "BRIDGELM_API_KEY"
RETRY_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class ServiceError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class AuthError(ServiceError):
    """401/403 from the service. Never retried."""


class ResponseParseError(ServiceError):
    def __init__(self, message: str, payload: str, attempts: int = 1):
        super().__init__(message, attempts)
        self.payload = payload


class ClientConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    auth_env: str = DEFAULT_AUTH_ENV
    temperature: float = 0.7
    max_attempts: int = 3
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    timeout: float = 60.0
    parallelism: int = 4

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ClientConfigError("max_attempts must be >= 1")
        if self.parallelism < 1:
            raise ClientConfigError("parallelism must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "ClientConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ClientConfigError(f"unknown client config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def token(self) -> str:
        tok = os.environ.get(self.auth_env, "")
        if not tok:
            raise ClientConfigError(f"environment variable {self.auth_env} is not set")
        return tok


@dataclass
class Completion:
    text: str
    request_id: str | None = None
    usage: dict = field(default_factory=dict)
    attempts: int = 1


class ChatService(Protocol):
    def complete(self, messages: list[dict]) -> Completion: ...


def _backoff(cfg: ClientConfig, attempt: int) -> float:
    return min(cfg.backoff_max, cfg.backoff_base * 2 ** (attempt - 1))


def extract_content(payload) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ValueError("response lacks choices[0].message.content") from None
    if not isinstance(content, str):
        raise ValueError("message content is not a string")
    return content


class ChatClient:
    """POSTs role-tagged messages; retries 429/5xx and transport failures with exponential backoff."""

    def __init__(self, cfg: ClientConfig, token: str | None = None, http: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.token = token if token is not None else cfg.token()
        self.http = http or httpx.Client(timeout=cfg.timeout)
        self.sleep = sleep

    def close(self):
        self.http.close()

    def complete(self, messages: list[dict]) -> Completion:
        cfg = self.cfg
        body = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
        headers = {"Authorization": f"Bearer {self.token}"}
        last = None
        for attempt in range(1, cfg.max_attempts + 1):
            try:
                resp = self.http.post(cfg.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = ServiceError(f"transport error: {exc}", attempt)
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"authentication rejected ({resp.status_code})", attempt, resp.status_code)
                if resp.status_code in RETRY_STATUS:
                    last = ServiceError(f"service returned {resp.status_code}", attempt, resp.status_code)
                elif resp.status_code >= 400:
                    raise ServiceError(f"service returned {resp.status_code}: {resp.text[:200]}", attempt, resp.status_code)
                else:
                    try:
                        payload = resp.json()
                        text = extract_content(payload)
                    except ValueError as exc:
                        log.error("unparseable completion payload: %s", resp.text)
                        raise ResponseParseError(str(exc), resp.text, attempt) from None
                    return Completion(
                        text=text,
                        request_id=payload.get("id") or resp.headers.get("x-request-id"),
                        usage=payload.get("usage") or {},
                        attempts=attempt,
                    )
            if attempt < cfg.max_attempts:
                delay = _backoff(cfg, attempt)
                log.warning("%s; retrying in %.2fs (attempt %d/%d)", last, delay, attempt, cfg.max_attempts)
                self.sleep(delay)
        raise ServiceError(f"{last} after {cfg.max_attempts} attempts", cfg.max_attempts, last.status)


def complete_many(service: ChatService, jobs: Iterable[tuple[str, list[dict]]], parallelism: int = 4):
    """Yield (key, Completion | ServiceError) in completion order with at most ``parallelism`` in flight.

    AuthError is re-raised at once since every later call would fail the same way.
    """
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = {pool.submit(service.complete, msgs): key for key, msgs in jobs}
        for fut in as_completed(futures):
            key = futures[fut]
            try:
                yield key, fut.result()
            except AuthError:
                for f in futures:
                    f.cancel()
                raise
            except ServiceError as exc:
                yield key, exc


# ---------------------------------------------------------------------------
# offline fakes

_QA = re.compile(r"^Question: (.*?) Answer: (.*)$")


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    current = None
    for line in text.split("\n"):
        m = re.fullmatch(r"\[\s*([^\]]+?)\s*\]", line.strip())
        if m:
            current = m.group(1)
            out.setdefault(current, [])
        elif current is not None and line.strip():
            out[current].append(line)
    return out


class MockChatService:
    """Turns an amassment back into a dialogue, one round per statement and caption."""

    def __init__(self, max_rounds: int = 10):
        self.max_rounds = max_rounds
        self.calls = 0

    def complete(self, messages: list[dict]) -> Completion:
        self.calls += 1
        sec = _sections(messages[-1]["content"])
        rounds = []
        for line in sec.get("Image statements", []):
            m = _QA.match(line)
            if m:
                answer = m.group(2).strip()
                rounds.append((m.group(1).strip(), answer[:1].upper() + answer[1:] + ("" if answer.endswith(".") else ".")))
        captions = sec.get("Image description", [])
        if captions:
            rounds.insert(0, ("Can you describe the image?", captions[0].strip()))
        for r in sec.get("Image information", [])[:1]:
            rounds.append(("Is there anything else worth noting?", r.strip()))
        if not rounds:
            rounds.append(("What is shown in the image?", "I cannot tell from the information given."))
        text = "\n".join(f"Question: {q}\nAnswer: {a}" for q, a in rounds[: self.max_rounds])
        return Completion(text=text, request_id=f"mock-{self.calls}", usage={"total_tokens": 0})


_WORD = re.compile(r"[a-z0-9]+")


def _words(text: str) -> set[str]:
    return set(_WORD.findall(text.lower()))


class MockJudge:
    """Scores by word overlap between the response and the expected/human answers."""

    def __init__(self):
        self.calls = 0

    def complete(self, messages: list[dict]) -> Completion:
        self.calls += 1
        sec = _sections(messages[-1]["content"])
        response = _words(" ".join(sec.get("Assistant Response", [])))
        reference = _words(" ".join(sec.get("Expected Answer", [])))
        if not reference:
            reference = _words(" ".join(sec.get("Human Answers", [])))
        overlap = len(response & reference) / len(reference) if reference else 0.0
        score = 1 + round(4 * overlap)
        return Completion(
            text=f"{score}\nKeyword overlap with the expected answer is {overlap:.2f}.",
            request_id=f"judge-{self.calls}",
        )
