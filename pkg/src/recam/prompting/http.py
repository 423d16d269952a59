"""Scorer backend for OpenAI-compatible HTTP endpoints.

Every response is cached on disk under a hash of the request body, so an
evaluation can be rerun without sending any request twice.  Credentials
come from an environment variable and never enter the cache key.
"""

from __future__ import annotations

import os
import random
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import httpx

from ..errors import CapabilityError, ConfigurationError, TransportError
from .backends import ECHO, NEXT_TOKEN, EchoResult, NextTokenResult, ResponseCache, ScorerBackend, request_key
from .templates import DIGITS, SYSTEM_PROMPT

RETRY_STATUSES = frozenset({408, 409, 429, 500, 502, 503, 504})


@dataclass
class HttpLimits:
    max_in_flight: int = 4
    timeout: float = 30.0
    max_retries: int = 5
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    top_logprobs: int = 20

    def __post_init__(self):
        if self.max_in_flight < 1 or self.timeout <= 0 or self.max_retries < 0:
            raise ConfigurationError("invalid HTTP limits")


def chat_messages(prompt: str) -> list:
    """Send the fixed preamble as the system message when the prompt starts with it."""
    if prompt.startswith(SYSTEM_PROMPT):
        return [{"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt[len(SYSTEM_PROMPT):].lstrip("\n")}]
    return [{"role": "user", "content": prompt}]


def parse_chat_logprobs(payload: dict) -> NextTokenResult:
    """Digit log-probabilities from a one-token chat completion with ``top_logprobs``."""
    try:
        choice = payload["choices"][0]
    except (KeyError, IndexError, TypeError):
        raise TransportError("response has no choices") from None
    dist: Dict[str, float] = {}
    content = ((choice.get("logprobs") or {}).get("content")) or []
    if content:
        first = content[0]
        candidates = list(first.get("top_logprobs") or [])
        candidates.append({"token": first.get("token"), "logprob": first.get("logprob")})
        for cand in candidates:
            tok = (cand.get("token") or "").strip()
            lp = cand.get("logprob")
            if tok in DIGITS and lp is not None:
                dist[tok] = max(dist.get(tok, float("-inf")), float(lp))
    generated = (choice.get("message") or {}).get("content")
    return NextTokenResult(dist, generated, payload)


def parse_echo_logprobs(payload: dict) -> EchoResult:
    try:
        lp = payload["choices"][0]["logprobs"]
        return EchoResult(list(lp["tokens"]), list(lp["text_offset"]), list(lp["token_logprobs"]),
                          payload)
    except (KeyError, IndexError, TypeError):
        raise TransportError("response carries no echoed log-probabilities") from None


class HttpScorer(ScorerBackend):
    def __init__(self, endpoint: str, model: str, *, api_key_env: str = "OPENAI_API_KEY",
                 api_key: Optional[str] = None, limits: Optional[HttpLimits] = None,
                 cache_dir=None, supports_echo: bool = False,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep, seed: int = 0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.limits = limits or HttpLimits()
        self.identity = f"http:{self.endpoint}:{model}"
        self.capabilities = frozenset({NEXT_TOKEN, ECHO} if supports_echo else {NEXT_TOKEN})
        self.max_in_flight = self.limits.max_in_flight
        key = api_key if api_key is not None else os.environ.get(api_key_env)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(headers=headers, timeout=self.limits.timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(self.limits.max_in_flight)
        self._count_lock = threading.Lock()
        self._jitter = random.Random(seed)
        self._sleep = sleep
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.request_count = 0

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _backoff(self, attempt: int, retry_after: Optional[str]) -> float:
        if retry_after:
            try:
                return min(float(retry_after), self.limits.backoff_max)
            except ValueError:
                pass
        delay = self.limits.backoff_base * (2 ** attempt)
        return min(delay * (1.0 + 0.1 * self._jitter.random()), self.limits.backoff_max)

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.endpoint}{path}"
        key = request_key({"url": url, "body": body})
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        last: Optional[str] = None
        status = None
        attempts = 0
        for attempt in range(self.limits.max_retries + 1):
            attempts = attempt + 1
            with self._slots:
                with self._count_lock:
                    self.request_count += 1
                try:
                    resp = self._client.post(url, json=body)
                except httpx.TimeoutException as exc:
                    last, status, retry_after = f"timeout: {exc}", None, None
                except httpx.TransportError as exc:
                    last, status, retry_after = f"connection failed: {exc}", None, None
                else:
                    status = resp.status_code
                    if status in (401, 403):
                        raise TransportError(f"authentication failed ({status})", attempts=attempts,
                                             status=status)
                    if status < 400:
                        try:
                            payload = resp.json()
                        except ValueError:
                            raise TransportError("response is not JSON", attempts=attempts,
                                                 status=status) from None
                        if self.cache is not None:
                            self.cache.put(key, payload)
                        return payload
                    last = f"HTTP {status}: {resp.text[:200]}"
                    if status not in RETRY_STATUSES:
                        raise TransportError(last, attempts=attempts, status=status)
                    retry_after = resp.headers.get("Retry-After")
            if attempt < self.limits.max_retries:
                self._sleep(self._backoff(attempt, retry_after))
        raise TransportError(f"giving up after {attempts} attempts: {last}", attempts=attempts,
                             status=status)

    def next_token(self, prompt: str) -> NextTokenResult:
        body = {"model": self.model, "messages": chat_messages(prompt), "max_tokens": 1,
                "temperature": 0, "logprobs": True, "top_logprobs": self.limits.top_logprobs}
        return parse_chat_logprobs(self._post("/chat/completions", body))

    def echo_logprobs(self, text: str) -> EchoResult:
        if ECHO not in self.capabilities:
            raise CapabilityError(f"backend {self.identity!r} was not configured for echo")
        body = {"model": self.model, "prompt": text, "max_tokens": 0, "temperature": 0,
                "echo": True, "logprobs": 0}
        return parse_echo_logprobs(self._post("/completions", body))


def http_scorer(endpoint: str, credentials: str = "OPENAI_API_KEY", model_name: str = "gpt-4o-mini",
                limits: Optional[HttpLimits] = None, **kwargs) -> HttpScorer:
    """``credentials`` names the environment variable holding the API key."""
    return HttpScorer(endpoint, model_name, api_key_env=credentials, limits=limits, **kwargs)
