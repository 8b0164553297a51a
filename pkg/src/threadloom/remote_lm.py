"""Client for completion-style inference servers (vLLM, llama.cpp server, TGI...).

Scoring sends the text with ``echo=true, logprobs=1, max_tokens=0`` and reads
``choices[0].logprobs.token_logprobs``; most servers return ``null`` for the
first prompt token, which is skipped.  Generation sends a plain completion
request and returns ``choices[0].text``.

The bearer token comes from the ``THREADLOOM_API_TOKEN`` environment variable
only.
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections.abc import Callable
from dataclasses import dataclass

import httpx

from .errors import (
    EndpointStatusError,
    LogprobsUnsupportedError,
    NetworkError,
    PreconditionError,
)
from .lm_core import PerplexityScore

logger = logging.getLogger(__name__)

TOKEN_ENV = "THREADLOOM_API_TOKEN"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    auth_token: str | None = None
    timeout_ms: int = 30_000
    max_retries: int = 2
    backoff_ms: int = 250
    backoff_cap_ms: int = 4_000
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, base_url: str, model_name: str, **kwargs) -> "EndpointConfig":
        return cls(base_url=base_url, model_name=model_name, auth_token=os.environ.get(TOKEN_ENV), **kwargs)

    def backoff_s(self, attempt: int) -> float:
        return min(self.backoff_ms * 2**attempt, self.backoff_cap_ms) / 1000.0


class RemoteClient:
    """Thin retrying POST helper around an :class:`httpx.Client`.

    ``sleep`` is injectable so tests can observe backoff without waiting.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.sleep = sleep
        headers = {"Authorization": f"Bearer {cfg.auth_token}"} if cfg.auth_token else {}
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers=headers,
            timeout=cfg.timeout_ms / 1000.0,
            transport=transport,
        )
        self.attempts = 0  # total HTTP attempts, for diagnostics

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post_completion(self, body: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff_s(attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post("/completions", json=body)
            except httpx.TransportError as exc:
                logger.warning("event=remote_retry attempt=%d error=%s", attempt, type(exc).__name__)
                last_exc = NetworkError(f"request to {self.cfg.base_url} failed: {exc}")
                continue
            if resp.status_code >= 500:
                logger.warning("event=remote_retry attempt=%d status=%d", attempt, resp.status_code)
                last_exc = EndpointStatusError(resp.status_code, resp.text)
                continue
            if resp.status_code >= 400:
                raise EndpointStatusError(resp.status_code, resp.text)
            try:
                return resp.json()
            except ValueError as exc:
                raise EndpointStatusError(resp.status_code, "response is not JSON") from exc
        assert last_exc is not None
        raise last_exc


def _first_choice(payload: dict) -> dict:
    try:
        return payload["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise EndpointStatusError(200, "response has no choices") from exc


def perplexity_from_logprobs(token_logprobs: list) -> PerplexityScore:
    """``exp(-mean)`` over the returned log-probs, skipping a leading ``null``."""
    if token_logprobs and token_logprobs[0] is None:
        token_logprobs = token_logprobs[1:]
    if not token_logprobs or any(lp is None for lp in token_logprobs):
        raise LogprobsUnsupportedError("endpoint returned no usable prompt log-probabilities")
    values = [float(lp) for lp in token_logprobs]
    return PerplexityScore.from_log_prob(math.fsum(values), len(values))


def remote_perplexity(cfg: EndpointConfig, text: str, client: RemoteClient | None = None) -> PerplexityScore:
    own = client is None
    client = client or RemoteClient(cfg)
    try:
        payload = client.post_completion(
            {
                "model": cfg.model_name,
                "prompt": text,
                "max_tokens": 0,
                "temperature": 0.0,
                "logprobs": 1,
                "echo": True,
            }
        )
    finally:
        if own:
            client.close()
    logprobs = _first_choice(payload).get("logprobs")
    if not isinstance(logprobs, dict) or not isinstance(logprobs.get("token_logprobs"), list):
        raise LogprobsUnsupportedError("endpoint response lacks logprobs.token_logprobs")
    return perplexity_from_logprobs(logprobs["token_logprobs"])


def remote_generate(
    cfg: EndpointConfig,
    prompt: str,
    max_tokens: int,
    temperature: float,
    client: RemoteClient | None = None,
) -> str:
    if max_tokens < 1:
        raise PreconditionError("max_tokens must be >= 1")
    own = client is None
    client = client or RemoteClient(cfg)
    try:
        payload = client.post_completion(
            {"model": cfg.model_name, "prompt": prompt, "max_tokens": max_tokens, "temperature": temperature}
        )
    finally:
        if own:
            client.close()
    text = _first_choice(payload).get("text")
    if not isinstance(text, str):
        raise EndpointStatusError(200, "response choice has no text")
    return text


class RemoteScorer:
    """:class:`~threadloom.lm_core.LanguageModelScorer` over HTTP."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.cfg = cfg
        self.client = RemoteClient(cfg, transport=transport, sleep=sleep)

    def perplexity(self, text: str) -> PerplexityScore:
        return remote_perplexity(self.cfg, text, client=self.client)

    def generate(self, prompt: str, max_tokens: int) -> str:
        return remote_generate(self.cfg, prompt, max_tokens, self.cfg.temperature, client=self.client)

    def close(self) -> None:
        self.client.close()
