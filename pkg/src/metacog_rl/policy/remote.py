"""Sample-only client for an OpenAI-compatible chat-completions endpoint."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import httpx

from metacog_rl.policy.base import Capabilities, PolicyBackend, TransportError
from metacog_rl.templates import RenderedPrompt
from metacog_rl.types import CompletionSample, Stage

logger = logging.getLogger(__name__)

API_KEY_ENV = "METACOG_API_KEY"
RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class RemoteBackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    max_concurrency: int = 8
    temperature: float = 1.0
    top_p: float = 1.0
    timeout: float = 60.0
    max_retries: int = 3
    max_tokens: int = 1024
    backoff: float = 0.5

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency: must be positive")
        if self.timeout <= 0:
            raise ValueError("timeout: must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries: must be nonnegative")


class RemoteBackend(PolicyBackend):
    """Each group is one request with ``n = group_size``.

    Transport errors and retriable HTTP statuses are retried with exponential
    backoff; once the budget is spent the group comes back as failed samples,
    which the rollout scores as wrong.
    """

    capabilities = Capabilities(can_sample=True, can_score=False, can_update=False)

    def __init__(self, config: RemoteBackendConfig, api_key: Optional[str] = None,
                 transport: Optional[httpx.BaseTransport] = None, sleep=time.sleep):
        super().__init__()
        self.config = config
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=config.endpoint.rstrip("/"), headers=headers,
                                    timeout=config.timeout, transport=transport)
        self._sleep = sleep
        self.failed_requests = 0

    def close(self) -> None:
        self._client.close()

    def request_body(self, prompt_text: str, group_size: int) -> dict:
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "n": group_size,
            "max_tokens": self.config.max_tokens,
        }

    def _post(self, body: dict) -> list[str]:
        try:
            resp = self._client.post("/chat/completions", json=body)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in RETRY_STATUS:
            raise TransportError(f"HTTP {resp.status_code}")
        resp.raise_for_status()
        choices = resp.json()["choices"]
        if not choices:
            raise TransportError("response carried no choices")
        return [c["message"]["content"] or "" for c in choices]

    def _complete(self, prompt_text: str, group_size: int) -> Optional[list[str]]:
        body = self.request_body(prompt_text, group_size)
        for attempt in range(self.config.max_retries + 1):
            try:
                texts = self._post(body)
            except TransportError as exc:
                logger.warning("chat completion attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.config.max_retries:
                    self._sleep(self.config.backoff * 2**attempt)
                continue
            except (httpx.HTTPStatusError, KeyError, TypeError, ValueError) as exc:
                logger.warning("chat completion rejected: %s", exc)
                break
            if len(texts) < group_size:
                # some servers ignore n; top up with further requests
                more = self._complete(prompt_text, group_size - len(texts))
                texts += more if more is not None else [None] * (group_size - len(texts))
            return texts[:group_size]
        self.failed_requests += 1
        return None

    def _samples(self, prompt: RenderedPrompt, texts: list) -> list[CompletionSample]:
        kind = Stage(prompt.kind)
        return [CompletionSample(stage=kind, problem=None, prompt=prompt.text, text=t or "", failed=t is None)
                for t in texts]

    def sample_group(self, prompt: RenderedPrompt, group_size: int) -> list[CompletionSample]:
        self._count(prompt, group_size)
        texts = self._complete(prompt.text, group_size)
        return self._samples(prompt, texts if texts is not None else [None] * group_size)

    def sample_groups(self, prompts: Sequence[RenderedPrompt], group_size: int) -> list[list[CompletionSample]]:
        for p in prompts:
            self._count(p, group_size)
        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            results = list(pool.map(lambda p: self._complete(p.text, group_size), prompts))
        return [self._samples(p, t if t is not None else [None] * group_size) for p, t in zip(prompts, results)]
