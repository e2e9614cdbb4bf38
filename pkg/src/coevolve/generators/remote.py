"""Client for a completions-style HTTP endpoint (generation and analysis only).

Request body: ``{model, prompt, max_tokens, temperature, top_p, stop, seed,
logprobs: 1}``. Response: ``choices[0]`` with ``text``, ``finish_reason``,
optional ``stop_reason`` and optional ``logprobs.{tokens, token_logprobs}``.
Servers strip the matched stop sequence; it is appended back so the rollout
engine sees the closing fence.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import httpx

from .base import Capabilities, Generation, Generator, GeneratorFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str = "http://127.0.0.1:8000/v1"
    model: str = "default"
    auth_env: Optional[str] = None  # name of the environment variable holding the API key
    temperature: float = 1.0
    top_p: float = 0.99
    timeout_s: float = 120.0
    retries: int = 2
    backoff_s: float = 0.5


class RemoteGenerator(Generator):
    capabilities = Capabilities(trainable=False, stop_sequences=True)

    def __init__(self, cfg: RemoteConfig = RemoteConfig(), client: Optional[httpx.Client] = None,
                 sleep=time.sleep):
        self.cfg = cfg
        headers = {}
        if cfg.auth_env:
            key = os.environ.get(cfg.auth_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=cfg.timeout_s, headers=headers)
        self.sleep = sleep

    def _post(self, body: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + "/completions"
        last = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self.client.post(url, json=body)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code >= 500:
                last = f"server error {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise GeneratorFailure(f"request rejected with {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise GeneratorFailure(f"malformed response: {exc}") from None
        raise GeneratorFailure(f"{last} after {self.cfg.retries} retries")

    def generate(self, context: str, stop: Sequence[str] = (), max_tokens: int = 1024,
                 seed: int = 0) -> Generation:
        body = {
            "model": self.cfg.model,
            "prompt": context,
            "max_tokens": max_tokens,
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "stop": list(stop),
            "seed": seed,
            "logprobs": 1,
        }
        data = self._post(body)
        try:
            choice = data["choices"][0]
            text = choice["text"]
        except (KeyError, IndexError, TypeError):
            raise GeneratorFailure("response has no choices[0].text") from None
        finish = choice.get("finish_reason") or "stop"
        lp = choice.get("logprobs") or {}
        tokens = lp.get("tokens")
        logprobs = lp.get("token_logprobs")
        if tokens is None or logprobs is None or "".join(tokens) != text:
            tokens, logprobs = [text] if text else [], None
        else:
            tokens, logprobs = list(tokens), [float(x) if x is not None else 0.0 for x in logprobs]
        marker = choice.get("stop_reason")
        if finish == "stop" and isinstance(marker, str) and marker in stop and not text.endswith(marker):
            tokens.append(marker)
            if logprobs is not None:
                logprobs.append(0.0)
        return Generation(tuple(tokens), None if logprobs is None else tuple(logprobs), finish)


def remote_generate(cfg: RemoteConfig, context: str, stop: Sequence[str], max_tokens: int = 1024,
                    seed: int = 0) -> Generation:
    return RemoteGenerator(cfg).generate(context, stop, max_tokens, seed)
