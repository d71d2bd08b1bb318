"""Client for OpenAI-compatible /v1/completions servers.

Completions are stateless, so retries are safe: transport failures and 5xx
responses get up to ``max_attempts`` tries with exponential backoff; client
errors fail immediately. Latency is measured wall-clock per request.
"""

from __future__ import annotations

import os
import time
from typing import Any

import requests

from ..core import END_THINK_MARKER, BackendProfile, UtilityScore
from ..prompts import VERIFY_PROMPT_V1, render_verification_prompt
from .base import (
    Backend,
    BackendMisbehavior,
    FinishReason,
    GenerationRequest,
    GenerationResult,
    TransportError,
    VerificationRequest,
    extract_score,
)

DEFAULT_API_KEY_ENV = "STEPSPEC_API_KEY"
TOP_LOGPROBS = 10


class OpenAICompletionsBackend(Backend):
    def __init__(
        self,
        base_url: str,
        model: str,
        profile: BackendProfile,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout_s: float = 120.0,
        max_attempts: int = 3,
        retry_backoff_s: float = 0.5,
        verification_template: str = VERIFY_PROMPT_V1,
        session: requests.Session | None = None,
    ) -> None:
        self.profile = profile
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.retry_backoff_s = retry_backoff_s
        self.verification_template = verification_template
        self._session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}/v1/completions"
        delay = self.retry_backoff_s
        last_error: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._session.post(
                    url, json=body, headers=self._headers(), timeout=self.timeout_s
                )
            except requests.RequestException as exc:
                last_error = TransportError(f"POST {url} failed: {exc}")
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise BackendMisbehavior(f"non-JSON response from {url}: {exc}")
                if 500 <= response.status_code < 600:
                    last_error = TransportError(
                        f"{url} returned HTTP {response.status_code}"
                    )
                else:
                    # Client errors are configuration problems; retrying cannot help.
                    raise TransportError(
                        f"{url} returned HTTP {response.status_code}: "
                        f"{response.text[:200]}"
                    )
            if attempt < self.max_attempts:
                time.sleep(delay)
                delay *= 2
        assert last_error is not None
        raise last_error

    def _completion_body(self, request: GenerationRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        if request.want_top_logprobs:
            body["logprobs"] = TOP_LOGPROBS
        if request.seed_hint is not None:
            body["seed"] = request.seed_hint
        return body

    @staticmethod
    def _first_position_logprobs(choice: dict[str, Any]) -> dict[str, float] | None:
        logprobs = choice.get("logprobs")
        if not logprobs:
            return None
        top = logprobs.get("top_logprobs")
        if not top:
            return None
        return dict(top[0])

    def generate_step(self, request: GenerationRequest) -> GenerationResult:
        if not request.prompt:
            raise ValueError("prompt must be non-empty")
        started = time.monotonic()
        payload = self._post(self._completion_body(request))
        elapsed = time.monotonic() - started

        try:
            choice = payload["choices"][0]
        except (KeyError, IndexError) as exc:
            raise BackendMisbehavior(f"response missing choices: {exc}")
        text = choice.get("text") or ""
        server_finish = choice.get("finish_reason") or "stop"
        usage = payload.get("usage") or {}
        token_count = usage.get("completion_tokens")
        if token_count is None:
            token_count = self.count_tokens(text)

        finish = FinishReason.LENGTH if server_finish == "length" else FinishReason.STOP
        if END_THINK_MARKER in text:
            text = text.split(END_THINK_MARKER, 1)[0]
            finish = FinishReason.END_THINK
            token_count = self.count_tokens(text)
        if not text and finish is FinishReason.STOP:
            raise BackendMisbehavior("server returned empty text with finish_reason stop")
        return GenerationResult(
            text=text,
            token_count=token_count,
            finish_reason=finish,
            top_logprobs=self._first_position_logprobs(choice),
            measured_latency_s=elapsed,
        )

    def score_step(self, request: VerificationRequest) -> UtilityScore:
        prompt = render_verification_prompt(
            request.problem,
            request.cot_prefix,
            request.candidate_step,
            template=self.verification_template,
        )
        # Verification is deterministic by construction: temperature 0, one token.
        body = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": TOP_LOGPROBS,
        }
        payload = self._post(body)
        try:
            choice = payload["choices"][0]
        except (KeyError, IndexError) as exc:
            raise BackendMisbehavior(f"response missing choices: {exc}")
        return extract_score(self._first_position_logprobs(choice), choice.get("text") or "")
