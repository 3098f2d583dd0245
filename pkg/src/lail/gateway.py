"""Uniform access to three LLM capabilities: scoring a continuation's token
log-probabilities, sampling completions, and embedding text.

Providers:
  * HttpProvider      OpenAI-compatible /completions and /embeddings protocol,
                      with bounded concurrency and exponential-backoff retries.
  * MockScorer        deterministic preference signal for offline tests.
  * MockGenerator     deterministic completion source for offline tests.
  * HashEmbedder      dependency-free feature-hashing embedder.

All mock providers are pure functions of their inputs (and, for the
generator, an optionally configured pool), so repeated calls are identical.
"""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import requests

from .corpus import Example
from .lexical import token_jaccard, tokenize
from .prompts import PromptParseError, parse_prompt
from .util import fnv1a64

logger = logging.getLogger(__name__)

MOCK_SCORE_EPSILON = 0.01
PROVIDER_KINDS = ("http", "mock_scorer", "mock_generator", "hash_embedder")


class GatewayError(Exception):
    """Base class for provider failures."""


class TransportError(GatewayError):
    """Request could not be completed after the configured retries."""


class ProviderResponseError(GatewayError):
    """The provider answered, but not in the documented shape."""


class CapabilityError(GatewayError):
    """The provider lacks a required capability (e.g. echo logprobs)."""


class TruncationError(ProviderResponseError):
    """The provider truncated the text being scored instead of echoing it."""


@dataclass(frozen=True)
class ScoreResult:
    """Per-token natural-log probabilities of a scored continuation."""

    token_logprobs: tuple[float, ...]
    token_count: int

    def __post_init__(self) -> None:
        if self.token_count != len(self.token_logprobs):
            raise ValueError("token_count must equal len(token_logprobs)")
        if self.token_count < 1:
            raise ValueError("a score result needs at least one token")
        for lp in self.token_logprobs:
            if not math.isfinite(lp) or lp > 0.0:
                raise ValueError(f"token logprobs must be finite and <= 0, got {lp}")

    @property
    def mean_logprob(self) -> float:
        return sum(self.token_logprobs) / self.token_count


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.8
    top_p: float = 0.95
    max_tokens: int = 500
    n_samples: int = 5
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5


@dataclass(frozen=True)
class ProviderConfig:
    kind: str
    endpoint: str | None = None
    model_name: str | None = None
    auth_token_env: str | None = None
    timeout: float = 30.0
    max_concurrent_requests: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    dim: int = 256  # hash_embedder bucket count; ignored by other kinds

    def __post_init__(self) -> None:
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}; expected one of {PROVIDER_KINDS}")
        if self.kind == "http" and (not self.endpoint or not self.model_name):
            raise ValueError("http provider requires endpoint and model_name")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")


class Scorer(Protocol):
    def score_continuation(self, prompt: str, continuation: str) -> ScoreResult: ...


class Generator(Protocol):
    def generate(self, prompt: str, params: GenerationParams) -> list[str]: ...


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


def _shot_codes(prompt: str) -> list[tuple[str, str]]:
    """(requirement, code) shots of a rendered prompt; [] if not template text."""
    try:
        shots, _ = parse_prompt(prompt)
    except PromptParseError:
        return []
    return shots


class MockScorer:
    """Scores a continuation as one pseudo-token.

    logprob = ln(eps + (1 - eps) * J) where J is the token-set Jaccard between
    the code of the prompt's last shot and the continuation. Requirements in
    the prompt are deliberately ignored, so lexical requirement similarity and
    this oracle's preference can be decorrelated in tests. A prompt with no
    shots (zero-shot) contributes an empty code, hence J = 0.
    """

    def score_continuation(self, prompt: str, continuation: str) -> ScoreResult:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        shots = _shot_codes(prompt)
        candidate_code = shots[-1][1] if shots else ""
        j = token_jaccard(candidate_code, continuation)
        logprob = math.log(MOCK_SCORE_EPSILON + (1.0 - MOCK_SCORE_EPSILON) * j)
        return ScoreResult(token_logprobs=(logprob,), token_count=1)


class MockGenerator:
    """Returns, for every sample, the code of the candidate whose requirement
    has the highest token-Jaccard with the last requirement in the prompt.

    Candidates are the configured pool when one is given; otherwise they are
    the prompt's own shots, which makes generation quality track selection
    quality the way in-context learning does. No candidates at all yields
    empty completions.
    """

    def __init__(self, pool: Sequence[Example] | None = None):
        self._pool = list(pool) if pool is not None else None

    def generate(self, prompt: str, params: GenerationParams) -> list[str]:
        try:
            shots, test_requirement = parse_prompt(prompt)
        except PromptParseError:
            shots, test_requirement = [], prompt
        if self._pool is not None:
            candidates = [(ex.requirement, ex.code, ex.id) for ex in self._pool]
        else:
            candidates = [(req, code, f"{i:08d}") for i, (req, code) in enumerate(shots)]
        if not candidates:
            return [""] * params.n_samples
        best = min(candidates, key=lambda c: (-token_jaccard(c[0], test_requirement), c[2]))
        code = best[1]
        tokens = code.split()
        if len(tokens) > params.max_tokens:
            code = " ".join(tokens[: params.max_tokens])
        return [code] * params.n_samples


class HashEmbedder:
    """Feature-hashing embedder: signed token counts in `dim` buckets.

    Bucket = FNV-1a-64(token) mod dim; sign is +1 when the hash's top bit is
    clear, else -1. The result is L2-normalized unless it is all-zero (empty
    or collision-cancelled input), which is returned as-is and logged.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            h = fnv1a64(token.encode("utf-8"))
            sign = 1.0 if (h >> 63) == 0 else -1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            logger.debug("hash_embedder: non-normalizable (all-zero) vector for %r", text[:40])
            return vec
        return vec / norm

    def fingerprint(self) -> str:
        return f"hash_embedder:fnv1a64:{self.dim}"


class HttpProvider:
    """OpenAI-compatible completion/embedding client.

    Scoring uses the echo-logprobs pattern: the prompt and continuation are
    sent as one completion prompt with `echo` on and zero sampled tokens, and
    the continuation's token span is located via `text_offset`. At most
    `max_concurrent_requests` calls are in flight at a time.
    """

    def __init__(self, config: ProviderConfig, session: requests.Session | None = None):
        if config.kind != "http":
            raise ValueError("HttpProvider requires a config with kind='http'")
        self.config = config
        self._session = session or requests.Session()
        self._gate = threading.BoundedSemaphore(config.max_concurrent_requests)
        self._embed_dim: int | None = None

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_token_env:
            token = os.environ.get(self.config.auth_token_env, "")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        retry = self.config.retry
        last_error = "no attempts made"
        for attempt in range(retry.max_attempts):
            if attempt:
                time.sleep(retry.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    response = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=self.config.timeout
                    )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code // 100 == 2:
                try:
                    body = response.json()
                except ValueError as exc:
                    raise ProviderResponseError(f"{url}: response is not JSON: {exc}") from exc
                if not isinstance(body, dict):
                    raise ProviderResponseError(f"{url}: expected a JSON object response")
                return body
            last_error = f"HTTP {response.status_code}: {response.text[:500]}"
        raise TransportError(f"{url}: giving up after {retry.max_attempts} attempt(s); last: {last_error}")

    @staticmethod
    def _choice(body: dict) -> dict:
        choices = body.get("choices")
        if not isinstance(choices, list) or not choices or not isinstance(choices[0], dict):
            raise ProviderResponseError("response lacks choices[0]")
        return choices[0]

    def score_continuation(self, prompt: str, continuation: str) -> ScoreResult:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        full_text = prompt + continuation
        body = self._post(
            "/completions",
            {
                "model": self.config.model_name,
                "prompt": full_text,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
            },
        )
        choice = self._choice(body)
        logprobs = choice.get("logprobs")
        if not isinstance(logprobs, dict):
            raise CapabilityError("provider did not return logprobs; echo-logprobs scoring unsupported")
        token_logprobs = logprobs.get("token_logprobs")
        text_offset = logprobs.get("text_offset")
        if not isinstance(token_logprobs, list) or not isinstance(text_offset, list):
            raise ProviderResponseError("logprobs lack token_logprobs/text_offset arrays")
        if len(token_logprobs) != len(text_offset):
            raise ProviderResponseError("token_logprobs and text_offset lengths differ")
        echoed = choice.get("text")
        if isinstance(echoed, str) and echoed != full_text:
            raise TruncationError(
                f"provider echoed {len(echoed)} of {len(full_text)} characters; continuation truncated"
            )
        span = [lp for lp, offset in zip(token_logprobs, text_offset) if offset >= len(prompt)]
        if not span:
            raise ProviderResponseError("no tokens found in the continuation span")
        if any(lp is None for lp in span):
            raise ProviderResponseError("null logprob inside the continuation span")
        try:
            return ScoreResult(token_logprobs=tuple(float(lp) for lp in span), token_count=len(span))
        except ValueError as exc:
            raise ProviderResponseError(f"invalid continuation logprobs: {exc}") from exc

    def generate(self, prompt: str, params: GenerationParams) -> list[str]:
        body = self._post(
            "/completions",
            {
                "model": self.config.model_name,
                "prompt": prompt,
                "max_tokens": params.max_tokens,
                "temperature": params.temperature,
                "top_p": params.top_p,
                "n": params.n_samples,
            },
        )
        choices = body.get("choices")
        if not isinstance(choices, list):
            raise ProviderResponseError("response lacks a choices array")
        texts: list[str] = []
        for choice in choices:
            if not isinstance(choice, dict) or not isinstance(choice.get("text"), str):
                raise ProviderResponseError("choice lacks a text field")
            texts.append(choice["text"])
        if len(texts) != params.n_samples:
            raise ProviderResponseError(f"expected {params.n_samples} completions, got {len(texts)}")
        return texts

    def embed(self, text: str) -> np.ndarray:
        body = self._post("/embeddings", {"model": self.config.model_name, "input": text})
        data = body.get("data")
        if not isinstance(data, list) or not data or not isinstance(data[0], dict):
            raise ProviderResponseError("embedding response lacks data[0]")
        embedding = data[0].get("embedding")
        if not isinstance(embedding, list) or not embedding:
            raise ProviderResponseError("embedding response lacks data[0].embedding")
        vec = np.asarray(embedding, dtype=np.float64)
        if self._embed_dim is None:
            self._embed_dim = vec.shape[0]
        elif vec.shape[0] != self._embed_dim:
            raise ProviderResponseError(
                f"embedding dimension changed from {self._embed_dim} to {vec.shape[0]}"
            )
        return vec

    def fingerprint(self) -> str:
        if self._embed_dim is None:
            self.embed("dimension probe")
        return f"http:{self.config.model_name}:{self._embed_dim}"


def build_provider(config: ProviderConfig, pool: Sequence[Example] | None = None):
    """Instantiate the provider named by `config.kind`.

    `pool` configures the mock generator's candidate set; passing None leaves
    it shot-driven (it answers from the prompt's own in-context examples).
    """
    if config.kind == "http":
        return HttpProvider(config)
    if config.kind == "mock_scorer":
        return MockScorer()
    if config.kind == "mock_generator":
        return MockGenerator(pool=pool)
    if config.kind == "hash_embedder":
        return HashEmbedder(dim=config.dim)
    raise ValueError(f"unknown provider kind {config.kind!r}")
