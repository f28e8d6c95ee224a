"""Completion backends: remote chat service, replay cache, synthetic oracles.

Every backend exposes ``complete(transcript, params) -> CompletionResult``.
The synthetic backends close the loop for validation without a network: a
perfect memorizer (upper bound), a copy-last strategy (the trivial
baseline), a shape-preserving random generator (lower bound), and a noisy
memorizer for sensitivity checks. Record/replay pins remote responses so a
rerun reproduces every score bit-for-bit with zero network calls.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from hashlib import sha256
from pathlib import Path

import requests

from .ingest import DatasetFile
from .prompting import PromptTranscript
from .rng import SplitMix64, derive_seed

DEFAULT_TIMEOUT = 60.0
MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0

API_KEY_ENV = "TABAUDIT_API_KEY"
BASE_URL_ENV = "TABAUDIT_BASE_URL"

_NOISE_ALPHABET = "0123456789"


class CompletionError(Exception):
    pass


class NetworkError(CompletionError):
    """Connection failure or timeout."""


class RateLimited(CompletionError):
    """HTTP 429; retried with backoff."""


class ServiceError(CompletionError):
    """HTTP 5xx; retried with backoff."""


class AuthError(CompletionError):
    """HTTP 401/403; never retried."""


class CacheMiss(CompletionError):
    """Replay cache holds no record for the requested key."""


class PrefixNotFound(CompletionError):
    """The test prefix block does not occur in the memorizer's file."""


@dataclass(frozen=True)
class GenParams:
    model_id: str = "gpt-4"
    temperature: float = 0.0
    max_output_tokens: int = 256
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    backend_id: str
    cached: bool = False
    latency: float = 0.0
    token_usage: tuple[int, int] | None = None
    timestamp_utc: str = ""


def _now_utc() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def transcript_digest(transcript: PromptTranscript) -> str:
    """Content digest over the ordered (role, content) pairs."""
    payload = json.dumps(
        [[m.role, m.content] for m in transcript.messages],
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    )
    return sha256(payload.encode("utf-8")).hexdigest()


def cache_key(transcript: PromptTranscript, params: GenParams) -> str:
    """Stable digest identifying (transcript, decoding parameters).

    Pinned to a canonical JSON serialization hashed with SHA-256, so keys
    agree across runs and platforms.
    """
    payload = json.dumps(
        {
            "messages": [[m.role, m.content] for m in transcript.messages],
            "model": params.model_id,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        },
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    )
    return sha256(payload.encode("utf-8")).hexdigest()


def _final_prefix_lines(transcript: PromptTranscript) -> list[str]:
    last = transcript.messages[-1]
    if last.role != "user":
        raise CompletionError("transcript does not end with a user message")
    return last.content.split("\n")


class HttpChatBackend:
    """POSTs transcripts to an OpenAI-compatible chat-completions endpoint.

    Transient failures (rate limits, 5xx, connection errors) are retried
    with exponential backoff and full jitter; auth failures are not.
    """

    backend_id = "http"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        max_attempts: int = MAX_ATTEMPTS,
        backoff_base: float = BACKOFF_BASE,
        backoff_factor: float = BACKOFF_FACTOR,
        sleep=time.sleep,
        jitter_rng: random.Random | None = None,
        session: requests.Session | None = None,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or "").rstrip("/")
        if not self.base_url:
            raise ValueError(f"no base URL: pass base_url or set {BASE_URL_ENV}")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._jitter = jitter_rng or random.Random()
        self._session = session or requests.Session()

    def _request_once(self, body: dict, timeout: float) -> CompletionResult:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=body, headers=headers, timeout=timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise NetworkError(str(exc)) from exc
        latency = time.monotonic() - started
        if resp.status_code == 429:
            raise RateLimited(f"HTTP 429: {resp.text[:200]}")
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 500:
            raise ServiceError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise CompletionError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise ServiceError(f"malformed response body: {exc}") from exc
        if text is None:
            text = ""
        usage = data.get("usage") or {}
        token_usage = None
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            token_usage = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return CompletionResult(
            text=text,
            backend_id=self.backend_id,
            latency=latency,
            token_usage=token_usage,
            timestamp_utc=_now_utc(),
        )

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        body = {
            "model": params.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in transcript.messages],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        last_error: CompletionError | None = None
        for attempt in range(self.max_attempts):
            try:
                return self._request_once(body, params.timeout)
            except AuthError:
                raise
            except (RateLimited, ServiceError, NetworkError) as exc:
                last_error = exc
                if attempt + 1 >= self.max_attempts:
                    break
                # Full jitter: uniform over [0, base * factor^attempt].
                self._sleep(self._jitter.uniform(
                    0.0, self.backoff_base * self.backoff_factor ** attempt
                ))
        raise last_error


class CompletionCache:
    """Append-only JSON-lines store of completion records.

    One record per completion: key, transcript digest, model id, text,
    timestamp, token usage, and the producing backend. Writes are
    serialized; on load, the last record for a key wins.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def load(self) -> dict[str, dict]:
        if not self.path.exists():
            return {}
        records = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                records[record["key"]] = record
        return records


class RecordingBackend:
    """Wraps another backend and logs every completion to a cache file."""

    def __init__(self, inner, cache: CompletionCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        result = self.inner.complete(transcript, params)
        self.cache.append({
            "key": cache_key(transcript, params),
            "transcript_digest": transcript_digest(transcript),
            "model_id": params.model_id,
            "text": result.text,
            "timestamp": result.timestamp_utc,
            "token_usage": list(result.token_usage) if result.token_usage else None,
            "backend_id": result.backend_id,
        })
        return result


class ReplayBackend:
    """Serves completions from a recorded cache; never touches the network."""

    backend_id = "replay"

    def __init__(self, cache: CompletionCache | str | Path):
        if not isinstance(cache, CompletionCache):
            cache = CompletionCache(cache)
        self._records = cache.load()

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        key = cache_key(transcript, params)
        record = self._records.get(key)
        if record is None:
            raise CacheMiss(f"no cached completion for key {key}")
        usage = record.get("token_usage")
        return CompletionResult(
            text=record["text"],
            backend_id=record.get("backend_id", self.backend_id),
            cached=True,
            token_usage=tuple(usage) if usage else None,
            timestamp_utc=record.get("timestamp", ""),
        )


def _resolve_file(files: dict[str, DatasetFile], file_ref: str) -> DatasetFile:
    if file_ref in files:
        return files[file_ref]
    if len(files) == 1:
        return next(iter(files.values()))
    raise PrefixNotFound(f"no dataset file registered for {file_ref!r}")


def _as_file_map(files: DatasetFile | dict[str, DatasetFile]) -> dict[str, DatasetFile]:
    if isinstance(files, DatasetFile):
        return {files.source_name: files}
    return dict(files)


class MemorizerBackend:
    """Answers with the file's true next row: a perfect-memorization oracle.

    The final prefix block is located in the file by exact match; the row
    after its first occurrence is returned. On a file where every window is
    unique this scores 1.0 on every trial of its own plan.
    """

    backend_id = "memorizer"

    def __init__(self, files: DatasetFile | dict[str, DatasetFile]):
        self._files = _as_file_map(files)
        self._first_row_index: dict[str, dict[str, list[int]]] = {}

    def _positions(self, file: DatasetFile, first_row: str) -> list[int]:
        index = self._first_row_index.setdefault(file.source_name, {})
        if not index:
            for i, row in enumerate(file.rows):
                index.setdefault(row, []).append(i)
        return index.get(first_row, [])

    def lookup_next_row(self, file: DatasetFile, prefix_lines: list[str]) -> str:
        k = len(prefix_lines)
        for start in self._positions(file, prefix_lines[0]):
            if start + k >= file.row_count:
                continue
            if file.rows[start:start + k] == prefix_lines:
                return file.rows[start + k]
        raise PrefixNotFound(
            f"{file.source_name}: prefix block of {k} rows not found"
        )

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        file = _resolve_file(self._files, transcript.file_ref)
        text = self.lookup_next_row(file, _final_prefix_lines(transcript))
        return CompletionResult(text=text, backend_id=self.backend_id,
                                timestamp_utc=_now_utc())


class CopyLastBackend:
    """Returns the final prefix row unchanged: the trivial copy strategy."""

    backend_id = "copy"

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        return CompletionResult(
            text=_final_prefix_lines(transcript)[-1],
            backend_id=self.backend_id,
            timestamp_utc=_now_utc(),
        )


class RandomBackend:
    """Emits a row with the prefix's cell shape but uniformly random digits.

    Keeps the delimiter structure (so the output is a plausible row of the
    right cell count) while destroying every value; serves as the
    no-knowledge floor. Deterministic given (seed, transcript).
    """

    backend_id = "random"

    def __init__(self, seed: int, delimiter: str | None = None):
        self.seed = seed
        self.delimiter = delimiter

    @staticmethod
    def _guess_delimiter(row: str) -> str:
        best, best_count = ",", 1
        for candidate in (",", "\t", ";", " "):
            count = len(row.split(candidate))
            if count > best_count:
                best, best_count = candidate, count
        return best

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        last_row = _final_prefix_lines(transcript)[-1]
        delimiter = self.delimiter or self._guess_delimiter(last_row)
        rng = SplitMix64(derive_seed(self.seed, "random", transcript_digest(transcript)))
        cells = [
            "".join(_NOISE_ALPHABET[rng.randrange(10)] for _ in cell) or "0"
            for cell in last_row.split(delimiter)
        ]
        return CompletionResult(
            text=delimiter.join(cells),
            backend_id=self.backend_id,
            timestamp_utc=_now_utc(),
        )


class NoisyMemorizerBackend:
    """Memorizer output with independent per-character corruption.

    Each character is substituted with probability ``p`` by a digit that
    differs from it, so p=0 reproduces the memorizer exactly and p=1
    guarantees zero positional matches.
    """

    backend_id = "noisy"

    def __init__(self, files: DatasetFile | dict[str, DatasetFile], p: float, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        self._memorizer = MemorizerBackend(files)
        self.p = p
        self.seed = seed

    def complete(self, transcript: PromptTranscript, params: GenParams) -> CompletionResult:
        true_row = self._memorizer.complete(transcript, params).text
        rng = SplitMix64(derive_seed(self.seed, "noise", transcript_digest(transcript)))
        out = []
        for ch in true_row:
            if self.p > 0.0 and rng.uniform() < self.p:
                choices = _NOISE_ALPHABET.replace(ch, "")
                out.append(choices[rng.randrange(len(choices))])
            else:
                out.append(ch)
        return CompletionResult(
            text="".join(out),
            backend_id=self.backend_id,
            timestamp_utc=_now_utc(),
        )
