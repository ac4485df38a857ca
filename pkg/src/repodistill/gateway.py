"""Uniform interface to text-completion providers.

Every LLM step in the pipeline goes through :class:`LlmGateway`, which owns
retry handling, exact cost accounting, and the per-repository budget gate.
Backends are pluggable; the :class:`ReplayBackend` answers from a recorded
transcript and is what the whole test suite (and any offline run) uses.

Costs are tracked as exact rationals (`fractions.Fraction`) so that ledger
totals never drift, and are only rounded when rendered for reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol

from .errors import (
    BudgetExceeded,
    PriceTableError,
    ReplayMiss,
    TranscriptParseError,
    TransportError,
)

logger = logging.getLogger(__name__)

ROLE_TAGS = ("purpose", "classify", "generate", "judge", "reflect", "ab_judge")

TOKENS_PER_MILLION = 1_000_000


@dataclass(frozen=True)
class PromptRequest:
    """One prompt headed for a completion provider."""

    role_tag: str
    system_text: str
    user_text: str
    model_id: str
    max_output_tokens: int = 4096
    temperature: float = 0.2

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role_tag: {self.role_tag!r}")
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class Completion:
    """Provider response plus exact accounting for the call."""

    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: float
    provider_cost: Fraction


@dataclass(frozen=True)
class LedgerEntry:
    role_tag: str
    model_id: str
    input_tokens: int
    output_tokens: int
    cost: Fraction


class CostLedger:
    """Append-only cost record for one distillation.

    Single-writer by contract: one ledger belongs to one repo worker. Once a
    call trips the cap the ledger is marked exhausted and every later call
    fails, so a distillation cannot leak past its budget.
    """

    def __init__(self, cost_cap: Fraction | None = None):
        self.cost_cap = cost_cap
        self.entries: list[LedgerEntry] = []
        self.exhausted = False

    @property
    def total(self) -> Fraction:
        return sum((entry.cost for entry in self.entries), Fraction(0))

    def charge(self, entry: LedgerEntry) -> None:
        if self.exhausted:
            raise BudgetExceeded("cost ledger already exhausted")
        if self.cost_cap is not None and self.total + entry.cost > self.cost_cap:
            self.exhausted = True
            raise BudgetExceeded(
                f"call costing {format_usd(entry.cost)} USD would cross the "
                f"{format_usd(self.cost_cap)} USD cap"
            )
        self.entries.append(entry)


def ledger_total(ledger: CostLedger) -> Fraction:
    """Exact sum of all entry costs."""
    return ledger.total


def format_usd(amount: Fraction) -> str:
    """Render an exact USD amount to two decimals (reports only)."""
    cents = round(amount * 100)
    return f"{cents / 100:.2f}"


def as_usd(value: int | float | str | Fraction) -> Fraction:
    """Interpret a config value as an exact decimal USD amount."""
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


class PriceTable:
    """Per-million-token prices keyed by model id."""

    def __init__(self, prices: dict[str, tuple[Fraction, Fraction]]):
        self._prices = prices

    @classmethod
    def from_mapping(cls, raw: dict) -> "PriceTable":
        prices = {}
        for model_id, pair in raw.items():
            if isinstance(pair, dict):
                pair = (pair["input"], pair["output"])
            if len(pair) != 2:
                raise PriceTableError(f"price entry for {model_id!r} must be a pair")
            prices[model_id] = (as_usd(pair[0]), as_usd(pair[1]))
        return cls(prices)

    @classmethod
    def from_file(cls, path: str | Path) -> "PriceTable":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PriceTableError(f"cannot load price table {path}: {exc}") from exc
        return cls.from_mapping(raw)

    def cost(self, model_id: str, input_tokens: int, output_tokens: int) -> Fraction:
        try:
            input_price, output_price = self._prices[model_id]
        except KeyError:
            raise PriceTableError(f"no prices configured for model {model_id!r}") from None
        return (
            Fraction(input_tokens) * input_price / TOKENS_PER_MILLION
            + Fraction(output_tokens) * output_price / TOKENS_PER_MILLION
        )


@dataclass(frozen=True)
class RawResponse:
    """What a backend hands back before accounting."""

    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: float = 0.0


class CompletionBackend(Protocol):
    def send(self, request: PromptRequest) -> RawResponse: ...


def request_fingerprint(request: PromptRequest) -> str:
    """Stable hash identifying a request for record/replay.

    Deliberately excludes temperature and max_output_tokens so recorded
    transcripts stay valid while those knobs are tuned.
    """
    payload = json.dumps(
        [request.role_tag, request.system_text, request.user_text, request.model_id],
        ensure_ascii=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ReplayBackend:
    """Answers requests from a recorded transcript, by fingerprint.

    Repeated occurrences of the same fingerprint are replayed in recorded
    order; once a fingerprint's queue is drained the last response repeats,
    which keeps replay working for loops that re-issue identical prompts.
    """

    def __init__(self, responses: dict[str, list[RawResponse]]):
        self._queues = {fp: deque(items) for fp, items in responses.items()}
        self._last = {fp: items[-1] for fp, items in responses.items() if items}
        self._lock = threading.Lock()

    def send(self, request: PromptRequest) -> RawResponse:
        fingerprint = request_fingerprint(request)
        with self._lock:
            queue = self._queues.get(fingerprint)
            if queue is None:
                raise ReplayMiss(f"no recorded response for fingerprint {fingerprint[:12]}")
            if queue:
                return queue.popleft()
            return self._last[fingerprint]


def replay_store(transcript_path: str | Path) -> ReplayBackend:
    """Load a line-delimited transcript file into a replay backend."""
    path = Path(transcript_path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise TranscriptParseError(f"cannot read transcript {path}: {exc}") from exc
    responses: dict[str, list[RawResponse]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            response = RawResponse(
                text=record["response_text"],
                input_tokens=int(record["input_tokens"]),
                output_tokens=int(record["output_tokens"]),
            )
            fingerprint = record["fingerprint"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TranscriptParseError(f"{path}:{lineno}: bad transcript record: {exc}") from exc
        responses.setdefault(fingerprint, []).append(response)
    return ReplayBackend(responses)


class RecordingBackend:
    """Wraps another backend and appends every exchange to a transcript."""

    def __init__(self, inner: CompletionBackend, transcript_path: str | Path):
        self._inner = inner
        self._path = Path(transcript_path)
        self._lock = threading.Lock()
        self._path.parent.mkdir(parents=True, exist_ok=True)

    def send(self, request: PromptRequest) -> RawResponse:
        response = self._inner.send(request)
        record = {
            "fingerprint": request_fingerprint(request),
            "response_text": response.text,
            "input_tokens": response.input_tokens,
            "output_tokens": response.output_tokens,
        }
        with self._lock:
            with self._path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, ensure_ascii=True) + "\n")
        return response


class ScriptedBackend:
    """Deterministic backend driven by a plain function.

    Used to script LLM behavior in tests and to produce transcripts via
    :class:`RecordingBackend` without touching a live provider. Token counts
    are derived from text lengths so replayed costs are reproducible.
    """

    def __init__(self, script: Callable[[PromptRequest], str]):
        self._script = script

    def send(self, request: PromptRequest) -> RawResponse:
        text = self._script(request)
        return RawResponse(
            text=text,
            input_tokens=(len(request.system_text) + len(request.user_text)) // 4,
            output_tokens=max(1, len(text) // 4),
        )


class HttpBackend:
    """Minimal OpenAI-compatible chat-completions client.

    Credentials come from an environment variable and are never logged.
    """

    def __init__(
        self,
        base_url: str,
        *,
        api_key_env: str = "REPODISTILL_API_KEY",
        timeout: float = 120.0,
        session=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def send(self, request: PromptRequest) -> RawResponse:
        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise TransportError(
                f"no credentials in ${self.api_key_env}", retryable=False
            )
        payload = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }
        started = time.monotonic()
        try:
            http_response = self._session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except Exception as exc:
            raise TransportError(f"provider request failed: {exc}") from exc
        latency_ms = (time.monotonic() - started) * 1000.0
        if http_response.status_code in (408, 429) or http_response.status_code >= 500:
            raise TransportError(f"provider returned HTTP {http_response.status_code}")
        if http_response.status_code != 200:
            raise TransportError(
                f"provider returned HTTP {http_response.status_code}", retryable=False
            )
        try:
            body = http_response.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unparseable provider response: {exc}", retryable=False)
        return RawResponse(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=latency_ms,
        )


class LlmGateway:
    """Completion front door with retries, pricing, and the budget gate.

    The backend may be shared across concurrent repo workers; each worker
    builds its own gateway around a private :class:`CostLedger`.
    """

    def __init__(
        self,
        backend: CompletionBackend,
        prices: PriceTable,
        *,
        ledger: CostLedger | None = None,
        max_retries: int = 2,
        backoff_base: float = 0.25,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.prices = prices
        self.ledger = ledger if ledger is not None else CostLedger()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep

    def complete(self, request: PromptRequest) -> Completion:
        if self.ledger.exhausted:
            raise BudgetExceeded("cost ledger already exhausted")
        response = self._send_with_retries(request)
        cost = self.prices.cost(request.model_id, response.input_tokens, response.output_tokens)
        entry = LedgerEntry(
            role_tag=request.role_tag,
            model_id=request.model_id,
            input_tokens=response.input_tokens,
            output_tokens=response.output_tokens,
            cost=cost,
        )
        self.ledger.charge(entry)
        return Completion(
            text=response.text,
            input_tokens=response.input_tokens,
            output_tokens=response.output_tokens,
            latency_ms=response.latency_ms,
            provider_cost=cost,
        )

    def _send_with_retries(self, request: PromptRequest) -> RawResponse:
        attempt = 0
        while True:
            try:
                return self.backend.send(request)
            except TransportError as exc:
                if not exc.retryable or attempt >= self.max_retries:
                    raise
                delay = self.backoff_base * (2**attempt)
                logger.warning(
                    "transient transport failure (attempt %d/%d), retrying in %.2fs: %s",
                    attempt + 1,
                    self.max_retries,
                    delay,
                    exc,
                )
                self._sleep(delay)
                attempt += 1
