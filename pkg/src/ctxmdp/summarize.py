"""Budgeted summarizers, summary-entropy estimation, and the external bridge.

Built-in summarizers are extractive and pure: they select tokens from the
raw signal under the active token cap. The External variant delegates to an
out-of-process summarizer over newline-delimited JSON (child process stdio
or a TCP socket) and falls back to truncation on transport failure.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import selectors
import socket
import subprocess
from collections import Counter, deque
from dataclasses import dataclass

from .core import BudgetSpec, ContextSummary, ExogenousSignal, HistoryBuffer, MetaAction, Token

log = logging.getLogger(__name__)

DEFAULT_ENTROPY_WINDOW = 256
DEFAULT_TIMEOUT_MS = 2000.0


# ---------------------------------------------------------------------------
# Summarizer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Truncate:
    """Keep the first tokens of the signal, up to the cap."""


@dataclass(frozen=True)
class TopFrequency:
    """Keep the most frequent distinct tokens; ties broken by first occurrence."""


@dataclass(frozen=True)
class RelevanceExtract:
    """Keep the highest-scoring distinct tokens.

    Tokens missing from ``scores`` default to 0. Tokens with non-positive
    relevance are treated as noise and never retained, so a summary holds
    only what the score table marks as decision-relevant.
    """

    scores: tuple[tuple[Token, float], ...]

    def __post_init__(self):
        for tok, s in self.scores:
            if not math.isfinite(s):
                raise ValueError(f"relevance score for token {tok} must be finite")

    @classmethod
    def from_dict(cls, scores: dict[Token, float]) -> "RelevanceExtract":
        return cls(tuple(sorted(scores.items())))

    def score_of(self, tok: Token) -> float:
        for t, s in self.scores:
            if t == tok:
                return s
        return 0.0


@dataclass(frozen=True)
class External:
    """Delegate summarization to an external endpoint (LLM stand-in)."""

    endpoint: "ExternalEndpoint"


SummarizerSpec = Truncate | TopFrequency | RelevanceExtract | External


class SummarizationError(Exception):
    """Raised when a summarizer cannot produce a summary."""


# ---------------------------------------------------------------------------
# Extraction rules
# ---------------------------------------------------------------------------

def _ranked_by_frequency(tokens: tuple[Token, ...]) -> list[tuple[Token, float]]:
    counts = Counter(tokens)
    first_seen = {}
    for i, tok in enumerate(tokens):
        first_seen.setdefault(tok, i)
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return [(t, float(counts[t])) for t in ranked]


def _ranked_by_relevance(
    spec: RelevanceExtract, tokens: tuple[Token, ...]
) -> list[tuple[Token, float]]:
    first_seen = {}
    for i, tok in enumerate(tokens):
        first_seen.setdefault(tok, i)
    ranked = sorted(first_seen, key=lambda t: (-spec.score_of(t), first_seen[t]))
    return [(t, spec.score_of(t)) for t in ranked]


def _extract(spec: SummarizerSpec, signal: ExogenousSignal, cap: int) -> tuple[Token, ...]:
    if isinstance(spec, Truncate):
        return signal.tokens[:cap]
    if isinstance(spec, TopFrequency):
        return tuple(t for t, _ in _ranked_by_frequency(signal.tokens)[:cap])
    if isinstance(spec, RelevanceExtract):
        ranked = _ranked_by_relevance(spec, signal.tokens)
        return tuple(t for t, s in ranked if s > 0)[:cap]
    raise TypeError(f"no extraction rule for {type(spec).__name__}")


def summarize(
    spec: SummarizerSpec,
    history: HistoryBuffer,
    signal: ExogenousSignal,
    budget: BudgetSpec,
    meta: MetaAction,
    previous: ContextSummary | None = None,
) -> ContextSummary:
    """Produce the context summary for one step.

    Keep returns the previous summary aged by one step (and costs nothing);
    Refresh recomputes under the full token cap; Compress recomputes under
    ``ceil(cap / 2)``. The output token count never exceeds the applicable
    cap, for any spec or input.
    """
    if meta is MetaAction.KEEP:
        if previous is None:
            raise SummarizationError("Keep requires a previous summary")
        return previous.aged()

    cap = budget.token_cap if meta is MetaAction.REFRESH else budget.compress_cap
    if isinstance(spec, External):
        try:
            tokens = request_external_summary(
                spec.endpoint, history, signal, cap, meta
            )
        except ExternalError as exc:
            log.warning("external summarizer failed (%s); falling back to Truncate", exc)
            tokens = _extract(Truncate(), signal, cap)
    else:
        tokens = _extract(spec, signal, cap)
    return ContextSummary(tokens=tokens)


def salient_tokens(
    spec: SummarizerSpec, signal: ExogenousSignal, k: int
) -> list[tuple[Token, float]]:
    """Top-k tokens under the spec's scoring rule, with their scores.

    Frequency ranking applies to Truncate, TopFrequency, and External;
    RelevanceExtract ranks by its score table. Ties break by first
    occurrence in the signal.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(spec, RelevanceExtract):
        ranked = _ranked_by_relevance(spec, signal.tokens)
    else:
        ranked = _ranked_by_frequency(signal.tokens)
    return ranked[:k]


# ---------------------------------------------------------------------------
# Summary-entropy window
# ---------------------------------------------------------------------------

class SummaryWindow:
    """Bounded FIFO of recent summaries backing the H(C) estimate."""

    def __init__(self, capacity: int = DEFAULT_ENTROPY_WINDOW):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._summaries: deque[tuple[Token, ...]] = deque(maxlen=capacity)
        self._counts: Counter[tuple[Token, ...]] = Counter()

    def push(self, summary: ContextSummary) -> None:
        if len(self._summaries) == self.capacity:
            oldest = self._summaries[0]
            self._counts[oldest] -= 1
            if self._counts[oldest] == 0:
                del self._counts[oldest]
        self._summaries.append(summary.tokens)
        self._counts[summary.tokens] += 1

    def __len__(self) -> int:
        return len(self._summaries)

    def identity_counts(self) -> dict[tuple[Token, ...], int]:
        return dict(self._counts)


def summary_entropy(window: SummaryWindow) -> float:
    """Plug-in Shannon entropy (nats) over distinct whole summaries."""
    n = len(window)
    if n == 0:
        raise ValueError("entropy of an empty window is undefined")
    h = 0.0
    for count in window.identity_counts().values():
        p = count / n
        h -= p * math.log(p)
    return max(0.0, h)


# ---------------------------------------------------------------------------
# External bridge (newline-delimited JSON)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExternalEndpoint:
    """Descriptor for an out-of-process summarizer.

    ``transport`` selects child-process stdio ("process", using ``command``)
    or a TCP socket ("tcp", using ``host``/``port``).
    """

    transport: str
    command: tuple[str, ...] = ()
    host: str = "127.0.0.1"
    port: int = 0
    timeout_ms: float = DEFAULT_TIMEOUT_MS

    def __post_init__(self):
        if self.transport not in ("process", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "process" and not self.command:
            raise ValueError("process transport requires a command")
        if not self.timeout_ms > 0:
            raise ValueError("timeout_ms must be positive")

    @classmethod
    def from_json(cls, text: str) -> "ExternalEndpoint":
        obj = json.loads(text)
        return cls(
            transport=obj["transport"],
            command=tuple(obj.get("command", ())),
            host=obj.get("host", "127.0.0.1"),
            port=int(obj.get("port", 0)),
            timeout_ms=float(obj.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
        )


class ExternalError(SummarizationError):
    """Base class for external-bridge failures."""


class ExternalTransportError(ExternalError):
    """Endpoint unreachable or the connection broke mid-request."""


class ExternalTimeoutError(ExternalError):
    """No response line within the configured timeout."""


class ExternalProtocolError(ExternalError):
    """Response was not a valid single-line JSON token list."""


def _encode_request(
    history: HistoryBuffer,
    signal: ExogenousSignal,
    token_cap: int,
    meta: MetaAction,
) -> str:
    mode = "compress" if meta is MetaAction.COMPRESS else "refresh"
    payload = {
        "history": [[s, a, r] for s, a, r in history.entries],
        "signal": list(signal.tokens),
        "token_cap": token_cap,
        "mode": mode,
    }
    return json.dumps(payload, sort_keys=True) + "\n"


def _decode_response(line: str) -> list[Token]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ExternalProtocolError(f"malformed JSON response: {exc}") from exc
    if not isinstance(obj, dict) or "tokens" not in obj:
        raise ExternalProtocolError("response must be an object with a 'tokens' field")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
        raise ExternalProtocolError("'tokens' must be a list of integers")
    return tokens


def _tcp_roundtrip(endpoint: ExternalEndpoint, request_line: str) -> str:
    timeout_s = endpoint.timeout_ms / 1000.0
    try:
        with socket.create_connection((endpoint.host, endpoint.port), timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            sock.sendall(request_line.encode("utf-8"))
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(4096)
                if not chunk:
                    raise ExternalTransportError("connection closed before a full response line")
                buf += chunk
            return buf.decode("utf-8")
    except socket.timeout as exc:
        raise ExternalTimeoutError(f"no response within {endpoint.timeout_ms} ms") from exc
    except ExternalError:
        raise
    except OSError as exc:
        raise ExternalTransportError(f"tcp transport failed: {exc}") from exc


class ProcessBridge:
    """Owns a child summarizer process and its stdio line protocol."""

    def __init__(self, endpoint: ExternalEndpoint):
        self.endpoint = endpoint
        self._proc: subprocess.Popen | None = None

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    list(self.endpoint.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise ExternalTransportError(f"failed to launch summarizer: {exc}") from exc
        return self._proc

    def roundtrip(self, request_line: str) -> str:
        proc = self._ensure_process()
        try:
            proc.stdin.write(request_line)
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise ExternalTransportError(f"summarizer process pipe broke: {exc}") from exc
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        ready = sel.select(timeout=self.endpoint.timeout_ms / 1000.0)
        sel.close()
        if not ready:
            self.close()
            raise ExternalTimeoutError(f"no response within {self.endpoint.timeout_ms} ms")
        line = proc.stdout.readline()
        if not line:
            self.close()
            raise ExternalTransportError("summarizer process closed stdout")
        return line

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        self._proc = None


_process_bridges: dict[ExternalEndpoint, ProcessBridge] = {}


def _bridge_for(endpoint: ExternalEndpoint) -> ProcessBridge:
    bridge = _process_bridges.get(endpoint)
    if bridge is None:
        bridge = ProcessBridge(endpoint)
        _process_bridges[endpoint] = bridge
    return bridge


def shutdown_bridges() -> None:
    """Terminate any child summarizer processes (test/CLI cleanup)."""
    for bridge in _process_bridges.values():
        bridge.close()
    _process_bridges.clear()


def request_external_summary(
    endpoint: ExternalEndpoint,
    history: HistoryBuffer,
    signal: ExogenousSignal,
    token_cap: int,
    meta: MetaAction,
) -> tuple[Token, ...]:
    """One request/response cycle against the external endpoint.

    Over-budget responses are truncated to the cap and flagged with a
    warning rather than rejected.
    """
    request_line = _encode_request(history, signal, token_cap, meta)
    if endpoint.transport == "tcp":
        line = _tcp_roundtrip(endpoint, request_line)
    else:
        line = _bridge_for(endpoint).roundtrip(request_line)
    tokens = _decode_response(line)
    if len(tokens) > token_cap:
        log.warning(
            "external summary over budget (%d > %d tokens); truncated",
            len(tokens), token_cap,
        )
        tokens = tokens[:token_cap]
    return tuple(tokens)


def external_summarize(
    endpoint: ExternalEndpoint,
    history: HistoryBuffer,
    signal: ExogenousSignal,
    token_cap: int,
    mode: MetaAction = MetaAction.REFRESH,
) -> ContextSummary:
    """External-bridge summarization without the Truncate fallback.

    Raises the distinct ExternalError subclasses on timeout, transport
    failure, or malformed responses.
    """
    tokens = request_external_summary(endpoint, history, signal, token_cap, mode)
    return ContextSummary(tokens=tokens)


def with_entropy(summary: ContextSummary, entropy_nats: float) -> ContextSummary:
    """Attach a windowed entropy estimate to a summary value."""
    return dataclasses.replace(summary, entropy_nats=entropy_nats)
