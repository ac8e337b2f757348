"""Domain types shared by all modules, plus the metrics that define success.

Time is kept as integer microseconds internally so that event ordering in the
simulator is exact and free of floating-point ties; every second-valued field
exposed here is a view over the microsecond value.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Optional, Sequence

from .errors import EmptySamples, InvalidRate, InvalidTokenCount, NoChunkDelivered

US_PER_S = 1_000_000

RequestId = int


def to_us(seconds: float) -> int:
    """Convert seconds to the internal integer-microsecond clock."""
    return int(round(seconds * US_PER_S))


def to_seconds(us: int) -> float:
    return us / US_PER_S


class Phase(enum.Enum):
    STARTUP = "startup"
    STEADY_STATE = "steady_state"
    FINISHED = "finished"


@dataclass
class Request:
    """One generation job's lifecycle state.

    ``arrival_us`` is the request's submission time (t0) and ``first_chunk_us``
    the availability of its first playable chunk (t1), both on the run clock.
    ``covered_tokens``, ``prefilled`` and ``playback_emitted_us`` are engine
    bookkeeping derived from the chunk history.
    """

    id: RequestId
    arrival_us: int
    prompt_tokens: int
    target_output_tokens: int
    phase: Phase = Phase.STARTUP
    tokens_generated: int = 0
    chunks_emitted: int = 0
    first_chunk_us: Optional[int] = None
    sampling_state: Any = None
    detok_cache: Any = None
    prefilled: bool = False
    covered_tokens: int = 0
    playback_emitted_us: int = 0

    @property
    def arrival_time(self) -> float:
        return to_seconds(self.arrival_us)

    @property
    def first_chunk_time(self) -> Optional[float]:
        return None if self.first_chunk_us is None else to_seconds(self.first_chunk_us)

    @property
    def done_generating(self) -> bool:
        return self.tokens_generated >= self.target_output_tokens

    def check_invariants(self) -> None:
        assert (self.phase is Phase.STARTUP) == (self.first_chunk_us is None)
        assert self.chunks_emitted == 0 or self.first_chunk_us is not None
        assert self.tokens_generated <= self.target_output_tokens


@dataclass(frozen=True)
class ChunkEvent:
    """One delivered audio chunk: availability time (t_i) and playback length (C_i)."""

    request: RequestId
    index: int  # 1-based chunk ordinal
    available_us: int
    playback_us: int
    new_tokens: int

    @property
    def available_time(self) -> float:
        return to_seconds(self.available_us)

    @property
    def playback_duration(self) -> float:
        return to_seconds(self.playback_us)


@dataclass(frozen=True)
class DeviceSpan:
    device: int
    kind: str  # prefill | decode | depth | detok
    start_us: int
    end_us: int
    batch: int


@dataclass
class Trace:
    """Ordered event log of one run."""

    requests: list[Request] = field(default_factory=list)
    chunks: list[ChunkEvent] = field(default_factory=list)
    device_spans: list[DeviceSpan] = field(default_factory=list)
    decisions: list[Any] = field(default_factory=list)  # scheduler.DecisionRecord

    def chunks_for(self, request: RequestId) -> list[ChunkEvent]:
        found = sorted((c for c in self.chunks if c.request == request), key=lambda c: c.index)
        return found

    def makespan_us(self) -> int:
        end = 0
        for span in self.device_spans:
            end = max(end, span.end_us)
        for chunk in self.chunks:
            end = max(end, chunk.available_us)
        return end


@dataclass
class MetricsReport:
    ttfa_p50: float
    ttfa_p90: float
    ttfa_p99: float
    viability_fraction: float
    requests_completed: int
    audio_seconds_generated: float
    inverse_rtf: float
    device_utilization: list[float]
    viability_request_mean: float
    vacuous: bool = False

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "ttfa_p50": self.ttfa_p50,
            "ttfa_p90": self.ttfa_p90,
            "ttfa_p99": self.ttfa_p99,
            "viability_fraction": self.viability_fraction,
            "requests_completed": self.requests_completed,
            "audio_seconds_generated": self.audio_seconds_generated,
            "inverse_rtf": self.inverse_rtf,
            "device_utilization": self.device_utilization,
            "viability_request_mean": self.viability_request_mean,
            "vacuous": self.vacuous,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


# CSV schema shared by the simulator and the load-test client so that
# sim-vs-live outputs stay column-compatible.
CSV_FIELDS = [
    "rate",
    "scheduler",
    "ttfa_p50",
    "ttfa_p90",
    "ttfa_p99",
    "viability_fraction",
    "requests_completed",
    "audio_seconds",
    "inverse_rtf",
    "utilization",
    "viability_request_mean",
    "vacuous",
]


def csv_row(rate: float, scheduler: str, report: MetricsReport) -> dict[str, Any]:
    util = ""
    if report.device_utilization:
        util = repr(sum(report.device_utilization) / len(report.device_utilization))
    return {
        "rate": repr(float(rate)),
        "scheduler": scheduler,
        "ttfa_p50": repr(report.ttfa_p50),
        "ttfa_p90": repr(report.ttfa_p90),
        "ttfa_p99": repr(report.ttfa_p99),
        "viability_fraction": repr(report.viability_fraction),
        "requests_completed": report.requests_completed,
        "audio_seconds": repr(report.audio_seconds_generated),
        "inverse_rtf": repr(report.inverse_rtf),
        "utilization": util,
        "viability_request_mean": repr(report.viability_request_mean),
        "vacuous": int(report.vacuous),
    }


def ttfa(trace: Trace, request: RequestId) -> float:
    """Time-to-first-audio for one request: first chunk availability minus arrival."""
    req = next((r for r in trace.requests if r.id == request), None)
    if req is None:
        raise NoChunkDelivered(f"request {request} not in trace")
    chunks = trace.chunks_for(request)
    if not chunks:
        raise NoChunkDelivered(f"request {request} delivered no chunks")
    return to_seconds(chunks[0].available_us - req.arrival_us)


def _ontime_flags(chunks: Sequence[ChunkEvent]) -> list[bool]:
    """Per-chunk on-time flags for one request's chunk list, ordered by index.

    The first chunk defines playback start and counts as on-time; chunk i+1 is
    on-time iff it arrives no later than the end of playback of chunks 1..i.
    """
    flags = [True]
    t1 = chunks[0].available_us
    playback_sum = 0
    for prev, cur in zip(chunks, chunks[1:]):
        playback_sum += prev.playback_us
        flags.append(cur.available_us - t1 <= playback_sum)
    return flags


def viability_fraction(trace: Trace) -> float:
    """Fraction of delivered chunks that arrive in time, pooled across requests."""
    ontime = 0
    total = 0
    for req in trace.requests:
        chunks = trace.chunks_for(req.id)
        if not chunks:
            continue
        flags = _ontime_flags(chunks)
        ontime += sum(flags)
        total += len(flags)
    if total == 0:
        return 1.0  # vacuous; flagged in the report
    return ontime / total


def viability_request_mean(trace: Trace) -> float:
    """Mean over requests of each request's own on-time fraction."""
    fractions = []
    for req in trace.requests:
        chunks = trace.chunks_for(req.id)
        if not chunks:
            continue
        flags = _ontime_flags(chunks)
        fractions.append(sum(flags) / len(flags))
    if not fractions:
        return 1.0
    return sum(fractions) / len(fractions)


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: sort ascending, take element ceil(p/100 * n), 1-based.

    The rank is computed with exact rational arithmetic so that e.g. p=90 over
    ten samples lands on rank 9, never 10 through float noise.
    """
    if not samples:
        raise EmptySamples("percentile of empty sample list")
    if not (0 < p <= 100):
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(samples)
    n = len(ordered)
    rank = math.ceil(Fraction(str(p)) * n / 100)
    return ordered[max(rank, 1) - 1]


def chunk_playback_duration(new_tokens: int, token_rate: float) -> float:
    """Playback seconds covered by ``new_tokens`` at the profile's token rate."""
    if new_tokens <= 0:
        raise InvalidTokenCount(f"new_tokens must be >= 1, got {new_tokens}")
    if token_rate <= 0:
        raise InvalidRate(f"token_rate must be > 0, got {token_rate}")
    return new_tokens / token_rate


def playback_us_for(new_tokens: int, token_rate: float) -> int:
    """Integer-microsecond playback duration used by the engine's bookkeeping."""
    if new_tokens <= 0:
        raise InvalidTokenCount(f"new_tokens must be >= 1, got {new_tokens}")
    if token_rate <= 0:
        raise InvalidRate(f"token_rate must be > 0, got {token_rate}")
    return int(round(new_tokens * US_PER_S / token_rate))


def ttfa_samples(trace: Trace) -> list[float]:
    samples = []
    for req in trace.requests:
        try:
            samples.append(ttfa(trace, req.id))
        except NoChunkDelivered:
            continue
    return samples


def build_report(trace: Trace, makespan_us: Optional[int] = None) -> MetricsReport:
    """Derive the metrics report from a trace.

    ``makespan_us`` defaults to the last event in the trace; pass an explicit
    value for wall-clock runs where the measured horizon differs.
    """
    samples = ttfa_samples(trace)
    if makespan_us is None:
        makespan_us = trace.makespan_us()
    audio_us = sum(c.playback_us for c in trace.chunks)
    audio_seconds = to_seconds(audio_us)
    inverse_rtf = audio_us / makespan_us if makespan_us > 0 else 0.0

    per_device_busy: dict[int, int] = {}
    for span in trace.device_spans:
        per_device_busy[span.device] = per_device_busy.get(span.device, 0) + (span.end_us - span.start_us)
    utilization = [
        per_device_busy[d] / makespan_us if makespan_us > 0 else 0.0
        for d in sorted(per_device_busy)
    ]

    vacuous = len(samples) == 0
    return MetricsReport(
        ttfa_p50=percentile(samples, 50) if samples else float("nan"),
        ttfa_p90=percentile(samples, 90) if samples else float("nan"),
        ttfa_p99=percentile(samples, 99) if samples else float("nan"),
        viability_fraction=viability_fraction(trace),
        requests_completed=sum(1 for r in trace.requests if r.phase is Phase.FINISHED),
        audio_seconds_generated=audio_seconds,
        inverse_rtf=inverse_rtf,
        device_utilization=utilization,
        viability_request_mean=viability_request_mean(trace),
        vacuous=vacuous,
    )


def trace_events(trace: Trace) -> Iterable[dict[str, Any]]:
    """Trace as JSON-ready event dicts: one per arrival, device span, and chunk."""
    events: list[tuple[int, int, dict[str, Any]]] = []
    for req in trace.requests:
        events.append(
            (
                req.arrival_us,
                0,
                {
                    "event": "arrival",
                    "request": req.id,
                    "t_us": req.arrival_us,
                    "prompt_tokens": req.prompt_tokens,
                    "target_tokens": req.target_output_tokens,
                },
            )
        )
    for span in trace.device_spans:
        events.append(
            (
                span.start_us,
                1,
                {
                    "event": "span",
                    "device": span.device,
                    "kind": span.kind,
                    "start_us": span.start_us,
                    "end_us": span.end_us,
                    "batch": span.batch,
                },
            )
        )
    for chunk in trace.chunks:
        events.append(
            (
                chunk.available_us,
                2,
                {
                    "event": "chunk",
                    "request": chunk.request,
                    "index": chunk.index,
                    "available_us": chunk.available_us,
                    "playback_us": chunk.playback_us,
                    "new_tokens": chunk.new_tokens,
                },
            )
        )
    events.sort(key=lambda e: (e[0], e[1], json.dumps(e[2], sort_keys=True)))
    for _, _, payload in events:
        yield payload


def write_trace_jsonl(trace: Trace, path: str) -> None:
    with open(path, "w") as fh:
        for event in trace_events(trace):
            fh.write(json.dumps(event, sort_keys=True))
            fh.write("\n")
