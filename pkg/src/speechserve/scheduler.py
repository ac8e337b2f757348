"""Per-iteration scheduling: request classification and batch selection.

Requests are classed Startup (no first chunk yet, TTFA-critical), AtRisk
(steady-state and within the risk threshold of the next chunk's deadline), or
Slack. The streaming-aware policy serves classes in that order with a bounded
startup concurrency, and defers Slack detokenization while startups are
present, since delaying work that is comfortably ahead of its deadline does
not degrade quality of service. FCFS and a batch-maximizing throughput policy
sit behind the same interface as ablation baselines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import Phase, Request, RequestId
from .model_api import StageKind
from .profiles import WindowSpec


class Policy(enum.Enum):
    STREAMING_AWARE = "streaming"
    FCFS = "fcfs"
    THROUGHPUT_MAX = "throughput"


class PriorityClass(enum.Enum):
    STARTUP = 0
    AT_RISK = 1
    SLACK = 2


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy = Policy.STREAMING_AWARE
    risk_threshold_us: int = 1_000_000  # within 1 second of the deadline
    startup_concurrency_limit: int = 8
    max_lm_batch: int = 128
    max_detok_batch: int = 128
    max_live_requests: int = 2048

    def __post_init__(self) -> None:
        if self.risk_threshold_us <= 0:
            raise ValueError("risk_threshold must be > 0")
        if self.startup_concurrency_limit < 1:
            raise ValueError("startup_concurrency_limit must be >= 1")


@dataclass(frozen=True)
class QueueEntry:
    """One live request as the scheduler sees it for a single iteration."""

    request: Request
    ready_window: Optional[WindowSpec]
    lm_work: Optional[StageKind]  # PREFILL, DECODE, or None once generation is done


@dataclass(frozen=True)
class LmEntry:
    request: RequestId
    kind: StageKind
    priority: PriorityClass


@dataclass
class SchedulerDecision:
    lm: list[LmEntry] = field(default_factory=list)
    detok: list[WindowSpec] = field(default_factory=list)
    detok_classes: list[PriorityClass] = field(default_factory=list)
    eligible_lm: int = 0
    eligible_detok: int = 0

    @property
    def empty(self) -> bool:
        return not self.lm and not self.detok


@dataclass
class DecisionRecord:
    """Replayable log entry: one scheduling pass and the device tasks it issued."""

    iteration: int
    now_us: int
    lm_ids: list[RequestId]
    detok_ids: list[RequestId]
    n_startup_lm: int
    eligible_lm: int
    eligible_detok: int
    # (stage kind, batch size, extra tokens) in device issue order
    tasks: list[tuple[str, int, int]] = field(default_factory=list)


def soft_deadline(request: Request) -> Optional[int]:
    """Deadline (us) for the request's next chunk, absent for startup phase.

    Chunk i+1 must arrive no later than first-chunk time plus the playback
    of chunks 1..i, which is exactly the streaming-viability bound.
    """
    if request.first_chunk_us is None:
        return None
    return request.first_chunk_us + request.playback_emitted_us


def classify(request: Request, now_us: int, config: PolicyConfig) -> PriorityClass:
    deadline = soft_deadline(request)
    if deadline is None:
        return PriorityClass.STARTUP
    if deadline - now_us <= config.risk_threshold_us:
        return PriorityClass.AT_RISK  # includes already-missed deadlines
    return PriorityClass.SLACK


def _fifo_key(entry: QueueEntry) -> tuple[int, int]:
    return (entry.request.arrival_us, entry.request.id)


def schedule_streaming(
    queue: Sequence[QueueEntry], now_us: int, config: PolicyConfig
) -> SchedulerDecision:
    classes = {e.request.id: classify(e.request, now_us, config) for e in queue}
    by_class: dict[PriorityClass, list[QueueEntry]] = {c: [] for c in PriorityClass}
    for entry in sorted(queue, key=_fifo_key):
        by_class[classes[entry.request.id]].append(entry)

    decision = SchedulerDecision()
    decision.eligible_detok = sum(1 for e in queue if e.ready_window is not None)
    for cls in (PriorityClass.STARTUP, PriorityClass.AT_RISK):
        for entry in by_class[cls]:
            if entry.ready_window is None:
                continue
            if len(decision.detok) >= config.max_detok_batch:
                break
            decision.detok.append(entry.ready_window)
            decision.detok_classes.append(cls)

    # Slack exploitation: a Slack chunk is safely deferrable, so it never
    # creates a detokenizer invocation of its own. It rides along with
    # invocations that happen anyway (amortizing the per-call cost), or
    # drains when there is no LM work to delay.
    lm_idle = not any(e.lm_work is not None for e in queue)
    if decision.detok or lm_idle:
        for entry in by_class[PriorityClass.SLACK]:
            if entry.ready_window is None:
                continue
            if len(decision.detok) >= config.max_detok_batch:
                break
            decision.detok.append(entry.ready_window)
            decision.detok_classes.append(PriorityClass.SLACK)

    selected = {w.request for w in decision.detok}
    eligible_lm = [
        e for e in sorted(queue, key=_fifo_key)
        if e.lm_work is not None and e.request.id not in selected
    ]
    decision.eligible_lm = len(eligible_lm)

    # Fill order STARTUP -> AT_RISK -> SLACK plus the hard batch cap gives the
    # class-order invariant directly: Slack never seats while AtRisk waits.
    startup_used = 0
    for cls in (PriorityClass.STARTUP, PriorityClass.AT_RISK, PriorityClass.SLACK):
        for entry in eligible_lm:
            if classes[entry.request.id] is not cls:
                continue
            if len(decision.lm) >= config.max_lm_batch:
                break
            if cls is PriorityClass.STARTUP:
                if startup_used >= config.startup_concurrency_limit:
                    continue  # over the bounded startup concurrency; waits
                startup_used += 1
            decision.lm.append(LmEntry(entry.request.id, entry.lm_work, cls))

    assert startup_used <= config.startup_concurrency_limit
    return decision


def schedule_fcfs(
    queue: Sequence[QueueEntry], now_us: int, config: PolicyConfig
) -> SchedulerDecision:
    """Strict arrival-order filling of both batches; phases and deadlines ignored."""
    ordered = sorted(queue, key=_fifo_key)
    decision = SchedulerDecision()
    decision.eligible_detok = sum(1 for e in queue if e.ready_window is not None)
    for entry in ordered:
        if entry.ready_window is None:
            continue
        if len(decision.detok) >= config.max_detok_batch:
            break
        decision.detok.append(entry.ready_window)
        decision.detok_classes.append(classify(entry.request, now_us, config))
    selected = {w.request for w in decision.detok}
    eligible = [e for e in ordered if e.lm_work is not None and e.request.id not in selected]
    decision.eligible_lm = len(eligible)
    for entry in eligible:
        if len(decision.lm) >= config.max_lm_batch:
            break
        decision.lm.append(
            LmEntry(entry.request.id, entry.lm_work, classify(entry.request, now_us, config))
        )
    return decision


def schedule_throughput(
    queue: Sequence[QueueEntry], now_us: int, config: PolicyConfig
) -> SchedulerDecision:
    """Fill both batches to their caps with any eligible work, arrival-order tie-break."""
    return schedule_fcfs(queue, now_us, config)


_POLICIES = {
    Policy.STREAMING_AWARE: schedule_streaming,
    Policy.FCFS: schedule_fcfs,
    Policy.THROUGHPUT_MAX: schedule_throughput,
}


def schedule(queue: Sequence[QueueEntry], now_us: int, config: PolicyConfig) -> SchedulerDecision:
    return _POLICIES[config.policy](queue, now_us, config)
