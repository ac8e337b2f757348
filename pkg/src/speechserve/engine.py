"""Execution loop tying scheduler, executors, and the clock together.

The virtual mode is a deterministic discrete-event simulation: device time is
a per-device busy-until horizon, host scheduling work is either serialized
with device tasks (synchronous pipeline) or overlapped with them
(asynchronous pipeline, one decision prepared while the previous iteration's
device work runs). Chunk availability, device spans, and token completion
times are all tracked on the integer-microsecond clock.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    ChunkEvent,
    DeviceSpan,
    Phase,
    Request,
    Trace,
    to_us,
)
from .errors import ConfigError, DependencyViolation, EngineStall, NoInstances
from .model_api import (
    DetokenizerCache,
    SamplingState,
    StageBatch,
    StageKind,
    depth_forward,
    detokenize,
    lm_forward,
    next_input,
    preprocess,
    sample,
)
from .profiles import ModelProfile, SyntheticExecutor, chunk_ready, stage_latency
from .scheduler import (
    DecisionRecord,
    PolicyConfig,
    PriorityClass,
    QueueEntry,
    SchedulerDecision,
    schedule,
)
from .workload import ArrivalSpec


class ClockMode(enum.Enum):
    VIRTUAL = "virtual"
    WALL = "wall"


class PipelineMode(enum.Enum):
    SYNCHRONOUS = "sync"
    ASYNCHRONOUS = "async"


class TopologyKind(enum.Enum):
    SINGLE = "single"
    DATA_PARALLEL = "data_parallel"
    DISAGGREGATED = "disaggregated"


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind = TopologyKind.SINGLE
    instances: int = 1
    link_latency_us: int = 0

    def __post_init__(self) -> None:
        if self.link_latency_us < 0:
            raise ConfigError("link latency must be >= 0")
        if self.kind is TopologyKind.DATA_PARALLEL and self.instances < 1:
            raise ConfigError("data parallelism needs >= 1 instance")
        if self.kind is not TopologyKind.DATA_PARALLEL and self.instances != 1:
            raise ConfigError("instances only apply to data-parallel topology")


@dataclass
class DeviceResource:
    id: int
    busy_until_us: int = 0

    def issue(self, ready_us: int, latency_us: int) -> tuple[int, int]:
        start = max(self.busy_until_us, ready_us)
        end = start + latency_us
        self.busy_until_us = end
        return start, end


@dataclass
class _RequestRun:
    """Engine-side runtime state wrapping the public Request record."""

    req: Request
    state: SamplingState
    cache: DetokenizerCache
    tokens: list[list[int]]  # [codebook][position]
    token_done_us: list[int] = field(default_factory=list)

    def window_array(self, start: int, length: int) -> np.ndarray:
        cols = [cb[start : start + length] for cb in self.tokens]
        return np.asarray(cols, dtype=np.int64).T  # [length, codebooks]


def route_dp(request_index: int, n_instances: int, rng: np.random.Generator) -> int:
    """Uniform random instance choice for data-parallel routing."""
    if n_instances < 1:
        raise NoInstances("data-parallel routing needs at least one instance")
    if n_instances == 1:
        return 0
    return int(rng.integers(0, n_instances))


def transfer_disaggregated(window_done_us: int, link_latency_us: int) -> int:
    """Arrival time of a token window at the detokenizer device."""
    if link_latency_us < 0:
        raise ConfigError("link latency must be >= 0")
    return window_done_us + link_latency_us


class SimEngine:
    """Single-instance virtual-clock engine (one LM device, optionally a
    separate detokenizer device when disaggregated)."""

    def __init__(
        self,
        profile: ModelProfile,
        policy: PolicyConfig,
        pipeline: PipelineMode,
        seed: int,
        disaggregated: bool = False,
        link_latency_us: int = 0,
        delivery_overhead_us: int = 0,
        lm_device_id: int = 0,
        detok_device_id: Optional[int] = None,
    ):
        self.profile = profile
        self.policy = policy
        self.pipeline = pipeline
        self.seed = seed
        self.executor = SyntheticExecutor(profile)
        self.disaggregated = disaggregated
        self.link_latency_us = link_latency_us if disaggregated else 0
        self.delivery_overhead_us = delivery_overhead_us
        self.lm_device = DeviceResource(lm_device_id)
        if disaggregated:
            self.detok_device = DeviceResource(
                detok_device_id if detok_device_id is not None else lm_device_id + 1
            )
        else:
            self.detok_device = self.lm_device
        self.host_overhead_us = to_us(profile.cost.host_overhead_s)
        self.host_free_us = 0
        self.live: dict[int, _RequestRun] = {}
        self.trace = Trace()
        self.iteration = 0

    # -- request lifecycle -------------------------------------------------

    def admit(self, request_id: int, spec: ArrivalSpec) -> None:
        req, cache, state = preprocess(
            prompt_tokens=spec.prompt_tokens,
            profile=self.profile,
            seed=self.seed,
            request_id=request_id,
            arrival_us=spec.arrival_us,
            target_output_tokens=spec.target_output_tokens,
        )
        run = _RequestRun(
            req=req,
            state=state,
            cache=cache,
            tokens=[[] for _ in range(self.profile.codebooks)],
        )
        self.live[request_id] = run

    def _queue_snapshot(self) -> list[QueueEntry]:
        entries = []
        for run in self.live.values():
            req = run.req
            window = chunk_ready(
                req.tokens_generated,
                req.chunks_emitted,
                self.profile,
                stream_ended=req.done_generating,
                request=req.id,
            )
            if req.done_generating:
                lm_work = None
            elif not req.prefilled:
                lm_work = StageKind.PREFILL
            else:
                lm_work = StageKind.DECODE
            entries.append(QueueEntry(request=req, ready_window=window, lm_work=lm_work))
        return entries

    # -- one iteration -----------------------------------------------------

    def run_iteration(self, decision: SchedulerDecision, now_us: int) -> int:
        """Execute one scheduling decision; returns the next decision instant."""
        record = DecisionRecord(
            iteration=self.iteration,
            now_us=now_us,
            lm_ids=[e.request for e in decision.lm],
            detok_ids=[w.request for w in decision.detok],
            n_startup_lm=sum(1 for e in decision.lm if e.priority is PriorityClass.STARTUP),
            eligible_lm=decision.eligible_lm,
            eligible_detok=decision.eligible_detok,
        )
        self.iteration += 1

        if self.pipeline is PipelineMode.SYNCHRONOUS:
            host_done = now_us + self.host_overhead_us
        else:
            host_done = max(self.host_free_us, now_us) + self.host_overhead_us
            self.host_free_us = host_done

        first_task_start: Optional[int] = None
        last_end = host_done

        def issue(device: DeviceResource, kind: str, latency_s: float, batch: int, dep_us: int = 0) -> tuple[int, int]:
            nonlocal first_task_start, last_end
            ready = max(host_done, dep_us)
            start, end = device.issue(ready, max(1, to_us(latency_s)))
            if start < dep_us:
                raise DependencyViolation(f"{kind} task started before its inputs at {start} < {dep_us}")
            self.trace.device_spans.append(DeviceSpan(device.id, kind, start, end, batch))
            if first_task_start is None:
                first_task_start = start
            last_end = max(last_end, end)
            return start, end

        prefills = [e for e in decision.lm if e.kind is StageKind.PREFILL]
        decodes = [e for e in decision.lm if e.kind is StageKind.DECODE]

        if prefills:
            runs = [self.live[e.request] for e in prefills]
            batch = StageBatch(
                request_ids=[r.req.id for r in runs],
                frames=[next_input([0] * self.profile.codebooks, self.profile) for _ in runs],
                kind=StageKind.PREFILL,
                seeds=[r.state.seed for r in runs],
                steps=[0 for _ in runs],
                prompt_tokens=[r.req.prompt_tokens for r in runs],
            )
            _, latency = lm_forward(batch, self.executor)
            total_prompt = sum(batch.prompt_tokens)
            issue(self.lm_device, "prefill", latency, len(runs))
            record.tasks.append(("prefill", len(runs), total_prompt))
            for run in runs:
                run.req.prefilled = True

        if decodes:
            runs = [self.live[e.request] for e in decodes]
            batch = StageBatch(
                request_ids=[r.req.id for r in runs],
                frames=[
                    next_input(
                        [cb[-1] if cb else 0 for cb in r.tokens], self.profile
                    )
                    for r in runs
                ],
                kind=StageKind.DECODE,
                seeds=[r.state.seed for r in runs],
                steps=[r.req.tokens_generated for r in runs],
            )
            logits, latency = lm_forward(batch, self.executor)
            _, lm_end = issue(self.lm_device, "decode", latency, len(runs))
            record.tasks.append(("decode", len(runs), 0))
            token_done = lm_end

            if self.profile.has_depth_stage:
                depth_batch = StageBatch(
                    request_ids=batch.request_ids,
                    frames=batch.frames,
                    kind=StageKind.DEPTH_DECODE,
                    seeds=batch.seeds,
                    steps=batch.steps,
                )
                depth_ids, depth_latency = depth_forward(
                    depth_batch, self.executor, [r.state for r in runs]
                )
                _, depth_end = issue(self.lm_device, "depth", depth_latency, len(runs))
                record.tasks.append(("depth", len(runs), 0))
                token_done = depth_end
            else:
                depth_ids = None

            for i, run in enumerate(runs):
                token = sample(
                    logits[i, 0], self.profile.sampling_defaults, run.state, codebook=0
                )
                run.tokens[0].append(token)
                if depth_ids is not None:
                    for c, tok in enumerate(depth_ids[i], start=1):
                        run.tokens[c].append(tok)
                run.req.tokens_generated += 1
                run.token_done_us.append(token_done)

        if decision.detok:
            runs = [self.live[w.request] for w in decision.detok]
            windows = [
                run.window_array(w.start, w.length)
                for run, w in zip(runs, decision.detok)
            ]
            data_ready = 0
            for run, w in zip(runs, decision.detok):
                done = run.token_done_us[w.start + w.length - 1]
                data_ready = max(data_ready, transfer_disaggregated(done, self.link_latency_us))
            batch = StageBatch(
                request_ids=[r.req.id for r in runs],
                frames=[next_input([0] * self.profile.codebooks, self.profile) for _ in runs],
                kind=StageKind.DETOKENIZE,
                seeds=[r.state.seed for r in runs],
                steps=[r.req.chunks_emitted for r in runs],
            )
            outs, latency = detokenize(
                batch, decision.detok, windows, [r.cache for r in runs], self.executor
            )
            total_window = sum(w.length for w in decision.detok)
            _, detok_end = issue(self.detok_device, "detok", latency, len(runs), dep_us=data_ready)
            record.tasks.append(("detok", len(runs), total_window))
            for run, spec, out in zip(runs, decision.detok, outs):
                available = detok_end + self.link_latency_us + self.delivery_overhead_us
                self.trace.chunks.append(
                    ChunkEvent(
                        request=run.req.id,
                        index=spec.index,
                        available_us=available,
                        playback_us=out.playback_us,
                        new_tokens=out.new_tokens,
                    )
                )
                req = run.req
                req.chunks_emitted += 1
                req.covered_tokens += out.new_tokens
                req.playback_emitted_us += out.playback_us
                if req.first_chunk_us is None:
                    req.first_chunk_us = available
                    req.phase = Phase.STEADY_STATE
                if req.done_generating and req.covered_tokens >= req.target_output_tokens:
                    req.phase = Phase.FINISHED

        self.trace.decisions.append(record)

        for rid in list(self.live):
            if self.live[rid].req.phase is Phase.FINISHED:
                self.trace.requests.append(self.live.pop(rid).req)

        if self.pipeline is PipelineMode.SYNCHRONOUS:
            return last_end
        # Asynchronous: the next decision is prepared while this iteration's
        # device work runs, so it is stamped at this iteration's first task.
        assert first_task_start is not None
        return first_task_start

    # -- full run ------------------------------------------------------------

    def run(self, arrivals: Sequence[tuple[int, ArrivalSpec]]) -> Trace:
        """Simulate to completion of all admitted requests.

        ``arrivals`` is a list of (request_id, spec) in arrival order.
        """
        pending = list(arrivals)
        pending.sort(key=lambda p: (p[1].arrival_us, p[0]))
        idx = 0
        now = 0

        def admit_due(now_us: int) -> int:
            i = idx
            while i < len(pending) and pending[i][1].arrival_us <= now_us:
                if len(self.live) >= self.policy.max_live_requests:
                    break
                rid, spec = pending[i]
                self.admit(rid, spec)
                i += 1
            return i

        while idx < len(pending) or self.live:
            if not self.live:
                now = max(now, pending[idx][1].arrival_us)
            idx = admit_due(now)
            if not self.live:
                continue
            snapshot = self._queue_snapshot()
            decision = schedule(snapshot, now, self.policy)
            if decision.empty:
                if idx < len(pending):
                    now = max(now, pending[idx][1].arrival_us)
                    continue
                raise EngineStall(f"no schedulable work with {len(self.live)} live requests")
            next_now = self.run_iteration(decision, now)
            if next_now < now:
                raise EngineStall("iteration moved the clock backwards")
            now = next_now

        self.trace.requests.sort(key=lambda r: r.id)
        self.trace.chunks.sort(key=lambda c: (c.available_us, c.request, c.index))
        return self.trace


def replay_makespan(
    records: Sequence[DecisionRecord],
    profile: ModelProfile,
    pipeline: PipelineMode,
) -> int:
    """Recompute the device-timeline makespan for a recorded decision log.

    Used for differential pipeline checks: the same decisions replayed in
    asynchronous mode can never finish later than in synchronous mode.
    """
    host_us = to_us(profile.cost.host_overhead_s)
    device_busy = 0
    host_free = 0
    now = 0
    kind_map = {
        "prefill": StageKind.PREFILL,
        "decode": StageKind.DECODE,
        "depth": StageKind.DEPTH_DECODE,
        "detok": StageKind.DETOKENIZE,
    }
    for record in records:
        if pipeline is PipelineMode.SYNCHRONOUS:
            host_done = now + host_us
        else:
            host_done = max(host_free, now) + host_us
            host_free = host_done
        first_start = None
        last_end = host_done
        for kind_name, batch, extra in record.tasks:
            latency = max(1, to_us(stage_latency(profile.cost, kind_map[kind_name], batch, extra)))
            start = max(device_busy, host_done)
            end = start + latency
            device_busy = end
            last_end = max(last_end, end)
            if first_start is None:
                first_start = start
        now = last_end if pipeline is PipelineMode.SYNCHRONOUS else (first_start or host_done)
    return device_busy


def merge_traces(traces: Sequence[Trace]) -> Trace:
    merged = Trace()
    for t in traces:
        merged.requests.extend(t.requests)
        merged.chunks.extend(t.chunks)
        merged.device_spans.extend(t.device_spans)
        merged.decisions.extend(t.decisions)
    merged.requests.sort(key=lambda r: r.id)
    merged.chunks.sort(key=lambda c: (c.available_us, c.request, c.index))
    merged.device_spans.sort(key=lambda s: (s.start_us, s.device))
    return merged


def run_scenario(
    arrivals: Sequence[ArrivalSpec],
    profile: ModelProfile,
    policy: PolicyConfig,
    topology: Topology,
    pipeline: PipelineMode,
    seed: int,
    delivery_overhead_us: int = 0,
) -> Trace:
    """Run one full virtual-clock scenario and return its trace.

    Bit-deterministic for a fixed seed: arrivals, routing, sampled tokens and
    every event timestamp repeat exactly.
    """
    indexed = list(enumerate(arrivals))

    if topology.kind is TopologyKind.DATA_PARALLEL:
        router = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), 3]))
        )
        per_instance: list[list[tuple[int, ArrivalSpec]]] = [[] for _ in range(topology.instances)]
        for rid, spec in indexed:
            per_instance[route_dp(rid, topology.instances, router)].append((rid, spec))
        traces = []
        for i, batch in enumerate(per_instance):
            engine = SimEngine(
                profile,
                policy,
                pipeline,
                seed,
                delivery_overhead_us=delivery_overhead_us,
                lm_device_id=i,
            )
            traces.append(engine.run(batch))
        return merge_traces(traces)

    engine = SimEngine(
        profile,
        policy,
        pipeline,
        seed,
        disaggregated=topology.kind is TopologyKind.DISAGGREGATED,
        link_latency_us=topology.link_latency_us,
        delivery_overhead_us=delivery_overhead_us,
    )
    return engine.run(indexed)
