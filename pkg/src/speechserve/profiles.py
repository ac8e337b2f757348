"""Synthetic executors and the built-in model profiles.

Each profile stands in for one SpeechLM family: a token rate, codebook count,
chunking rule, and an affine latency cost model replacing GPU inference. The
cost coefficients below are synthetic calibration knobs, not measured ground
truth; orderings (e.g. step_audio's large backbone being slowest, cosy/step
detokenization being several times costlier than orpheus's) are what matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import RequestId, playback_us_for
from .errors import EmptyBatch, UnknownProfile
from .model_api import (
    AudioChunkOut,
    DetokenizerCache,
    SamplingParams,
    StageBatch,
    StageKind,
    synthetic_logits,
    synthetic_logits_batch,
)


@dataclass(frozen=True)
class CostModel:
    """Affine per-stage latency model, all coefficients in seconds.

    prefill  = a_p + b_p * prompt_tokens + c_p * batch_size
    decode   = a_d + b_d * batch_size
    detok    = a_t + b_t * batch_size + c_t * window_tokens
    depth    = a_dd + b_dd * batch_size (zero for profiles without the stage)

    ``ref_window_tokens`` models detokenizers that re-consume reference-audio
    tokens on every call, as a constant addition to each request's window.
    """

    a_p: float
    b_p: float
    c_p: float
    a_d: float
    b_d: float
    a_t: float
    b_t: float
    c_t: float
    a_dd: float = 0.0
    b_dd: float = 0.0
    host_overhead_s: float = 0.0
    ref_window_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("a_p", "b_p", "c_p", "a_d", "b_d", "a_t", "b_t", "c_t", "a_dd", "b_dd", "host_overhead_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"cost coefficient {name} must be >= 0")

    def prefill_latency(self, prompt_tokens: int, batch_size: int) -> float:
        if batch_size < 1:
            raise EmptyBatch("prefill batch must be >= 1")
        return self.a_p + self.b_p * prompt_tokens + self.c_p * batch_size

    def decode_step_latency(self, batch_size: int) -> float:
        if batch_size < 1:
            raise EmptyBatch("decode batch must be >= 1")
        return self.a_d + self.b_d * batch_size

    def detok_latency(self, batch_size: int, window_tokens: int) -> float:
        if batch_size < 1:
            raise EmptyBatch("detok batch must be >= 1")
        tokens = window_tokens + self.ref_window_tokens * batch_size
        return self.a_t + self.b_t * batch_size + self.c_t * tokens

    def depth_step_latency(self, batch_size: int) -> float:
        if batch_size < 1:
            raise EmptyBatch("depth batch must be >= 1")
        return self.a_dd + self.b_dd * batch_size


@dataclass(frozen=True)
class ModelProfile:
    name: str
    token_rate: float  # audio tokens per second of speech
    codebooks: int
    chunk_size: int
    overlap: int
    lookahead: int
    stateful_detok: bool
    has_depth_stage: bool
    max_lm_batch: int
    max_detok_batch: int
    sampling_defaults: SamplingParams
    cost: CostModel
    vocab_size: int = 64
    context_limit: int = 8192
    feature_dim: int = 0

    def __post_init__(self) -> None:
        if self.chunk_size - self.overlap < 1:
            raise ValueError("stride = chunk_size - overlap must be >= 1")
        if self.lookahead < 0 or self.overlap < 0:
            raise ValueError("overlap and lookahead must be >= 0")

    @property
    def stride(self) -> int:
        return self.chunk_size - self.overlap

    def with_cost(self, cost: CostModel) -> "ModelProfile":
        return replace(self, cost=cost)


@dataclass(frozen=True)
class WindowSpec:
    """One ready detokenizer window: token range plus the audio it advances."""

    request: RequestId
    index: int  # 1-based chunk ordinal
    start: int
    length: int
    new_tokens: int
    final: bool


# Synthetic calibration knobs (seconds). Not measured hardware numbers; chosen
# so the large backbone is slowest and cosy/step detokenization is several
# times costlier than orpheus's. Override per scenario via cost_overrides.
DEFAULT_COSTS: dict[str, CostModel] = {
    "cosy_like": CostModel(
        a_p=0.010, b_p=0.00002, c_p=0.0005,
        a_d=0.008, b_d=0.00005,
        a_t=0.050, b_t=0.002, c_t=0.00005,
        host_overhead_s=0.003, ref_window_tokens=50,
    ),
    "orpheus_like": CostModel(
        a_p=0.010, b_p=0.00002, c_p=0.0005,
        a_d=0.010, b_d=0.00005,
        a_t=0.005, b_t=0.0003, c_t=0.00001,
        host_overhead_s=0.003,
    ),
    "step_audio_like": CostModel(
        a_p=0.025, b_p=0.00005, c_p=0.001,
        a_d=0.022, b_d=0.00008,
        a_t=0.060, b_t=0.003, c_t=0.00008,
        host_overhead_s=0.004, ref_window_tokens=25,
    ),
    "depth_like": CostModel(
        a_p=0.008, b_p=0.00002, c_p=0.0005,
        a_d=0.006, b_d=0.00005,
        a_t=0.015, b_t=0.001, c_t=0.00005,
        a_dd=0.002, b_dd=0.00002,
        host_overhead_s=0.003,
    ),
}

BUILTIN_PROFILE_NAMES = ("cosy_like", "orpheus_like", "step_audio_like", "depth_like")


def builtin_profile(name: str) -> ModelProfile:
    """Built-in profiles; the first three carry the published model constants."""
    if name == "cosy_like":
        return ModelProfile(
            name=name,
            token_rate=25.0,
            codebooks=1,
            chunk_size=15,
            overlap=0,
            lookahead=0,
            stateful_detok=True,
            has_depth_stage=False,
            max_lm_batch=128,
            max_detok_batch=128,
            sampling_defaults=SamplingParams(
                temperature=0.8, top_p=0.95, top_k=50, repetition_penalty=1.1
            ),
            cost=DEFAULT_COSTS[name],
        )
    if name == "orpheus_like":
        return ModelProfile(
            name=name,
            token_rate=86.0,
            codebooks=1,
            chunk_size=28,
            overlap=21,
            lookahead=0,
            stateful_detok=False,
            has_depth_stage=False,
            max_lm_batch=128,
            max_detok_batch=128,
            sampling_defaults=SamplingParams(
                temperature=0.6, top_p=0.8, top_k=None, repetition_penalty=1.3
            ),
            cost=DEFAULT_COSTS[name],
        )
    if name == "step_audio_like":
        return ModelProfile(
            name=name,
            token_rate=25.0,
            codebooks=1,
            chunk_size=25,
            overlap=0,
            lookahead=3,
            stateful_detok=True,
            has_depth_stage=False,
            max_lm_batch=32,
            max_detok_batch=32,
            sampling_defaults=SamplingParams(
                temperature=0.7, top_p=0.9, top_k=None, repetition_penalty=1.05
            ),
            cost=DEFAULT_COSTS[name],
        )
    if name == "depth_like":
        # Exercises the depth-forward path; constants are synthetic.
        return ModelProfile(
            name=name,
            token_rate=12.5,
            codebooks=4,
            chunk_size=10,
            overlap=0,
            lookahead=0,
            stateful_detok=True,
            has_depth_stage=True,
            max_lm_batch=64,
            max_detok_batch=64,
            sampling_defaults=SamplingParams(
                temperature=0.8, top_p=0.95, top_k=None, repetition_penalty=1.0
            ),
            cost=DEFAULT_COSTS[name],
        )
    raise UnknownProfile(f"unknown profile {name!r}; expected one of {BUILTIN_PROFILE_NAMES}")


def chunk_ready(
    tokens_generated: int,
    chunks_emitted: int,
    profile: ModelProfile,
    stream_ended: bool,
    request: RequestId = 0,
) -> Optional[WindowSpec]:
    """Next ready detokenizer window, if any.

    Chunk j is ready once chunk_size + (j-1)*stride + lookahead tokens exist;
    the lookahead requirement is waived at stream end, and a final flush covers
    whatever uncovered tokens remain.
    """
    stride = profile.stride
    j = chunks_emitted + 1
    covered = 0 if chunks_emitted == 0 else profile.chunk_size + (chunks_emitted - 1) * stride
    need_full = profile.chunk_size + (j - 1) * stride
    new_tokens = profile.chunk_size if j == 1 else stride
    start = 0 if j == 1 else covered - profile.overlap

    if not stream_ended:
        if tokens_generated >= need_full + profile.lookahead:
            return WindowSpec(
                request=request,
                index=j,
                start=start,
                length=profile.chunk_size + profile.lookahead,
                new_tokens=new_tokens,
                final=False,
            )
        return None

    remaining = tokens_generated - covered
    if remaining <= 0:
        return None
    if tokens_generated >= need_full:
        # Full chunk with the lookahead waived; window may stop at stream end.
        length = min(profile.chunk_size + profile.lookahead, tokens_generated - start)
        return WindowSpec(
            request=request,
            index=j,
            start=start,
            length=length,
            new_tokens=new_tokens,
            final=covered + new_tokens >= tokens_generated,
        )
    # Final flush: everything not yet covered, plus overlap history if any.
    flush_start = max(0, covered - profile.overlap)
    return WindowSpec(
        request=request,
        index=j,
        start=flush_start,
        length=tokens_generated - flush_start,
        new_tokens=remaining,
        final=True,
    )


def stage_latency(cost: CostModel, kind: StageKind, batch_size: int, extra: int = 0) -> float:
    """Evaluate the affine latency for one stage; ``extra`` is prompt or window tokens."""
    if batch_size < 1:
        raise EmptyBatch(f"{kind.value} batch must be >= 1")
    if kind is StageKind.PREFILL:
        return cost.prefill_latency(extra, batch_size)
    if kind is StageKind.DECODE:
        return cost.decode_step_latency(batch_size)
    if kind is StageKind.DETOKENIZE:
        return cost.detok_latency(batch_size, extra)
    if kind is StageKind.DEPTH_DECODE:
        return cost.depth_step_latency(batch_size)
    raise ValueError(f"unknown stage {kind}")


class SyntheticExecutor:
    """Cost-model executor: hash-derived logits plus affine stage latencies.

    Stateless apart from the profile, so one instance may serve any number of
    engine loops concurrently for different requests.
    """

    def __init__(self, profile: ModelProfile):
        self.profile = profile

    def forward(self, batch: StageBatch) -> tuple[np.ndarray, float]:
        profile = self.profile
        vocab = profile.vocab_size
        n = len(batch)
        logits = np.empty((n, profile.codebooks, vocab), dtype=np.float64)
        for codebook in range(profile.codebooks):
            logits[:, codebook, :] = synthetic_logits_batch(
                batch.seeds, batch.steps, codebook, vocab
            )
        if batch.kind is StageKind.PREFILL:
            latency = self.profile.cost.prefill_latency(sum(batch.prompt_tokens), n)
        else:
            latency = self.profile.cost.decode_step_latency(n)
        return logits, latency

    def detokenize_windows(
        self,
        batch: StageBatch,
        specs: Sequence[WindowSpec],
        windows: Sequence[np.ndarray],
        caches: Sequence[DetokenizerCache],
    ) -> tuple[list[AudioChunkOut], float]:
        outputs = []
        total_window = 0
        for spec, window, cache in zip(specs, windows, caches):
            total_window += spec.length
            if self.profile.stateful_detok:
                cache.window_ids = np.array(window, copy=True)
                cache.bytes_held += int(np.asarray(window).size) * 2
            cache.calls += 1
            outputs.append(
                AudioChunkOut(
                    request=spec.request,
                    new_tokens=spec.new_tokens,
                    playback_us=playback_us_for(spec.new_tokens, self.profile.token_rate),
                )
            )
        latency = self.profile.cost.detok_latency(len(batch), total_window)
        return outputs, latency

    def depth_logits(self, seed: int, step: int, codebook: int) -> np.ndarray:
        return synthetic_logits(seed, step, codebook, self.profile.vocab_size)

    def depth_latency(self, batch_size: int) -> float:
        return self.profile.cost.depth_step_latency(batch_size)
