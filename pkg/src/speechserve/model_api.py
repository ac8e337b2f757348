"""Unified model-execution interface.

This is the abstraction boundary between engine/scheduler logic and model
specifics: token frames (ids/masks/features), sampling with temperature,
top-k, top-p and windowed repetition penalty, chunk-window detokenization
with per-request caches, and an optional depth-wise stage for multi-codebook
models. Executors behind this interface are synthetic: logits are a seeded
hash of (request seed, step, codebook), so full runs are bit-reproducible
while the sampling math still operates on real numbers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Protocol, Sequence

import numpy as np

from .core import Phase, Request, RequestId
from .errors import (
    BatchTooLarge,
    CacheMissing,
    CodebookMismatch,
    DegenerateDistribution,
    DepthStageUnsupported,
    InvalidTokenCount,
    PromptTooLong,
    WindowRuleViolation,
)

if TYPE_CHECKING:
    from .profiles import ModelProfile, WindowSpec

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer over python ints."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix_array(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(_GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def request_seed(run_seed: int, request_id: RequestId) -> int:
    return _mix64(_mix64(run_seed & _MASK64) ^ (request_id & _MASK64))


def synthetic_logits(seed: int, step: int, codebook: int, vocab: int) -> np.ndarray:
    """Deterministic pseudo-random logits in [-4, 4) for one (request, step, codebook)."""
    base = _mix64((seed ^ (step * 0xD1B54A32D192ED03) ^ (codebook * 0x8CB92BA72F3D8DD7)) & _MASK64)
    ids = np.arange(1, vocab + 1, dtype=np.uint64)
    h = _mix_array(ids * np.uint64(_GOLDEN) ^ np.uint64(base))
    unit = (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return unit * 8.0 - 4.0


def synthetic_logits_batch(seeds: Sequence[int], steps: Sequence[int], codebook: int, vocab: int) -> np.ndarray:
    """Vectorized ``synthetic_logits`` for a batch; row i matches the scalar call."""
    bases = np.array(
        [
            _mix64((s ^ (st * 0xD1B54A32D192ED03) ^ (codebook * 0x8CB92BA72F3D8DD7)) & _MASK64)
            for s, st in zip(seeds, steps)
        ],
        dtype=np.uint64,
    )
    ids = np.arange(1, vocab + 1, dtype=np.uint64)
    h = _mix_array(ids[None, :] * np.uint64(_GOLDEN) ^ bases[:, None])
    unit = (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return unit * 8.0 - 4.0


@dataclass
class TokenFrame:
    """Input contract of the LM forward pass: ids plus optional masks/features.

    ``ids`` has shape [positions, codebooks]; ``masks``, when present, matches
    it; ``features`` is [positions, feature_dim]. How masks and features are
    consumed is model-defined, so synthetic profiles only carry them through
    shape checks.
    """

    ids: np.ndarray
    masks: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def validate(self, codebooks: int) -> None:
        if self.ids.ndim != 2 or self.ids.shape[1] != codebooks:
            raise CodebookMismatch(
                f"frame ids shape {self.ids.shape} does not match {codebooks} codebooks"
            )
        if self.masks is not None and self.masks.shape != self.ids.shape:
            raise CodebookMismatch("masks shape must equal ids shape")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0  # 0 means greedy
    top_k: Optional[int] = None  # None disables
    top_p: float = 1.0
    repetition_penalty: float = 1.0
    penalty_window: int = 64

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 or None")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")


class _RingWindow:
    """Fixed-size window of recent token ids with an O(1) membership vector."""

    def __init__(self, capacity: int, vocab: int):
        self.capacity = capacity
        self.buf: list[int] = []
        self.pos = 0
        self.counts = np.zeros(vocab, dtype=np.int32)

    def append(self, token: int) -> None:
        if self.capacity == 0:
            return
        if len(self.buf) < self.capacity:
            self.buf.append(token)
        else:
            evicted = self.buf[self.pos]
            self.counts[evicted] -= 1
            self.buf[self.pos] = token
            self.pos = (self.pos + 1) % self.capacity
        self.counts[token] += 1

    def __len__(self) -> int:
        return len(self.buf)

    @property
    def mask(self) -> np.ndarray:
        return self.counts > 0


@dataclass
class SamplingState:
    """Per-request sampling cache: recent-token windows per codebook plus the rng."""

    seed: int
    rng: np.random.Generator
    windows: list[_RingWindow]


@dataclass
class DetokenizerCache:
    """Opaque per-request detokenizer state.

    Synthetic executors carry the previous window's token ids (standing in for
    KV/activation caches) and a byte-size accounting field. Never shared
    across requests.
    """

    request: RequestId
    window_ids: Optional[np.ndarray] = None
    bytes_held: int = 0
    calls: int = 0


class StageKind(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    DETOKENIZE = "detok"
    DEPTH_DECODE = "depth"


@dataclass
class StageBatch:
    """One scheduled batch for a single stage; all requests share one profile."""

    request_ids: list[RequestId]
    frames: list[TokenFrame]
    kind: StageKind
    seeds: list[int] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    prompt_tokens: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.request_ids)


class Executor(Protocol):
    """Model executor behind the unified interface.

    Implementations must be safe to call concurrently for different requests;
    per-request state (SamplingState, DetokenizerCache) is owned by exactly
    one engine loop at a time.
    """

    profile: "ModelProfile"

    def forward(self, batch: StageBatch) -> tuple[np.ndarray, float]:
        """Run prefill/decode; returns (logits [batch, codebooks, vocab], latency seconds)."""
        ...

    def detokenize_windows(
        self,
        batch: StageBatch,
        specs: Sequence["WindowSpec"],
        windows: Sequence[np.ndarray],
        caches: Sequence[DetokenizerCache],
    ) -> tuple[list["AudioChunkOut"], float]:
        ...

    def depth_logits(self, seed: int, step: int, codebook: int) -> np.ndarray:
        ...

    def depth_latency(self, batch_size: int) -> float:
        ...


@dataclass(frozen=True)
class AudioChunkOut:
    """Placeholder waveform descriptor produced by one detokenizer call."""

    request: RequestId
    new_tokens: int
    playback_us: int


def preprocess(
    prompt_tokens: int,
    profile: "ModelProfile",
    seed: int,
    request_id: RequestId,
    arrival_us: int = 0,
    target_output_tokens: int = 1,
) -> tuple[Request, DetokenizerCache, SamplingState]:
    """Initialize a request: startup phase, fresh caches, per-request rng stream."""
    if prompt_tokens < 1:
        raise InvalidTokenCount(f"prompt_tokens must be >= 1, got {prompt_tokens}")
    if prompt_tokens > profile.context_limit:
        raise PromptTooLong(
            f"prompt of {prompt_tokens} tokens exceeds context limit {profile.context_limit}"
        )
    if target_output_tokens < 1:
        raise InvalidTokenCount("target_output_tokens must be >= 1")

    rseed = request_seed(seed, request_id)
    state = SamplingState(
        seed=rseed,
        rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _MASK64, request_id]))),
        windows=[
            _RingWindow(profile.sampling_defaults.penalty_window, profile.vocab_size)
            for _ in range(profile.codebooks)
        ],
    )
    cache = DetokenizerCache(request=request_id)
    request = Request(
        id=request_id,
        arrival_us=arrival_us,
        prompt_tokens=prompt_tokens,
        target_output_tokens=target_output_tokens,
        phase=Phase.STARTUP,
        sampling_state=state,
        detok_cache=cache,
    )
    return request, cache, state


def lm_forward(batch: StageBatch, executor: Executor) -> tuple[np.ndarray, float]:
    """Run the backbone for a prefill or decode batch.

    Returns per-request logits, shaped [batch, codebooks, vocab], and the
    stage's modeled latency in seconds.
    """
    if batch.kind not in (StageKind.PREFILL, StageKind.DECODE):
        raise ValueError(f"lm_forward got {batch.kind}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if len(batch) > executor.profile.max_lm_batch:
        raise BatchTooLarge(
            f"batch of {len(batch)} exceeds max LM batch {executor.profile.max_lm_batch}"
        )
    for frame in batch.frames:
        frame.validate(executor.profile.codebooks)
    return executor.forward(batch)


def next_input(token_ids: Sequence[int], profile: "ModelProfile") -> TokenFrame:
    """Build the next forward pass's single-position frame from sampled ids."""
    if len(token_ids) != profile.codebooks:
        raise CodebookMismatch(
            f"got {len(token_ids)} ids for {profile.codebooks} codebooks"
        )
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, profile.codebooks)
    masks = np.ones_like(ids, dtype=bool)
    features = None
    if profile.feature_dim:
        features = np.zeros((1, profile.feature_dim), dtype=np.float64)
    return TokenFrame(ids=ids, masks=masks, features=features)


def _truncate_and_sample(
    scaled: np.ndarray,
    params: SamplingParams,
    rng: np.random.Generator,
) -> int:
    """Top-k / top-p truncation and a CDF draw over the renormalized remainder."""
    order = np.argsort(-scaled, kind="stable")  # descending, ties by lowest id
    if params.top_k is not None:
        order = order[: params.top_k]
    kept = scaled[order]
    finite = np.isfinite(kept)
    if not finite.any():
        raise DegenerateDistribution("all logits are -inf after truncation")
    shifted = kept - kept[finite].max()
    probs = np.exp(shifted)  # exp(-inf) underflows cleanly to 0
    total = probs.sum()
    if total <= 0:
        raise DegenerateDistribution("probability mass vanished")
    probs = probs / total
    if params.top_p < 1.0:
        cum = np.cumsum(probs)
        cut = int(np.searchsorted(cum, params.top_p, side="left")) + 1
        cut = min(cut, len(order))
        order = order[:cut]
        probs = probs[:cut]
        probs = probs / probs.sum()
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), r, side="right"))
    return int(order[min(idx, len(order) - 1)])


def apply_repetition_penalty(logits: np.ndarray, penalty: float, window: _RingWindow) -> np.ndarray:
    """Divide positive / multiply negative logits of tokens in the recent window."""
    if penalty == 1.0 or len(window) == 0:
        return logits
    mask = window.mask
    out = logits.copy()
    positive = mask & (out > 0)
    negative = mask & ~(out > 0)
    out[positive] = out[positive] / penalty
    out[negative] = out[negative] * penalty
    return out


def sample(
    logits: np.ndarray,
    params: SamplingParams,
    state: SamplingState,
    codebook: int = 0,
) -> int:
    """Draw the next token id from one logits vector.

    Applies, in order: repetition penalty over the recent-token window,
    temperature (0 short-circuits to greedy argmax of the penalized logits),
    top-k, top-p, renormalization, then a draw from the state's rng. The
    chosen token is appended to the window. -inf logits act as masked-out
    entries; NaN or +inf inputs are rejected.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise ValueError("logits must not contain NaN or +inf")
    window = state.windows[codebook]
    arr = apply_repetition_penalty(arr, params.repetition_penalty, window)
    if params.temperature == 0:
        if not np.isfinite(arr).any():
            raise DegenerateDistribution("all logits are -inf")
        token = int(np.argmax(arr))
    else:
        token = _truncate_and_sample(arr / params.temperature, params, state.rng)
    window.append(token)
    return token


def sample_batch(
    logits: np.ndarray,
    params: SamplingParams,
    states: Sequence[SamplingState],
    codebook: int = 0,
) -> list[int]:
    """Batched ``sample`` over rows of a [batch, vocab] matrix.

    Produces exactly the per-row results of calling ``sample`` on each row in
    order (rng draws are still per request).
    """
    return [sample(logits[i], params, states[i], codebook) for i in range(len(states))]


def detokenize(
    batch: StageBatch,
    specs: Sequence["WindowSpec"],
    windows: Sequence[np.ndarray],
    caches: Sequence[Optional[DetokenizerCache]],
    executor: Executor,
) -> tuple[list[AudioChunkOut], float]:
    """Run the detokenizer over per-request token windows.

    Each window must match the profile's chunk rule (chunk_size, plus
    lookahead when the profile requires it; a final flush may be shorter).
    Caches are consumed and updated per request.
    """
    if batch.kind is not StageKind.DETOKENIZE:
        raise ValueError(f"detokenize got {batch.kind}")
    profile = executor.profile
    if len(batch) > profile.max_detok_batch:
        raise BatchTooLarge(
            f"batch of {len(batch)} exceeds max detok batch {profile.max_detok_batch}"
        )
    full = profile.chunk_size + profile.lookahead
    checked: list[DetokenizerCache] = []
    for spec, window, cache in zip(specs, windows, caches):
        if cache is None:
            raise CacheMissing(f"detokenize without cache for request {spec.request}")
        if len(window) != spec.length:
            raise WindowRuleViolation(
                f"window of {len(window)} tokens does not match spec length {spec.length}"
            )
        if spec.final:
            if spec.length > full:
                raise WindowRuleViolation("final flush longer than a full window")
        elif spec.length != full:
            raise WindowRuleViolation(
                f"window of {spec.length} tokens; profile requires {full}"
            )
        checked.append(cache)
    return executor.detokenize_windows(batch, specs, windows, checked)


def depth_forward(
    batch: StageBatch,
    executor: Executor,
    states: Sequence[SamplingState],
) -> tuple[list[list[int]], float]:
    """Fill codebooks 2..n for the current position by autoregressive sampling."""
    profile = executor.profile
    if not profile.has_depth_stage:
        raise DepthStageUnsupported(f"profile {profile.name} has no depth stage")
    if batch.kind is not StageKind.DEPTH_DECODE:
        raise ValueError(f"depth_forward got {batch.kind}")
    params = profile.sampling_defaults
    out: list[list[int]] = []
    for i, state in enumerate(states):
        step = batch.steps[i]
        ids = []
        for codebook in range(1, profile.codebooks):
            logits = executor.depth_logits(state.seed, step, codebook)
            ids.append(sample(logits, params, state, codebook=codebook))
        out.append(ids)
    return out, executor.depth_latency(len(batch))
