"""Request stream generation: Poisson arrivals plus length distributions.

Output lengths are drawn up front so the expected audio duration per request
(and with it the viability pressure of a workload) stays controllable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import US_PER_S
from .errors import BadDistribution


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: fixed, uniform-integer, or empirical histogram."""

    kind: str  # fixed | uniform | empirical
    value: int = 0
    lo: int = 0
    hi: int = 0
    values: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value < 1:
                raise BadDistribution("fixed length must be >= 1")
        elif self.kind == "uniform":
            if not (1 <= self.lo <= self.hi):
                raise BadDistribution(f"uniform bounds must satisfy 1 <= lo <= hi, got [{self.lo}, {self.hi}]")
        elif self.kind == "empirical":
            if not self.values or len(self.values) != len(self.weights):
                raise BadDistribution("empirical histogram needs matching values and weights")
            if min(self.values) < 1 or min(self.weights) < 0 or sum(self.weights) <= 0:
                raise BadDistribution("empirical histogram weights must be >= 0 with positive sum")
        else:
            raise BadDistribution(f"unknown distribution kind {self.kind!r}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        probs = np.asarray(self.weights, dtype=np.float64)
        probs = probs / probs.sum()
        return int(self.values[rng.choice(len(self.values), p=probs)])


def fixed(n: int) -> LengthDist:
    return LengthDist(kind="fixed", value=n)


def uniform_int(lo: int, hi: int) -> LengthDist:
    return LengthDist(kind="uniform", lo=lo, hi=hi)


def empirical_from_csv(path: str) -> LengthDist:
    """Load a two-column (length, weight) CSV histogram."""
    values: list[int] = []
    weights: list[float] = []
    try:
        with open(path) as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                values.append(int(row[0]))
                weights.append(float(row[1]))
    except (OSError, ValueError, IndexError) as exc:
        raise BadDistribution(f"cannot load histogram {path}: {exc}") from exc
    return LengthDist(kind="empirical", values=tuple(values), weights=tuple(weights))


# Defaults tuned for roughly 8 seconds of audio per request at each profile's
# token rate, keeping perceived-duration pressure comparable across profiles.
DEFAULT_OUTPUT_TOKENS = {
    "cosy_like": 200,
    "step_audio_like": 200,
    "orpheus_like": 688,
    "depth_like": 100,
}


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float  # requests per second
    duration_s: float = 60.0
    prompt_dist: LengthDist = field(default_factory=lambda: fixed(50))
    output_dist: LengthDist = field(default_factory=lambda: fixed(200))
    seed: int = 0
    offline_count: int = 0  # > 0: that many requests all arriving at t=0

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if self.duration_s <= 0:
            raise ValueError("duration must be > 0")


@dataclass(frozen=True)
class ArrivalSpec:
    arrival_us: int
    prompt_tokens: int
    target_output_tokens: int


def _workload_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), stream])))


def poisson_arrivals(rate: float, duration_s: float, seed: int) -> list[int]:
    """Arrival times (us): i.i.d. exponential gaps with mean 1/rate, cut at duration.

    Times are strictly increasing on the microsecond clock; coincident draws
    are nudged forward by one tick.
    """
    if rate < 0:
        raise ValueError("rate must be >= 0")
    if rate == 0:
        return []
    rng = _workload_rng(seed, 1)
    out: list[int] = []
    t = 0.0
    prev = -1
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= duration_s:
            break
        t_us = int(round(t * US_PER_S))
        if t_us <= prev:
            t_us = prev + 1
        out.append(t_us)
        prev = t_us
    return out


def sample_request(spec: WorkloadSpec, arrival_us: int, rng: np.random.Generator) -> ArrivalSpec:
    return ArrivalSpec(
        arrival_us=arrival_us,
        prompt_tokens=spec.prompt_dist.sample(rng),
        target_output_tokens=spec.output_dist.sample(rng),
    )


def build_workload(spec: WorkloadSpec) -> list[ArrivalSpec]:
    if spec.offline_count > 0:
        times: Sequence[int] = [0] * spec.offline_count
    else:
        times = poisson_arrivals(spec.rate, spec.duration_s, spec.seed)
    rng = _workload_rng(spec.seed, 2)
    return [sample_request(spec, t, rng) for t in times]
