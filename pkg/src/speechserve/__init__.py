"""Streaming-centric serving engine and simulator for speech LM pipelines."""

from .core import (
    ChunkEvent,
    MetricsReport,
    Phase,
    Request,
    Trace,
    build_report,
    chunk_playback_duration,
    percentile,
    ttfa,
    viability_fraction,
)
from .engine import PipelineMode, SimEngine, Topology, TopologyKind, run_scenario
from .model_api import SamplingParams, SamplingState, sample
from .profiles import ModelProfile, SyntheticExecutor, builtin_profile, chunk_ready
from .scheduler import Policy, PolicyConfig, PriorityClass, classify, soft_deadline
from .workload import WorkloadSpec, build_workload, poisson_arrivals

__version__ = "0.1.0"

__all__ = [
    "ChunkEvent",
    "MetricsReport",
    "ModelProfile",
    "Phase",
    "PipelineMode",
    "Policy",
    "PolicyConfig",
    "PriorityClass",
    "Request",
    "SamplingParams",
    "SamplingState",
    "SimEngine",
    "SyntheticExecutor",
    "Topology",
    "TopologyKind",
    "Trace",
    "WorkloadSpec",
    "build_report",
    "build_workload",
    "builtin_profile",
    "chunk_playback_duration",
    "chunk_ready",
    "classify",
    "percentile",
    "poisson_arrivals",
    "run_scenario",
    "sample",
    "soft_deadline",
    "ttfa",
    "viability_fraction",
    "__version__",
]
