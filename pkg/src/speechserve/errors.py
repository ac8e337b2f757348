"""Exception hierarchy shared across the package."""


class SpeechServeError(Exception):
    """Base class for all package errors."""


class NoChunkDelivered(SpeechServeError):
    """A request produced zero audio chunks (e.g. run cutoff)."""


class EmptySamples(SpeechServeError):
    """Percentile requested over an empty sample list."""


class InvalidTokenCount(SpeechServeError):
    """Token count outside the valid range for the operation."""


class InvalidRate(SpeechServeError):
    """Token rate must be strictly positive."""


class PromptTooLong(SpeechServeError):
    """Prompt exceeds the profile's context limit."""


class BatchTooLarge(SpeechServeError):
    """Stage batch exceeds the profile's batch limit."""


class EmptyBatch(SpeechServeError):
    """Stage invoked with batch size zero."""


class DegenerateDistribution(SpeechServeError):
    """All logits are -inf after truncation; nothing to sample."""


class CodebookMismatch(SpeechServeError):
    """Token ids do not match the profile's codebook count."""


class WindowRuleViolation(SpeechServeError):
    """Detokenizer window does not match the profile's chunk rule."""


class CacheMissing(SpeechServeError):
    """Detokenize called without the request's cache."""


class DepthStageUnsupported(SpeechServeError):
    """Depth forward invoked on a profile without a depth stage."""


class UnknownProfile(SpeechServeError):
    """Built-in profile name not recognized."""


class BadDistribution(SpeechServeError):
    """Length distribution spec is malformed."""


class NoInstances(SpeechServeError):
    """Data-parallel routing requires at least one instance."""


class ConfigError(SpeechServeError):
    """Scenario configuration is invalid."""


class DependencyViolation(SpeechServeError):
    """Internal pipeline ordering assertion failed."""


class EngineStall(SpeechServeError):
    """Engine made no progress with live requests outstanding."""
