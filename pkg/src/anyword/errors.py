"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations


class AnywordError(Exception):
    """Base class; ``stage`` is filled in by the pipeline when it re-raises."""

    stage: str | None = None


# parsing
class EmptyExpression(AnywordError, ValueError):
    pass


class NoEntityFound(AnywordError, ValueError):
    pass


class BackendUnavailable(AnywordError, RuntimeError):
    def __init__(self, message: str, raw_reply: str | None = None):
        super().__init__(message)
        self.raw_reply = raw_reply


class InsufficientSynonyms(AnywordError, ValueError):
    pass


# diffusion
class ScheduleMismatch(AnywordError, ValueError):
    pass


class NonFiniteLatent(AnywordError, FloatingPointError):
    pass


class ShapeMismatch(AnywordError, ValueError):
    pass


class BackendFailure(AnywordError, RuntimeError):
    pass


class IndexOutOfRange(AnywordError, IndexError):
    pass


# embedding optimisation
class EncoderUnavailable(AnywordError, RuntimeError):
    pass


class NonFiniteLoss(AnywordError, FloatingPointError):
    def __init__(self, step: int, last_finite=None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_finite = last_finite


class EmptySampleSet(AnywordError, ValueError):
    pass


class AdapterFormatError(AnywordError, ValueError):
    pass


# prompt mining
class DegenerateMap(AnywordError, ValueError):
    def __init__(self, message: str, token_index: int | None = None):
        super().__init__(message)
        self.token_index = token_index


class EmptyMask(AnywordError, ValueError):
    def __init__(self, message: str, token_index: int | None = None):
        super().__init__(message)
        self.token_index = token_index


class NoExteriorCells(AnywordError, ValueError):
    pass


# segmentor
class InvalidPrompt(AnywordError, ValueError):
    pass


class MissingEntityMask(AnywordError, KeyError):
    pass


# evaluation / ingestion
class EmptyDataset(AnywordError, ValueError):
    pass


class LengthMismatch(AnywordError, ValueError):
    pass


class ProtocolError(AnywordError, RuntimeError):
    pass
