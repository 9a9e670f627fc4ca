"""Custom exceptions for gda-kit"""
from typing import Optional, Sequence


class GdaError(Exception):
    """Base exception for all gda-kit errors"""
    pass


class TensorError(GdaError):
    """Raised when a tensor violates the dense-array invariants"""
    pass


class DimensionError(TensorError):
    """Raised when operand shapes do not line up"""
    def __init__(self, message: str, shapes: Sequence[tuple] = ()):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(TensorError):
    """Raised when a NaN or Inf shows up in a forward or backward stage"""
    def __init__(self, stage: str, count: int = 0):
        super().__init__(f"Non-finite values in stage '{stage}' ({count} entries)")
        self.stage = stage
        self.count = count


class ConfigurationError(GdaError):
    """Raised when configuration is invalid"""
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class HeadIndexError(GdaError, IndexError):
    """Raised when a head index falls outside its group"""
    pass


class CheckpointError(GdaError):
    """Raised when a checkpoint file or tensor table is malformed"""
    pass


class CorpusError(GdaError):
    """Raised when a training corpus cannot be ingested"""
    pass


class PlanError(GdaError):
    """Raised when a growth plan would break head partnerships"""
    pass


class TrainingAbort(GdaError):
    """Raised when training hits a non-finite loss"""
    def __init__(self, step: int, last_good: Optional[str] = None):
        where = last_good or "<none written>"
        super().__init__(f"Non-finite loss at step {step}; last good checkpoint: {where}")
        self.step = step
        self.last_good = last_good


class TokenRangeError(GdaError, ValueError):
    """Raised when a token id falls outside the vocabulary"""
    pass
