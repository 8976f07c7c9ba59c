"""
Error taxonomy shared by every stage of the simulator.
"""
from typing import Any, Dict, Optional


class IrstError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigurationError(IrstError, ValueError):
    pass


class ShapeError(IrstError, ValueError):
    pass


class DomainError(IrstError, ValueError):
    pass


class IngestionError(IrstError, ValueError):
    pass


class NumericalFailureError(IrstError, ArithmeticError):
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class DegenerateChannelError(IrstError, ArithmeticError):
    pass


class InvariantViolationError(IrstError, RuntimeError):
    pass


class PipelineStageError(IrstError):
    """Raised by the end-to-end pipeline, labelled with the failing stage."""

    def __init__(self, stage: str, cause: IrstError):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
