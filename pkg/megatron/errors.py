"""Exception hierarchy shared by the attack toolkit."""
from __future__ import annotations

from typing import Any, Optional


class MegatronError(RuntimeError):
    """Base error. ``exit_code`` is what the CLI returns when it surfaces."""

    exit_code = 1

    def __init__(self, message: str, *, payload: Any = None) -> None:
        super().__init__(message)
        self.payload = payload


class DimensionError(MegatronError, ValueError):
    """Raised when tensor shapes disagree with the operation contract."""


class InputError(MegatronError, ValueError):
    """Raised for invalid arguments: empty pools, out-of-range values, bad rects."""


class ContractError(MegatronError):
    """Raised when a caller breaks a pre-condition (missing gradients, non-scalar loss)."""


class BoundError(InputError):
    """Raised when a diffusion area would exceed three times the trigger size."""


class UnsupportedError(MegatronError):
    """Raised when a gradient is requested from a non-differentiable setup."""


class OptimizationError(MegatronError):
    """Raised when an optimisation loop produces a non-finite loss."""

    def __init__(self, message: str, *, diagnostic: Optional[dict] = None) -> None:
        super().__init__(message, payload=diagnostic)
        self.diagnostic = diagnostic or {}


class MetricUnavailable(MegatronError):
    """Raised when an external metric provider cannot produce a value."""


class ConfigError(MegatronError):
    exit_code = 2

    def __init__(self, message: str, *, key_path: Optional[str] = None) -> None:
        super().__init__(message)
        self.key_path = key_path


class MissingArtifactError(MegatronError):
    """Raised when an upstream artifact is absent or fails its hash check."""

    exit_code = 3

    def __init__(self, message: str, *, artifact: Optional[str] = None) -> None:
        super().__init__(message)
        self.artifact = artifact


class UnsafeOverwriteError(MegatronError):
    exit_code = 4


class StageError(MegatronError):
    """Wraps any failure inside a pipeline stage with the stage name."""

    def __init__(self, stage: str, message: str, *, exit_code: int = 1) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


__all__ = [
    "BoundError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "InputError",
    "MegatronError",
    "MetricUnavailable",
    "MissingArtifactError",
    "OptimizationError",
    "StageError",
    "UnsafeOverwriteError",
    "UnsupportedError",
]
