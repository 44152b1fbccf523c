"""Exception types shared across objfuse."""

from typing import Optional


class ObjfuseError(Exception):
    """Base class for objfuse errors."""


class BackendUnavailableError(ObjfuseError, RuntimeError):
    """A diffusion or perception backend could not be loaded or reached."""


class NonFiniteError(ObjfuseError, ValueError):
    """A tensor or loss took a NaN or infinite value."""


class EvaluationError(ObjfuseError, RuntimeError):
    """An objective or probe callback failed for a specific parameter value."""

    def __init__(
        self,
        message: str,
        alpha: Optional[float] = None,
        inject_step: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.alpha = alpha
        self.inject_step = inject_step


class ManifestError(ObjfuseError, ValueError):
    """A dataset manifest is malformed."""


class StageError(ObjfuseError, RuntimeError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage
