"""Errors — exception hierarchy shared by every engine.

Validation failures stay ``ValueError`` subclasses so callers that only
catch the builtin keep working.
"""

from __future__ import annotations


class DCNASError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DCNASError, ValueError):
    """Invalid experiment config, search-space spec or layer chain."""


class ArchParseError(ConfigurationError):
    """An architecture string could not be parsed.

    Args:
        message: Human-readable reason.
        position: 0-based index of the offending token (``None`` for arity errors).
    """

    def __init__(self, message: str, position: int | None = None) -> None:
        if position is not None:
            message = f"{message} (token {position})"
        super().__init__(message)
        self.position = position


class TrainingDivergenceError(DCNASError, RuntimeError):
    """Loss or parameters became non-finite while training one architecture."""

    def __init__(self, arch_id: int | None, detail: str = "") -> None:
        msg = "supernet training diverged" if arch_id is None else f"training diverged for arch {arch_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.arch_id = arch_id
        self.detail = detail


class StageError(DCNASError):
    """A pipeline stage failed; partial state has been persisted."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage
