from __future__ import annotations

from typing import Any, Optional


class CellTrackError(Exception):
    """Base class for every error raised by celltrack_sr."""


class ShapeError(CellTrackError, ValueError):
    pass


class ParameterError(CellTrackError, ValueError):
    pass


class ConfigError(CellTrackError, ValueError):
    pass


class ContractError(CellTrackError):
    pass


class FormatError(CellTrackError):
    pass


class SolverDivergedError(CellTrackError, RuntimeError):
    def __init__(self, message: str, trace: Optional[Any] = None):
        super().__init__(message)
        # partial SolverTrace up to the failing iteration
        self.trace = trace
