from __future__ import annotations
from typing import Any, Iterable, Optional

__all__ = [
    "CapacityError",
    "ConfigurationError",
    "GraphConstructionError",
    "ParseError",
    "TrainingDivergence",
]


class GraphConstructionError(ValueError):
    """Raised when graph parameters violate the factor graph invariants."""


class CapacityError(ValueError):
    """Raised when exhaustive enumeration would exceed the variable cap."""


class ConfigurationError(ValueError):
    """Raised for inconsistent run, training or experiment settings."""


class ParseError(ValueError):
    """Malformed graph or model file.

    Attributes
    ----------
    line_number : Optional[int]
        One-based line on which parsing failed.
    """

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TrainingDivergence(RuntimeError):
    """Every training restart produced a non-finite loss.

    Attributes
    ----------
    report : list
        One outcome record per restart.
    """

    def __init__(self, report: Iterable[Any]) -> None:
        self.report = list(report)
        super().__init__(
            f"Training diverged in all {len(self.report)} restart(s)."
        )
