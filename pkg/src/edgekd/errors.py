"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EdgeKDError(Exception):
    """Base class for all package errors."""


class DimensionError(EdgeKDError, ValueError):
    """Array shapes do not agree with a model's layer dimensions."""


class NumericError(EdgeKDError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class TrainingDivergence(NumericError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, message: str = "") -> None:
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class SimulationError(EdgeKDError):
    """A protocol phase failed; carries the round and edge it failed in."""

    def __init__(self, round_index: int, edge_id: int | None, cause: BaseException) -> None:
        self.round_index = round_index
        self.edge_id = edge_id
        self.cause = cause
        super().__init__(f"round {round_index}, edge {edge_id}: {type(cause).__name__}: {cause}")


class ConfigError(EdgeKDError, ValueError):
    """Scenario configuration failed validation.

    ``issues`` is a list of dicts with ``field``, ``value``, ``constraint`` and,
    when known, ``line``.
    """

    def __init__(self, issues: list[dict]) -> None:
        self.issues = issues
        lines = []
        for issue in issues:
            where = f"line {issue['line']}: " if issue.get("line") else ""
            lines.append(f"{where}{issue['field']} = {issue['value']!r}: {issue['constraint']}")
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))
