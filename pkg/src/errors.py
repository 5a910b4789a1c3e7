"""
Exception and warning types shared across the simulation and estimation code.
"""

from __future__ import annotations

from typing import Iterable, List


class NetsemError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(NetsemError, ValueError):
    """A generator, distribution or estimator parameter is out of range."""


class ValidationError(NetsemError):
    def __init__(self, message: str, violations: Iterable[str] = ()):
        self.violations: List[str] = list(violations)
        if self.violations:
            message = f"{message}: " + "; ".join(self.violations)
        super().__init__(message)


class ExprSyntaxError(NetsemError):
    def __init__(self, message: str, text: str = "", position: int | None = None):
        self.text = text
        self.position = position
        if position is not None:
            pointer = " " * position + "^"
            message = f"{message} at position {position}\n  {text}\n  {pointer}"
        super().__init__(message)


class ModelError(NetsemError):
    """Invalid model construction (forward reference, duplicate node, ...)."""


class EvaluationError(NetsemError):
    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"node {node!r}: {message}" if node else message)


class ScenarioError(NetsemError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None, column: int | None = None):
        self.path = path
        self.line = line
        self.column = column
        where = path or "<scenario>"
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


class EstimationError(NetsemError):
    """Fitting or estimation could not proceed."""


class NetsemWarning(UserWarning):
    pass


class SeparationWarning(NetsemWarning):
    pass


class NetworkOverrideWarning(NetsemWarning):
    pass


class WeightCapWarning(NetsemWarning):
    pass
