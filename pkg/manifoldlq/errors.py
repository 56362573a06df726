from __future__ import annotations

from typing import Any


class ManifoldLQError(Exception):
    """Base class for every error raised by manifoldlq."""


class ValidationError(ManifoldLQError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NotPositive(ValidationError):
    pass


class BadGrid(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(ManifoldLQError):
    pass


class NumericalFailure(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class Singular(NumericalError):
    def __init__(self, message: str, *, path: int | None = None) -> None:
        self.path = path
        super().__init__(message if path is None else f"{message} (path {path})")


class TargetUnreachableFromManifold(ManifoldLQError):
    def __init__(self, message: str, *, result: Any = None) -> None:
        self.result = result
        super().__init__(message)
