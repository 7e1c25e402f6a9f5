"""Exception types raised across the package."""


class NSExplainError(Exception):
    """Base class for all package errors."""


class ShapeError(NSExplainError, ValueError):
    """Tensor dimensions are inconsistent with what an operation expects."""


class ModelFormatError(NSExplainError, ValueError):
    """A model manifest or weight blob could not be interpreted."""


class UnknownLayerError(NSExplainError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CapacityError(NSExplainError, ValueError):
    """A request would exceed a hard computational limit."""


class ConfigError(NSExplainError, ValueError):
    pass


class EvaluationError(NSExplainError, RuntimeError):
    """An intervention failed while evaluating a particular cause."""
