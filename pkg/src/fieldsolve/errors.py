"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A user-supplied callback violated its calling contract."""


class ResourceError(RuntimeError):
    """A size cap was exceeded (e.g. dense assembly of a huge graph)."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UnsupportedTopology(ValueError):
    """The operation needs structure (e.g. a grid) the topology lacks."""
