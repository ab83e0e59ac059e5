"""Exception types raised across the package."""


class IQCError(Exception):
    """Base class for all package errors."""


class DimensionError(IQCError, ValueError):
    """Operands act on different numbers of sites."""


class CapacityError(IQCError, ValueError):
    """A dense representation was requested above the configured site limit."""


class DomainError(IQCError, ValueError):
    """An argument lies outside the domain of an operation."""


class ClosureError(IQCError):
    """A commutator left the operator basis."""

    def __init__(self, term, element, result):
        self.term = term
        self.element = element
        self.result = result
        super().__init__(
            f"[{term}, {element}] = {result} leaves the basis"
        )


class EncodingError(IQCError, ValueError):
    """An operator cannot be expressed in the requested basis."""


class NumericalError(IQCError, ArithmeticError):
    """Non-finite input or a failed numerical kernel."""


class AmbiguityError(IQCError):
    """A requested eigenvector is not unique."""
