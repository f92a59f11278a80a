class DashengError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DashengError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DashengError, ValueError):
    """A call violated an API precondition (wrong lengths, non-scalar loss, ...)."""


class DomainError(DashengError, ValueError):
    """Input is outside the domain an operation is defined on."""


class SequenceTooLongError(DomainError):
    """More tokens than the positional table holds; segment the input first."""


class FormatError(DashengError):
    """A file or byte stream does not follow the expected layout."""


class NumericalError(DashengError, ArithmeticError):
    """A non-finite value appeared where training cannot continue."""
