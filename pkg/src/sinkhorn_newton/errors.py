"""Exception hierarchy shared by all solver modules."""


class TransportError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfigError(TransportError, ValueError):
    pass


class InvalidInputError(TransportError, ValueError):
    pass


class ShapeError(InvalidInputError):
    pass


class NumericOverflowError(TransportError, ArithmeticError):
    pass


class DegenerateKernelError(TransportError, ArithmeticError):
    """A kernel row/column (or plan marginal) vanished, usually from underflow at small epsilon."""


class NewtonStepFailed(TransportError, ArithmeticError):
    pass


class StepOverflowError(NumericOverflowError):
    pass


class InconsistentSystemError(TransportError, ValueError):
    """The right-hand side has a component along the Jacobian kernel."""


class InvalidPreconditionerError(TransportError, ValueError):
    pass


class HypothesisViolatedError(TransportError, ValueError):
    """Input does not satisfy the hypothesis of a theoretical bound."""


class NotEnoughPointsError(TransportError, ValueError):
    pass


class UnsupportedError(TransportError, NotImplementedError):
    pass


class DegenerateHistogramError(InvalidInputError):
    pass


class ParseError(InvalidInputError):
    pass
