"""Exception hierarchy shared by every opdiff module."""


class OpdiffError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(OpdiffError, ValueError):
    pass


class ArityMismatch(OpdiffError, ValueError):
    pass


class IndexOutOfRange(OpdiffError, IndexError):
    pass


class InvalidPermutation(OpdiffError, ValueError):
    pass


class DomainError(OpdiffError, ArithmeticError):
    """Raised in strict mode when an evaluation leaves the real domain."""


class NotLinear(OpdiffError, TypeError):
    """A transposition was requested through a slot that is not provably linear."""


class UndefinedTranspose(OpdiffError):
    """The adjoint exists mathematically but needs machinery we do not have
    (function inversion, non-invertible maps)."""


class MissingRule(OpdiffError, NotImplementedError):
    pass


class GridRequired(OpdiffError, ValueError):
    """A rule needs to integrate over a domain and no quadrature grid was supplied."""


class IntegrationRequired(OpdiffError, ValueError):
    """A functional gradient was requested for a program that does not end in a full integral."""


class UnboundVariable(OpdiffError, RuntimeError):
    """A tracing placeholder was evaluated outside of a transformation."""


class InvalidRange(OpdiffError, ValueError):
    pass


class ConvergenceFailure(OpdiffError, RuntimeError):
    pass


class SingularIntegrand(OpdiffError, FloatingPointError):
    pass


class NonPositiveDensity(OpdiffError, ValueError):
    pass


class GraphTooLarge(OpdiffError, RuntimeError):
    pass


class ConfigError(OpdiffError, ValueError):
    pass
