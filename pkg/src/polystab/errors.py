"""Exception hierarchy shared by all modules."""


class PolystabError(Exception):
    """Base class for every error raised by this package."""


class DomainError(PolystabError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class RegionError(DomainError):
    """A local Lyapunov piece was evaluated outside its region."""


class TableError(DomainError):
    """An exit-moment table was queried outside its grid."""


class QuadratureError(PolystabError, ArithmeticError):
    pass


class SolveError(PolystabError, ArithmeticError):
    pass


class ConvergenceError(PolystabError, ArithmeticError):
    pass


class BudgetError(PolystabError, RuntimeError):
    """A Monte Carlo run exhausted its step budget before enough paths finished."""


class ConfigError(PolystabError, ValueError):
    pass


class InsufficientData(PolystabError, ValueError):
    pass


class VerificationFailure(PolystabError):
    """Raised when the drift inequality fails; carries the offending points."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate
