"""Exception taxonomy shared by all modules."""


class CpcBayesError(Exception):
    """Base class for all package errors."""


class IoError(CpcBayesError):
    """A referenced file is missing or unreadable."""


class ShapeError(CpcBayesError):
    """Array dimensions are inconsistent with the operation's contract."""


class ValidationError(CpcBayesError):
    """An input violates a domain invariant (names the offending object)."""


class ConfigError(CpcBayesError):
    """A parameter violates a precondition."""


class NumericalError(CpcBayesError):
    """A numerical routine (Cholesky, SVD, eigendecomposition) failed."""


class DegenerateInput(CpcBayesError):
    """The input admits no unique solution (e.g. all-zero Procrustes target)."""
