"""Exception hierarchy shared by all sepkit modules."""


class SepkitError(Exception):
    """Base class for every error raised by sepkit."""


class ShapeError(SepkitError, ValueError):
    """An array does not have the shape an operation expects."""


class NumericalError(SepkitError, ArithmeticError):
    """A non-finite value appeared during evaluation or training.

    ``layer`` is the index of the offending layer (engine errors) and
    ``epoch`` the epoch a training run diverged in, when known.
    """

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class DataError(SepkitError):
    """Malformed or inconsistent dataset, container, or checkpoint file."""


class BadMagicError(DataError):
    def __init__(self, observed, expected):
        super().__init__(f"bad magic: observed {observed!r}, expected {expected!r}")
        self.observed = observed
        self.expected = expected


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class DigestMismatchError(DataError):
    pass


class BudgetViolationError(SepkitError, ValueError):
    """A perturbation exceeds the budget it is declared under."""


class ConfigError(SepkitError, ValueError):
    """One or more configuration problems; ``problems`` lists all of them."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
