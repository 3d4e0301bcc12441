"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A numeric parameter is outside its admissible range."""


class InputError(ValueError):
    """Input data is malformed (NaN/Inf, wrong dimension, ...)."""


class PreconditionError(ValueError):
    """An operation was called in a state where its precondition fails."""


class UnsupportedError(NotImplementedError):
    """The requested operation is not available for this object kind."""


class DivergenceError(RuntimeError):
    """The iteration left the finite region.

    ``state`` carries the last finite solver state.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ConfigError(ValueError):
    """Configuration failed validation; ``errors`` lists every violation."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
