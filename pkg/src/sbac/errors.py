"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes (config 2, data 3, divergence 4).
"""


class SbacError(Exception):
    """Base class for package errors."""


class ConfigError(SbacError):
    """Malformed configuration file, unknown key, or invalid value."""


class DataError(SbacError):
    """Dataset violates a structural invariant (bounds, chaining, missing files)."""


class DegenerateInputError(DataError):
    """Input admits no meaningful answer (e.g. constant-reward dataset)."""


class SupportError(SbacError):
    """A state has positive target mass but zero behavior mass."""

    def __init__(self, message: str, states=()):
        super().__init__(message)
        self.states = list(states)


class DivergenceError(SbacError):
    """A training loss blew past its divergence guard."""

    def __init__(self, message: str, loss_name: str = "", step: int = -1, value: float = float("nan")):
        super().__init__(message)
        self.loss_name = loss_name
        self.step = step
        self.value = value
