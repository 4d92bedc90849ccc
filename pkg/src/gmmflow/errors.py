"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigurationError -> 2,
NumericalError -> 3.
"""


class GmmflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GmmflowError):
    """Invalid parameter, flag, or config-file value."""


class BracketingError(ConfigurationError):
    """A bisection bracket does not straddle the sought transition."""


class NumericalError(GmmflowError):
    """A computation produced non-finite or out-of-domain values."""


class NumericalDomainError(NumericalError):
    """An integrand or state left its valid domain.

    Carries the offending value so callers can report where evaluation
    failed.
    """

    def __init__(self, message: str, value=None):
        super().__init__(message)
        self.value = value


class IntegrationError(NumericalError):
    """Trajectory integration hit a non-finite state.

    ``record`` holds the trajectory up to the last valid step.
    """

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record
