"""Exception hierarchy shared by every module.

The three intermediate bases map onto the CLI exit-code contract:
ConfigError -> 2, DataError -> 3, NumericalError -> 4.
"""


class NearOodError(Exception):
    """Base class for all package errors."""


class ConfigError(NearOodError):
    """Invalid configuration (bad field values, malformed config files)."""


class DataError(NearOodError):
    """Invalid or inconsistent data (shapes, labels, missing inputs)."""


class NumericalError(NearOodError):
    """Numerical failure (factorization, degeneracy, divergence)."""


class ConfigInvalid(ConfigError):
    pass


class EpsilonOutOfRange(ConfigError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnknownClass(DataError):
    pass


class EmptyClass(DataError):
    pass


class ContainsOodRows(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyGroup(DataError):
    pass


class NotSymmetric(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class DegeneratePlane(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    """Training diverged; carries the epoch index where it was detected."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
