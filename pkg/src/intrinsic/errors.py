"""Exception taxonomy shared across the toolkit.

Grouped so the command line tool can map families of failures onto
distinct exit codes: configuration problems, file format problems,
shape/contract violations, and numerical failures.
"""


class IntrinsicError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(IntrinsicError):
    """Invalid or contradictory configuration values."""


class FileFormatError(IntrinsicError):
    """A file on disk does not parse as the format it claims to be."""


class ManifestError(IntrinsicError):
    """A dataset manifest is malformed or references bad data."""


class DimensionError(IntrinsicError):
    """Arrays with incompatible shapes were combined."""


class ContractError(IntrinsicError):
    """An API precondition was violated by the caller."""


class RangeError(IntrinsicError):
    """A numeric value is outside its documented domain."""


class ConvergenceError(IntrinsicError):
    """An iterative solver exhausted its iteration budget.

    Carries the final residual so callers can report how close the
    solve got before giving up.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingDivergedError(IntrinsicError):
    """The training loss became NaN or infinite.

    ``snapshot`` holds a small description of the offending batch so
    the failure can be reproduced.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
