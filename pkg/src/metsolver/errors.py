"""Exception hierarchy shared across the package.

Parse errors carry the offending line number where one exists; numerical
errors (UnstableStep, DivergedLoss) are the ones the CLI maps to exit
code 3, everything else under MetsolverError maps to exit code 2.
"""


class MetsolverError(Exception):
    """Base class for all package errors."""


# --- model language ---------------------------------------------------------


class ModelError(MetsolverError):
    """Problem with a reaction-network definition."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MalformedLine(ModelError):
    pass


class UnknownSpecies(ModelError):
    pass


class DuplicateSpecies(ModelError):
    pass


class MissingRate(ModelError):
    pass


class NonPositiveRate(ModelError):
    pass


# --- state space / kernels --------------------------------------------------


class SpaceTooLarge(MetsolverError):
    """Truncated state space exceeds the configured memory cap.

    Signals that the exact path is infeasible and the neural path is the
    intended fallback.
    """


class UnstableStep(MetsolverError):
    """First-order kernel step too large for the local propensities."""


# --- tensor engine ----------------------------------------------------------


class ShapeMismatch(MetsolverError):
    pass


class DisconnectedGraph(MetsolverError):
    """Loss does not reach any trainable parameter."""


# --- training ---------------------------------------------------------------


class DivergedLoss(MetsolverError):
    """Loss estimate exceeded its divergence threshold repeatedly."""


# --- analysis ---------------------------------------------------------------


class SupportMismatch(MetsolverError):
    pass


class DegenerateVariance(MetsolverError):
    """All samples identical; moment-based statistics undefined."""


class TimeIndexOutOfRange(MetsolverError, IndexError):
    pass


# --- persistence ------------------------------------------------------------


class CheckpointError(MetsolverError):
    pass


class ConfigError(MetsolverError):
    """Invalid run configuration (bad paths, missing fields, bad values)."""
