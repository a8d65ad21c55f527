"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, anything else derived from MoesimError -> 3.
"""


class MoesimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MoesimError):
    """Invalid or inconsistent experiment configuration."""


class DataError(MoesimError):
    """Invalid input data (traces, placements, load matrices)."""


class ParseError(DataError):
    """A trace or placement file could not be parsed; names the offending field."""


class DimensionError(DataError):
    """Declared dimensions do not match the shape of the actual data."""


class TraceMismatchError(DataError):
    """A trace is dimensionally incompatible with the model configuration."""


class InvalidPairError(DataError):
    """A (pre, post) placement pair violates a collective's contract."""


class OrphanExpertError(DataError):
    """Tokens were routed to an expert that is materialized on no device."""


class EmptyHistoryError(DataError):
    """Load estimation was requested with no observed iterations."""


class DimensionMismatchError(DataError):
    """A traffic matrix and a topology disagree on the device count."""


class InfeasibleSlotsError(MoesimError):
    """Sharding ran out of device slots; slot arithmetic is broken if this fires."""


class InternalError(MoesimError):
    """An internal invariant was violated."""
