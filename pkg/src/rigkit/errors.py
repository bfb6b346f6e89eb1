class RigkitError(Exception):
    """Base class for engine errors."""


class DataError(RigkitError):
    """Malformed or inconsistent input data (files, rig invariants, dimensions)."""


class NumericError(RigkitError):
    """Numerical failure: divergence, non-finite values, degenerate geometry."""
