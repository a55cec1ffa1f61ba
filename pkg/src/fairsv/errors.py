"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class FairsvError(Exception):
    """Base class for all package errors."""


class DataError(FairsvError):
    """Malformed input files, invariant violations, inconsistent metadata."""


class NumericalError(FairsvError):
    """Numerical failure: singular matrices, divergent training, non-finite loss."""
