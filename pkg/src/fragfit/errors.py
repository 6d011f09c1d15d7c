"""Exception types shared across the pipeline."""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, structures, grids)."""


class NumericalError(RuntimeError):
    """A computation diverged or produced non-finite values."""
