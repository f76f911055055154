"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and
schema problems exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DegenerateMaskError(ValueError):
    """A masked reduction received an all-zero mask."""


class DatasetError(Exception):
    """A dataset violates the wire schema or its invariants."""


class DegenerateDataError(DatasetError):
    """Data too degenerate to fit scalers on (constant channel or output)."""


class CheckpointError(DatasetError):
    """A checkpoint file is malformed or inconsistent."""


class NumericError(RuntimeError):
    """A non-finite value surfaced where a finite one is required."""
