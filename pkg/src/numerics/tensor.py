"""Tensor conventions and numeric errors.

A tensor is a 2-D, C-contiguous ``numpy.float64`` array. Row vectors are
1 x n, column vectors n x 1 and scalars 1 x 1.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

NORM_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]], Sequence[float], float]


class NumericsError(Exception):
    """Base class for numeric failures."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class DimensionError(NumericsError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, left: Tuple[int, ...], right: Optional[Tuple[int, ...]] = None):
        self.op = op
        self.left = left
        self.right = right
        if right is None:
            message = f"{op}: unsupported shape {left}"
        else:
            message = f"{op}: incompatible shapes {left} and {right}"
        super().__init__(message)


class DegenerateInputError(NumericsError):
    """An input row has zero norm where a direction is required."""

    def __init__(self, op: str, row: int):
        self.op = op
        self.row = row
        super().__init__(f"{op}: row {row} has zero norm")


class ContractError(NumericsError):
    """A documented precondition was violated."""


class ProbeError(NumericsError):
    """A finite-difference probe produced a non-finite value."""


class DegenerateLabelError(NumericsError):
    """A binary label vector does not contain both classes."""


def as_tensor(data: ArrayLike) -> np.ndarray:
    """Coerce to a 2-D float64 array; vectors become single rows."""
    array = np.array(data, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise DimensionError("as_tensor", array.shape)
    return np.ascontiguousarray(array)


def check_finite(op: str, value: np.ndarray) -> np.ndarray:
    """Raise if an operation produced NaN or Inf."""
    if not np.isfinite(value).all():
        raise NumericsError(f"{op}: non-finite result")
    return value


def zero_norm_row(matrix: np.ndarray) -> Optional[int]:
    """Index of the first exactly-zero row, or None."""
    zero = np.flatnonzero(~matrix.any(axis=1))
    return int(zero[0]) if zero.size else None


def require_nonzero_rows(op: str, matrix: np.ndarray) -> None:
    """Raise DegenerateInputError naming the first all-zero row."""
    row = zero_norm_row(matrix)
    if row is not None:
        raise DegenerateInputError(op, row)


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm (norms floored)."""
    norms = np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), NORM_FLOOR)
    return matrix / norms
