"""Functional operations over tape variables or plain arrays.

Each function accepts ``Var`` handles or raw arrays. Raw-only calls are
recorded on a fresh tape, so the same code path serves training (with
gradients) and evaluation (values only).
"""

from typing import Optional

import numpy as np

from src.numerics.tape import Operand, Tape, Var
from src.numerics.tensor import DegenerateInputError, DimensionError, zero_norm_row


def tape_of(*operands: Operand) -> Tape:
    """The tape shared by the Var operands, or a new one."""
    for operand in operands:
        if isinstance(operand, Var):
            return operand.tape
    return Tape()


def matmul(a: Operand, b: Operand) -> Var:
    """Matrix product."""
    return tape_of(a, b).matmul(a, b)


def softmax_rows(a: Operand) -> Var:
    """Row-wise softmax with max subtraction."""
    return tape_of(a).softmax_rows(a)


def log_softmax_rows(a: Operand) -> Var:
    """Row-wise log-softmax, stable for large logits."""
    return tape_of(a).log_softmax_rows(a)


def relu(a: Operand) -> Var:
    return tape_of(a).relu(a)


def row_norm(a: Operand) -> Var:
    return tape_of(a).row_norm(a)


def row_dot(a: Operand, b: Operand) -> Var:
    return tape_of(a, b).row_dot(a, b)


def maximum(a: Operand, b: Operand) -> Var:
    return tape_of(a, b).maximum(a, b)


def mean(a: Operand) -> Var:
    return tape_of(a).mean(a)


def total(a: Operand) -> Var:
    """Sum of all entries as a 1 x 1 value."""
    return tape_of(a).sum(a)


def _values(a: Operand) -> np.ndarray:
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)


def require_directions(op: str, a: Operand) -> None:
    """Reject inputs with an all-zero row."""
    row = zero_norm_row(np.atleast_2d(_values(a)))
    if row is not None:
        raise DegenerateInputError(op, row)


def unit_rows(a: Operand) -> Var:
    """Rows divided by their (floored) L2 norms."""
    tape = tape_of(a)
    a = tape.lift(a)
    return tape.div(a, tape.row_norm(a))


def cosine_matrix(a: Operand, b: Operand) -> Var:
    """Entry (i, j) is the cosine similarity of row i of a and row j of b."""
    tape = tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError("cosine_matrix", a.shape, b.shape)
    require_directions("cosine_matrix", a)
    require_directions("cosine_matrix", b)
    return tape.matmul(unit_rows(a), tape.transpose(unit_rows(b)))


def row_cosine(a: Operand, b: Operand) -> Var:
    """Cosine similarity of matching rows as an n x 1 column."""
    tape = tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.shape != b.shape:
        raise DimensionError("row_cosine", a.shape, b.shape)
    require_directions("row_cosine", a)
    require_directions("row_cosine", b)
    return tape.row_dot(unit_rows(a), unit_rows(b))


def linear(x: Operand, weight: Operand, bias: Optional[Operand] = None) -> Var:
    """x @ weight (+ bias row broadcast over the batch)."""
    tape = tape_of(x, weight, bias)
    out = tape.matmul(x, weight)
    return out if bias is None else tape.add(out, bias)
