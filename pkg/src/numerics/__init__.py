"""Dense-matrix numerics: tensors, reverse-mode tape, seeded randomness."""

from src.numerics.tensor import (
    ContractError,
    DegenerateInputError,
    DegenerateLabelError,
    DimensionError,
    NumericsError,
    ProbeError,
    as_tensor,
)
from src.numerics.tape import OpKind, Tape, TapeNode, Var
from src.numerics.rng import Rng

__all__ = [
    "ContractError",
    "DegenerateInputError",
    "DegenerateLabelError",
    "DimensionError",
    "NumericsError",
    "ProbeError",
    "as_tensor",
    "OpKind",
    "Tape",
    "TapeNode",
    "Var",
    "Rng",
]
