"""Central finite-difference verification of tape gradients."""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from src.numerics.tape import Tape, Var
from src.numerics.tensor import ContractError, NumericsError, ProbeError, as_tensor

ScalarFn = Callable[[Tape, List[Var]], Var]


@dataclass
class GradCheckReport:
    """Largest analytic/numeric gradient discrepancy found."""
    max_discrepancy: float
    worst_tensor: int
    worst_index: Tuple[int, int]
    coordinates: int

    def passed(self, tolerance: float = 1e-5) -> bool:
        return self.max_discrepancy <= tolerance


def _evaluate(f: ScalarFn, thetas: List[np.ndarray]) -> Tuple[Tape, List[Var], Var]:
    tape = Tape()
    leaves = [tape.leaf(theta) for theta in thetas]
    out = f(tape, leaves)
    if out.shape != (1, 1):
        raise ContractError(f"gradient check needs a scalar function, got shape {out.shape}")
    return tape, leaves, out


def finite_diff_check(f: ScalarFn, theta: Union[np.ndarray, Sequence[np.ndarray]],
                      step: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of f with central differences at theta.

    ``f(tape, leaves)`` must build a scalar on ``tape`` from the leaf
    variables. The step for coordinate i is ``step * (1 + |theta_i|)``;
    the per-coordinate discrepancy is min(absolute, relative) error.
    """
    if isinstance(theta, np.ndarray) or np.isscalar(theta):
        thetas = [as_tensor(theta)]
    else:
        thetas = [as_tensor(t) for t in theta]

    tape, leaves, out = _evaluate(f, thetas)
    tape.backward(out)
    analytic = tape.gradients(leaves)

    worst = (0.0, 0, (0, 0))
    coordinates = 0
    for t_index, base in enumerate(thetas):
        for index in np.ndindex(*base.shape):
            h = step * (1.0 + abs(base[index]))
            values = []
            for sign in (1.0, -1.0):
                probe = [t.copy() for t in thetas]
                probe[t_index][index] += sign * h
                try:
                    value = _evaluate(f, probe)[2].item()
                except ProbeError:
                    raise
                except NumericsError as e:
                    raise ProbeError(f"non-finite f at tensor {t_index} index {index}: {e.message}")
                if not np.isfinite(value):
                    raise ProbeError(f"non-finite f at tensor {t_index} index {index}")
                values.append(value)
            numeric = (values[0] - values[1]) / (2.0 * h)
            exact = analytic[t_index][index]
            absolute = abs(exact - numeric)
            scale = max(abs(exact), abs(numeric))
            relative = absolute / scale if scale > 0 else 0.0
            discrepancy = min(absolute, relative)
            coordinates += 1
            if discrepancy > worst[0]:
                worst = (discrepancy, t_index, tuple(int(i) for i in index))

    return GradCheckReport(
        max_discrepancy=worst[0],
        worst_tensor=worst[1],
        worst_index=worst[2],
        coordinates=coordinates,
    )
