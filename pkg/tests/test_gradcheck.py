"""Tests for the central finite-difference checker."""

import numpy as np
import pytest

from src.numerics import ContractError, ProbeError
from src.numerics.gradcheck import finite_diff_check
from src.numerics.rng import Rng
from src.services import losses


def test_quadratic_is_exact():
    report = finite_diff_check(lambda tape, leaves: tape.sum(tape.mul(leaves[0], leaves[0])), np.array([[1.0, 2.0]]))
    assert report.max_discrepancy <= 1e-8
    assert report.coordinates == 2


def test_constant_function_has_zero_gradient():
    report = finite_diff_check(lambda tape, leaves: tape.constant([[3.0]]), np.array([[0.5, -1.5, 2.0]]))
    assert report.max_discrepancy <= 1e-10


def test_several_tensors():
    def f(tape, leaves):
        a, b = leaves
        return tape.sum(tape.exp(tape.matmul(a, b)))

    rng = Rng(1)
    report = finite_diff_check(f, [rng.normal((2, 3), scale=0.3), rng.normal((3, 2), scale=0.3)])
    assert report.passed()
    assert report.coordinates == 12


def test_wrong_gradient_is_detected():
    def f(tape, leaves):
        return tape.sum(tape.flip_grad(tape.mul(leaves[0], leaves[0])))

    report = finite_diff_check(f, np.array([[1.0, 2.0]]))
    assert not report.passed()
    assert report.worst_index in ((0, 0), (0, 1))


def test_non_finite_probe_raises_probe_error():
    with pytest.raises(ProbeError):
        finite_diff_check(lambda tape, leaves: tape.sum(tape.log(leaves[0])), np.array([[1e-7]]))


def test_non_scalar_function_rejected():
    with pytest.raises(ContractError):
        finite_diff_check(lambda tape, leaves: leaves[0], np.ones((2, 2)))


def test_contrastive_loss_on_seeded_batch():
    rng = Rng(12)
    v = rng.normal((4, 8))
    params = losses.LossParams(tau=0.5)

    def f(tape, leaves):
        return losses.vlcp_loss(losses.BatchFeatures(v=v, u_s=leaves[0]), params).total

    assert finite_diff_check(f, rng.normal((4, 8))).passed(1e-5)
