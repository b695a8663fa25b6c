"""Tests for the self-check battery."""

import numpy as np
import pytest

from src.services import losses
from src.services.encoders import EncoderParams, infer
from src.services.verification import (
    CHECK_SPEC,
    GRADIENT_TARGETS,
    KINK_MARGIN,
    _case,
    gradient_check,
    loss_identities,
    run_verification,
)


def test_battery_passes():
    report = run_verification(cases=2, auc_instances=50)
    assert report.passed, [f"{r.name}: {r.detail}" for r in report.failed]
    names = {result.name for result in report.results}
    assert {f"gradient:{name}" for name in GRADIENT_TARGETS} <= names
    assert "checkpoint:roundtrip" in names
    assert report.seconds > 0.0


def test_default_battery_passes():
    report = run_verification(cases=5)
    assert report.passed, [f"{r.name}: {r.detail}" for r in report.failed]


def test_gradient_cases_have_nonzero_features():
    for name in GRADIENT_TARGETS:
        for index in range(100):
            case = _case(0, name, index)
            params = EncoderParams.from_tensors(CHECK_SPEC, case.params)
            assert np.any(params.biases[0] != 0.0)
            u_s = infer(params, case.x)
            assert np.linalg.norm(u_s, axis=1).min() > KINK_MARGIN


def test_cases_are_seeded():
    first, second = _case(3, "vlcd_total", 4), _case(3, "vlcd_total", 4)
    assert first.x.tobytes() == second.x.tobytes()
    assert [p.tobytes() for p in first.params] == [p.tobytes() for p in second.params]


def test_loss_identities_hold():
    results = loss_identities()
    assert results and all(result.passed for result in results), [r.name for r in results if not r.passed]


def test_injected_fault_is_caught():
    report = run_verification(cases=1, auc_instances=10, fault="gnd-sign-flip")
    assert not report.passed
    failed = {result.name for result in report.failed}
    assert "gradient:norm_distill_text" in failed
    assert "gradient:vlcp_loss" not in failed


def test_fault_is_cleared_afterwards():
    run_verification(cases=1, auc_instances=10, fault="gnd-sign-flip")
    assert not losses._FAULTS
    assert run_verification(cases=1, auc_instances=10).passed


def test_unknown_fault_rejected():
    with pytest.raises(ValueError):
        run_verification(cases=1, auc_instances=10, fault="no-such-fault")


def test_single_gradient_check_reports_cases():
    result = gradient_check("kl_logit_loss", cases=3)
    assert result.passed
    assert "over 3 cases" in result.detail


@pytest.mark.slow
def test_full_gradient_sweep():
    assert run_verification(cases=100).passed
