import logging

import numpy as np
import pytest

from experiments.gradcheck_suite import DEFAULT_TOLERANCE, REGISTRY, run_suite
from models import numkit
from models.gradcheck import gradcheck, numeric_gradient
from models.numkit import DiffOp
from utils.errors import NumericError


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_registered_op_matches_finite_differences(name):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([7, len(name)])))
    for _ in range(2):
        op, inputs = REGISTRY[name](rng)
        assert gradcheck(op, inputs, rng=rng, max_entries=3) < DEFAULT_TOLERANCE


def test_linear_full_probe_error(rng):
    op = DiffOp("linear", numkit.linear_forward, numkit.linear_backward)
    inputs = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)]
    assert gradcheck(op, inputs, rng=rng) < 1e-6


def test_softmax_full_probe_error(rng):
    op = DiffOp("softmax", numkit.softmax_forward, lambda d, c: (numkit.softmax_backward(d, c),))
    assert gradcheck(op, [rng.standard_normal(8)], rng=rng) < 1e-6


def test_numeric_gradient_of_square():
    op = DiffOp("square", lambda x: (x * x, x), lambda d, x: (2 * d * x,))
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_gradient(op, [x], 0, np.ones(3))
    np.testing.assert_allclose(g, [2.0, -4.0, 1.0], atol=1e-8)


def test_numeric_gradient_restricted_entries_leave_nan():
    op = DiffOp("square", lambda x: (x * x, x), lambda d, x: (2 * d * x,))
    g = numeric_gradient(op, [np.ones(4)], 0, np.ones(4), entries=[1])
    assert np.isnan(g[0]) and not np.isnan(g[1])


def _corrupted_linear(rng):
    def backward(dy, cache):
        dx, dW, db = numkit.linear_backward(dy, cache)
        return 2.0 * dx, dW, db
    op = DiffOp("linear", numkit.linear_forward, backward)
    return op, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)]


def test_corrupted_backward_is_reported_by_name():
    report = run_suite({"corrupted_linear": _corrupted_linear, "linear": REGISTRY["linear"]}, instances=2)
    assert not report["passed"]
    assert report["failed"] == ["corrupted_linear"]
    assert report["ops"]["linear"]["passed"]
    assert report["ops"]["corrupted_linear"]["max_error"] > 0.1


def test_empty_registry_passes_with_warning(zfusion_log):
    report = run_suite({}, instances=3)
    assert report["passed"] and report["ops"] == {} and report["failed"] == []
    assert any(r.levelno == logging.WARNING and "empty" in r.getMessage() for r in zfusion_log.records)


def test_non_finite_analytic_gradient_raises(rng):
    op = DiffOp("nan_grad", lambda x: (x.copy(), x), lambda d, x: (np.full_like(x, np.nan),))
    with pytest.raises(NumericError, match="nan_grad"):
        gradcheck(op, [rng.standard_normal(3)], rng=rng)


@pytest.mark.slow
def test_default_suite_passes():
    report = run_suite()
    assert report["passed"], report["failed"]
    assert set(report["ops"]) == set(REGISTRY)


def _abs_op():
    return DiffOp("abs", lambda x: (np.abs(x), x), lambda d, x: (d * np.sign(x),))


def test_kink_entry_is_refined_and_logged(zfusion_log):
    # |x| at 3e-6: the default step straddles zero, step/10 does not
    report = {}
    err = gradcheck(_abs_op(), [np.array([3e-6])], report=report)
    assert report[0]["error"] == pytest.approx(0.7, rel=1e-6)
    assert report[0]["refined_entries"] == 1
    assert err == report[0]["refined_error"] < 1e-5
    assert any(r.levelno == logging.WARNING and "abs input 0 entry 0" in r.getMessage()
               for r in zfusion_log.records)


def test_wrong_gradient_is_not_explained_by_finer_steps():
    op = DiffOp("double", lambda x: (2.0 * x, x), lambda d, x: (np.zeros_like(x),))
    report = {}
    assert gradcheck(op, [np.array([0.4])], report=report) == pytest.approx(1.0)
    assert report[0]["refined_entries"] == 0


def test_smooth_op_reports_default_step_error(rng):
    op = DiffOp("linear", numkit.linear_forward, numkit.linear_backward)
    inputs = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)]
    report = {}
    gradcheck(op, inputs, rng=rng, report=report)
    for per_input in report.values():
        assert per_input["refined_entries"] == 0
        assert per_input["error"] == per_input["refined_error"] < 1e-6


def test_suite_reports_both_errors_for_kinked_op():
    report = run_suite({"abs": lambda rng: (_abs_op(), [np.array([3e-6])])}, instances=1)
    entry = report["ops"]["abs"]
    assert entry["max_error"] > 0.5
    assert entry["refined_error"] < DEFAULT_TOLERANCE
    assert entry["refined_entries"] == 1 and entry["passed"]
