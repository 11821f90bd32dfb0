"""
Tests for the finite-difference gradient checker and its suites
"""

import numpy as np
import pytest
from gradcheck import (
    DEFAULT_TOLERANCE,
    CheckResult,
    GradcheckReport,
    GradientCase,
    SuiteManager,
    check_case,
    default_manager,
    numerical_gradient,
    relative_error,
)
from tensor import Tensor, tensor_sum


def test_numerical_gradient_of_a_quadratic():
    array = np.array([1.0, -2.0, 3.0])
    grad = numerical_gradient(lambda: float(np.sum(array**2)), array)
    np.testing.assert_allclose(grad, 2.0 * array, atol=1e-8)
    np.testing.assert_array_equal(array, [1.0, -2.0, 3.0])  # restored


def test_relative_error_is_worst_coordinate():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([-1.0])) == 1.0
    # large entries are scaled by their own magnitude, small ones by 1
    assert relative_error(np.array([200.0]), np.array([202.0])) == pytest.approx(2.0 / 202.0)
    assert relative_error(np.array([0.25]), np.array([0.5])) == 0.25


def test_relative_error_catches_one_wrong_coordinate_in_a_large_gradient():
    """A single off entry next to a huge one still exceeds the tolerance"""
    analytic = np.array([1000.0, 1e-3])
    numeric = np.array([1000.0, 0.0])
    assert relative_error(analytic, numeric) == pytest.approx(1e-3)
    assert relative_error(analytic, numeric) > DEFAULT_TOLERANCE


def test_check_case_fails_on_a_single_corrupted_coordinate():
    x = Tensor(np.array([30.0, -20.0, 0.5]))
    case = GradientCase("square", lambda: tensor_sum(x * x), {"x": x})

    def nudge(suite, name, grad):
        grad = grad.copy()
        grad[2] += 1e-3
        return grad

    assert check_case("core", case)[0].passed
    (result,) = check_case("core", case, corrupt=nudge)
    assert not result.passed
    assert result.error == pytest.approx(1e-3 / 1.001, rel=1e-4)


def test_check_case_rejects_non_scalar_loss():
    x = Tensor(np.ones(3))
    case = GradientCase("vector", lambda: x * 2.0, {"x": x})
    with pytest.raises(ValueError, match="scalar"):
        check_case("core", case)


def test_check_case_on_a_simple_product():
    x, y = Tensor(np.array([0.5, -1.5])), Tensor(np.array([2.0, 0.25]))
    case = GradientCase("product", lambda: tensor_sum(x * y), {"x": x, "y": y})
    results = check_case("core", case)
    assert [r.tensor for r in results] == ["x", "y"]
    assert all(r.passed for r in results)


@pytest.mark.slow
@pytest.mark.parametrize("suite", ["core", "scf", "sca", "tg", "loss"])
def test_every_suite_passes(suite):
    report = default_manager().run(suite)
    assert report.results
    assert report.passed, report.format_table()


def test_corrupted_gradient_fails_only_that_tensor():
    """Shifting one entry of one analytic gradient pushes it past the tolerance"""

    def corrupt(suite, name, grad):
        if name != "conv.weight":
            return grad
        grad = grad.copy()
        grad.flat[0] += 0.5
        return grad

    report = default_manager().run("core", corrupt=corrupt)
    assert not report.passed
    assert {r.tensor for r in report.failures} == {"conv.weight"}
    assert report.format_table().splitlines()[-1].endswith("1 failed")


def test_unknown_suite_is_rejected():
    with pytest.raises(ValueError, match="unknown gradient suite 'gan'"):
        default_manager().run("gan")


def test_default_manager_suite_names():
    assert default_manager().names() == ["core", "scf", "sca", "tg", "loss"]


def test_register_suite_needs_a_name(mocker):
    suite = mocker.Mock()
    suite.name = ""
    with pytest.raises(ValueError, match="must have a name"):
        SuiteManager().register_suite(suite)


def test_format_table_summary_line():
    report = GradcheckReport(
        tolerance=1e-4,
        results=[
            CheckResult("core", "linear", "x", 1e-9, True),
            CheckResult("core", "linear", "linear.weight", 2e-9, True),
        ],
    )
    assert report.format_table().splitlines()[-1] == "2 tensors checked at tolerance 0.0001: all passed"
