"""Unit tests for the finite-difference gradient checker."""

import numpy as np
import pytest

from tadlet.errors import ShapeError
from tadlet.gradcheck import GradCheckReport, grad_check, run_suite


class TestGradCheck:
    """Central differences against analytic gradients."""

    def test_linear_function(self) -> None:
        w = np.array([1.5, -2.0, 0.25])
        x = np.array([3.0, 4.0, 5.0])
        report = grad_check(lambda: float(w @ x), {"w": (w, x.copy())}, name="linear")
        assert report.passed
        assert report.num_checked == 3
        assert report.max_rel_error < 1e-8
        assert w.tolist() == [1.5, -2.0, 0.25]

    def test_wrong_gradient_fails(self) -> None:
        w = np.array([1.0, 2.0])
        report = grad_check(lambda: float(np.sum(w ** 2)), {"w": (w, w.copy())}, name="square")
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)
        assert str(report).startswith("FAIL square")

    def test_sampling(self) -> None:
        w = np.arange(100, dtype=np.float64)
        report = grad_check(lambda: float(w.sum()), {"w": (w, np.ones(100))}, max_samples=10)
        assert report.num_checked == 10

    def test_gradient_shape_checked(self) -> None:
        w = np.zeros(3)
        with pytest.raises(ShapeError, match="entries"):
            grad_check(lambda: 0.0, {"w": (w, np.zeros(4))})

    def test_nothing_checked_is_not_a_pass(self) -> None:
        assert not GradCheckReport("empty", 0.0, 1e-4, 0).passed


@pytest.mark.slow
class TestSuite:
    """Every reverse pass of the detector."""

    def test_all_pass(self) -> None:
        reports = run_suite(seed=0)
        names = [r.name for r in reports]
        assert "detection_loss" in names and "srm/conv" in names
        assert all(r.passed for r in reports), "\n".join(str(r) for r in reports)
