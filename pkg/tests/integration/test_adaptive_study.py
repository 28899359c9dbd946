"""Adaptive refinement driven by the element errors against the box target."""

import math

import pytest

from driver import SolverSettings, run_adaptive_study, run_uniform_study

pytestmark = pytest.mark.integration


class TestAdaptiveEfficiency:
    """Test adaptive hierarchies against the uniform one."""

    def test_fewer_dofs_for_same_error(self):
        """Test 2D adaptive levels reach the uniform level-4 error with fewer dofs."""
        settings = SolverSettings(max_iters=5000)
        uniform = run_uniform_study(4, settings=settings, dim=2, cells=4).records[-1]
        adaptive = run_adaptive_study(16, settings=settings, dim=2, cells=4)

        assert not adaptive.failed
        reached = [r for r in adaptive.records if r.error <= uniform.error]
        assert reached
        assert reached[0].dofs < uniform.dofs

    def test_nested_adaptive(self):
        """Test nested adaptive levels keep the non-nested errors."""
        settings = SolverSettings(max_iters=5000)
        plain = run_adaptive_study(6, settings=settings, dim=2, cells=4)
        nested = run_adaptive_study(6, nested=True, settings=settings, dim=2, cells=4)

        assert [r.dofs for r in nested.records[:2]] == [r.dofs for r in plain.records[:2]]
        assert nested.records[1].error == pytest.approx(plain.records[1].error, rel=0.05)
        assert sum(r.iterations for r in nested.records) < sum(r.iterations for r in plain.records)

    def test_three_dimensional_run(self):
        """Test a short 3D adaptive run refines and lowers the error."""
        report = run_adaptive_study(4, dim=3, cells=4, settings=SolverSettings(max_iters=5000))
        dofs = [r.dofs for r in report.records]

        assert not report.failed
        assert all(b > a for a, b in zip(dofs, dofs[1:]))
        assert report.records[-1].error < report.records[0].error


class TestAdaptiveCube:
    """Test the 3D adaptive hierarchy on the 16-cell cube with theta=0.5."""

    # Uniform refinement first reaches 4.5e-2 on its fifth level (257^3 vertices)
    UNIFORM_DOFS = 16_974_593
    TARGET_ERROR = 4.5e-2

    @pytest.fixture(scope="class")
    def report(self):
        return run_adaptive_study(14, dim=3, cells=16)

    def test_reaches_target_with_fewer_dofs(self, report):
        """Test the target error is reached on at most 20% of the uniform dofs."""
        reached = [r for r in report.records if r.error <= self.TARGET_ERROR]

        assert not report.failed
        assert reached
        assert reached[0].dofs <= 0.2 * self.UNIFORM_DOFS

    def test_rate_over_last_levels(self, report):
        """Test the dof-based rate over the last four refinements is at least 0.6."""
        first, last = report.records[-5], report.records[-1]
        rate = 3 * math.log(first.error / last.error) / math.log(last.dofs / first.dofs)

        assert rate >= 0.6
