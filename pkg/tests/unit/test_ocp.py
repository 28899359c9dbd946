"""Unit tests for the discrete optimal control forms and their structural checks."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from fem import (
    BoxTarget,
    DofMap,
    assemble_load_box_target,
    assemble_mass,
    assemble_stiffness,
    l2_error_box_target,
    lump_mass,
)
from linalg import DiagonalMatrix
from mesh import build_unit_cube_mesh, uniform_mesh
from ocp import (
    ProblemForm,
    Regularization,
    RegularizationKind,
    RhoMode,
    SaddleSolution,
    build_primal_system,
    build_saddle_system,
    build_schur_operator,
    build_system,
    mass_preconditioner,
    recover_control,
    saddle_preconditioner,
    solve_saddle,
    solve_system,
    verify_cross_form,
    verify_schur_identity,
    verify_spectral_equivalence,
)
from utils.errors import ParameterError


def _constant(kind, value, **kwargs):
    return Regularization(kind=kind, rho_mode="constant", value=value, **kwargs)


@pytest.fixture
def square():
    """Level-2 2D mesh with 4 initial cells per axis (49 free dofs)."""
    mesh = uniform_mesh(2, 4, 2)
    return mesh, DofMap.from_mesh(mesh)


def _m_norm(mass, v):
    return float(np.sqrt(v @ (mass @ v)))


class TestRegularization:
    """Test regularization parameters."""

    def test_exponents(self):
        """Test r = 2 for energy and r = 4 for L2."""
        assert Regularization(kind="energy").exponent == 2
        assert Regularization(kind="l2").exponent == 4

    def test_adapted_rho(self, unit_square):
        """Test adapted rho equals h^r in the chosen size measure."""
        energy = Regularization(kind="energy")
        l2 = Regularization(kind="l2", mesh_size="diameter")

        np.testing.assert_allclose(energy.rho_per_element(unit_square), (1 / 4) ** 2)
        np.testing.assert_allclose(l2.rho_per_element(unit_square), (np.sqrt(2) / 4) ** 4)

    def test_constant_rho(self, unit_square):
        """Test constant mode fills every element with the value."""
        reg = _constant("energy", 0.1)

        assert reg.rho_mode is RhoMode.CONSTANT
        np.testing.assert_array_equal(reg.rho_per_element(unit_square), 0.1)
        assert reg.describe() == "energy, rho=constant:0.1"

    def test_balanced(self, unit_square):
        """Test balanced constant rho = h^r with h the largest element size."""
        reg = Regularization.balanced(RegularizationKind.L2, unit_square)

        assert reg.rho_mode is RhoMode.CONSTANT
        assert reg.value == pytest.approx(0.25**4)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"rho_mode": "constant"},
            {"rho_mode": "constant", "value": -1.0},
            {"mesh_size": "inradius"},
        ],
    )
    def test_invalid(self, kwargs):
        """Test missing or nonpositive constants and unknown size measures."""
        with pytest.raises(ParameterError):
            Regularization(**kwargs)


class TestPrimalSystem:
    """Test the diffusion form of energy regularization."""

    def test_constant_rho_operator(self, square):
        """Test the operator equals rho K + M entrywise."""
        mesh, dofmap = square
        system = build_primal_system(mesh, dofmap, _constant("energy", 0.3))
        expected = 0.3 * assemble_stiffness(mesh, dofmap) + assemble_mass(mesh, dofmap)

        assert system.form is ProblemForm.PRIMAL
        np.testing.assert_allclose(system.operator.toarray(), expected.toarray(), rtol=1e-14,
                                   atol=1e-16)
        np.testing.assert_allclose(system.rhs,
                                   assemble_load_box_target(mesh, dofmap, BoxTarget.centered(2)))

    def test_vanishing_rho_gives_projection(self, square):
        """Test rho -> 0 reduces to the L2 projection M y = b."""
        mesh, dofmap = square
        system = build_primal_system(mesh, dofmap, _constant("energy", 1e-14))
        y = spla.spsolve(system.operator.tocsc(), system.rhs)
        projection = spla.spsolve(system.mass.tocsc(), system.rhs)

        np.testing.assert_allclose(y, projection, rtol=1e-6, atol=1e-10)

    def test_rejects_l2(self, square):
        """Test the primal form needs energy regularization."""
        mesh, dofmap = square

        with pytest.raises(ParameterError):
            build_primal_system(mesh, dofmap, Regularization(kind="l2"))

    def test_error_monotone_in_rho(self, square):
        """Test a smaller rho does not increase the tracking error."""
        mesh, dofmap = square
        target = BoxTarget.centered(2)
        errors = []
        for rho in (1e-3, 1e-1):
            system = build_primal_system(mesh, dofmap, _constant("energy", rho), target)
            y = spla.spsolve(system.operator.tocsc(), system.rhs)
            errors.append(l2_error_box_target(mesh, y, target))

        assert errors[0] <= errors[1] + 1e-12

    def test_solve_converges(self, square):
        """Test PCG with diag(M) solves the primal system."""
        mesh, dofmap = square
        system = build_system("primal", mesh, dofmap, Regularization())
        y, report = solve_system(system, rel_tol=1e-10)

        assert report.converged
        scale = np.abs(system.rhs).max()
        np.testing.assert_allclose(system.apply(y), system.rhs, atol=1e-9 * scale)


class TestSchurOperator:
    """Test the matrix-free Schur complement."""

    def test_energy_block_scales_stiffness(self, square):
        """Test K_{1/rho} equals K / rho for constant rho."""
        mesh, dofmap = square
        system = build_schur_operator(mesh, dofmap, _constant("energy", 0.05))
        expected = assemble_stiffness(mesh, dofmap) / 0.05

        np.testing.assert_allclose(system.regularization_block.toarray(), expected.toarray(),
                                   rtol=1e-14, atol=1e-12)

    def test_l2_lumped_matches_triple_product(self, square, rng):
        """Test S v = K (lump(M)/rho)^-1 K v + M v for diagonal A."""
        mesh, dofmap = square
        rho = 1e-3
        system = build_schur_operator(mesh, dofmap, _constant("l2", rho))
        M = assemble_mass(mesh, dofmap)
        K = assemble_stiffness(mesh, dofmap).toarray()
        D = lump_mass(M)
        explicit = rho * (K @ np.diag(1.0 / D.entries) @ K) + M.toarray()
        for _ in range(5):
            v = rng.standard_normal(dofmap.n_free)
            expected = explicit @ v
            assert np.linalg.norm(system.apply(v) - expected) <= 1e-12 * np.linalg.norm(expected)

    def test_l2_consistent_mass(self, square, rng):
        """Test the consistent-mass variant against a dense inverse."""
        mesh, dofmap = square
        reg = _constant("l2", 1e-2, lumped=False)
        system = build_schur_operator(mesh, dofmap, reg)
        K = assemble_stiffness(mesh, dofmap).toarray()
        A = assemble_mass(mesh, dofmap, 1.0 / 1e-2).toarray()
        explicit = K @ np.linalg.solve(A, K) + assemble_mass(mesh, dofmap).toarray()
        v = rng.standard_normal(dofmap.n_free)
        expected = explicit @ v

        assert np.linalg.norm(system.apply(v) - expected) <= 1e-6 * np.linalg.norm(expected)

    def test_zero_vector(self, square):
        """Test S 0 = 0."""
        mesh, dofmap = square
        system = build_schur_operator(mesh, dofmap, Regularization())

        assert not np.any(system.apply(np.zeros(dofmap.n_free)))

    def test_l2_operator_positive(self, square, rng):
        """Test x.Sx > 0 for random vectors under L2 regularization."""
        mesh, dofmap = square
        system = build_schur_operator(mesh, dofmap, Regularization(kind="l2"))
        for _ in range(100):
            x = rng.standard_normal(dofmap.n_free)
            assert x @ system.apply(x) > 0


class TestSaddleSystem:
    """Test the symmetric indefinite block form."""

    def test_block_symmetry(self, square, rng):
        """Test <Sx, z> = <x, Sz>."""
        mesh, dofmap = square
        system = build_saddle_system(mesh, dofmap, Regularization())
        x = rng.standard_normal(system.n)
        z = rng.standard_normal(system.n)

        assert system.n == 2 * dofmap.n_free
        scale = np.abs(x) @ (abs(system.operator) @ np.abs(z))
        assert abs(x @ system.apply(z) - z @ system.apply(x)) <= 1e-13 * scale

    def test_rhs_layout(self, square):
        """Test the rhs is (0, -b)."""
        mesh, dofmap = square
        system = build_saddle_system(mesh, dofmap, Regularization())
        n = dofmap.n_free

        assert not np.any(system.rhs[:n])
        np.testing.assert_allclose(
            -system.rhs[n:], assemble_load_box_target(mesh, dofmap, BoxTarget.centered(2))
        )

    def test_block_elimination(self, square, rng):
        """Test eliminating p reproduces the Schur complement."""
        mesh, dofmap = square
        reg = Regularization(kind="l2")
        saddle = build_saddle_system(mesh, dofmap, reg)
        schur = build_schur_operator(mesh, dofmap, reg)
        n = dofmap.n_free
        y = rng.standard_normal(n)
        p = -saddle.regularization_block.solve(saddle.coupling @ y)
        block = saddle.apply(np.concatenate([p, y]))

        assert np.linalg.norm(block[:n]) <= 1e-12 * np.linalg.norm(saddle.coupling @ y)
        np.testing.assert_allclose(-block[n:], schur.apply(y), rtol=1e-9, atol=1e-13)

    def test_matches_primal_solve(self, square):
        """Test the MINRES state agrees with the primal state in the M-norm."""
        mesh, dofmap = square
        reg = _constant("energy", 1.0 / 64)
        primal = build_primal_system(mesh, dofmap, reg)
        y_primal = spla.spsolve(primal.operator.tocsc(), primal.rhs)
        saddle = build_saddle_system(mesh, dofmap, reg)
        solution, report = solve_saddle(saddle, rel_tol=1e-10, max_iters=5000)

        assert report.converged
        assert isinstance(solution, SaddleSolution)
        assert _m_norm(primal.mass, solution.y - y_primal) <= 1e-7

    def test_solve_saddle_needs_saddle(self, square):
        """Test solve_saddle rejects other forms."""
        mesh, dofmap = square

        with pytest.raises(ParameterError):
            solve_saddle(build_primal_system(mesh, dofmap, Regularization()))

    def test_block_preconditioner(self, square):
        """Test the block diagonal [diag(A), diag(M)] preconditioner."""
        mesh, dofmap = square
        system = build_saddle_system(mesh, dofmap, Regularization())
        precond = saddle_preconditioner(system)
        n = dofmap.n_free

        np.testing.assert_allclose(precond.entries[:n], system.regularization_block.diagonal())
        np.testing.assert_allclose(precond.entries[n:], system.mass.diagonal())


class TestRecoverControl:
    """Test control recovery u = -A p."""

    def test_zero_adjoint(self, square):
        """Test p = 0 gives u = 0."""
        mesh, dofmap = square
        system = build_saddle_system(mesh, dofmap, Regularization())

        assert not np.any(recover_control(system, np.zeros(dofmap.n_free)))

    def test_energy_constant(self, square, rng):
        """Test u = -K p / rho for constant energy regularization."""
        mesh, dofmap = square
        system = build_saddle_system(mesh, dofmap, _constant("energy", 0.2))
        p = rng.standard_normal(dofmap.n_free)
        expected = -(assemble_stiffness(mesh, dofmap) @ p) / 0.2

        np.testing.assert_allclose(recover_control(system, p), expected, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(SaddleSolution(np.zeros_like(p), p).control(system), expected,
                                   rtol=1e-12, atol=1e-12)

    def test_dual_norm_identity(self, square, rng):
        """Test <u, A^-1 u> = <p, A p> for the diagonal L2 block."""
        mesh, dofmap = square
        system = build_schur_operator(mesh, dofmap, Regularization(kind="l2"))
        p = rng.standard_normal(dofmap.n_free)
        u = recover_control(system, p)
        block = system.regularization_block

        assert u @ block.solve(u) == pytest.approx(p @ block.apply(p), rel=1e-12)

    def test_primal_has_no_block(self, square):
        """Test the primal system cannot recover a control."""
        mesh, dofmap = square

        with pytest.raises(ParameterError):
            recover_control(build_primal_system(mesh, dofmap, Regularization()), np.zeros(1))


class TestMassPreconditioner:
    """Test diagonal preconditioner choices."""

    def test_kinds(self, square):
        """Test diag(M) and lump(M)."""
        mesh, dofmap = square
        mass = assemble_mass(mesh, dofmap)

        np.testing.assert_array_equal(mass_preconditioner(mass, "diag").entries, mass.diagonal())
        np.testing.assert_allclose(mass_preconditioner(mass, "lumped").entries,
                                   np.asarray(mass.sum(axis=1)).ravel())
        assert isinstance(mass_preconditioner(mass), DiagonalMatrix)

    def test_unknown_kind(self, square):
        """Test an unknown preconditioner name is rejected."""
        mesh, dofmap = square

        with pytest.raises(ParameterError):
            mass_preconditioner(assemble_mass(mesh, dofmap), "ilu")


class TestSchurIdentity:
    """Test the energy Schur complement collapses to rho K + M."""

    @pytest.mark.parametrize("dim, cells", [(2, 8), (3, 4)])
    @pytest.mark.parametrize("rho", ["h2", 0.1, 1.0])
    def test_identity_holds(self, dim, cells, rho):
        """Test the max relative deviation stays below 1e-9."""
        mesh = build_unit_cube_mesh(cells, dim)
        value = (1.0 / cells) ** 2 if rho == "h2" else rho

        assert verify_schur_identity(mesh, DofMap.from_mesh(mesh), value) <= 1e-9

    def test_wrong_rho_is_detected(self):
        """Test comparing against 2 rho gives an O(1) deviation."""
        mesh = build_unit_cube_mesh(8, 2)
        rho = 1.0 / 64

        deviation = verify_schur_identity(mesh, DofMap.from_mesh(mesh), rho, rho_reference=2 * rho)

        assert deviation > 1e-2

    def test_rejects_nonpositive_rho(self, unit_square, square_dofmap):
        """Test rho must be positive."""
        with pytest.raises(ParameterError):
            verify_schur_identity(unit_square, square_dofmap, 0.0)


class TestSpectralEquivalence:
    """Test the eigenvalue bounds of the Schur complement against lump(M)."""

    def test_one_dimensional_hand_values(self):
        """Test the two-dof 1D case against closed-form eigenvalues."""
        mesh = build_unit_cube_mesh(3, 1)
        report = verify_spectral_equivalence(mesh, DofMap.from_mesh(mesh), Regularization())

        assert report.mass_min == pytest.approx(0.6, rel=1e-12)
        assert report.mass_max == pytest.approx(1.0, rel=1e-12)
        assert report.lambda_min == pytest.approx(2.2, rel=1e-8)
        assert report.lambda_max == pytest.approx(4.2, rel=1e-8)
        assert report.c_inv == pytest.approx(np.sqrt(3.6), rel=1e-12)
        assert report.lower_bound == pytest.approx(1.0 / 3.0)
        assert report.upper_bound == pytest.approx(4.6, rel=1e-12)
        assert report.passed

    @pytest.mark.parametrize("kind", ["energy", "l2"])
    @pytest.mark.parametrize("dim, cells", [(1, 16), (2, 8), (3, 4)])
    def test_bounds_hold(self, kind, dim, cells):
        """Test both chains of the bound for adapted rho on small meshes."""
        mesh = build_unit_cube_mesh(cells, dim)
        dofmap = DofMap.from_mesh(mesh)
        report = verify_spectral_equivalence(mesh, dofmap, Regularization(kind=kind))

        assert dofmap.n_free <= 600
        assert report.method == "dense"
        assert report.exponent == (2 if kind == "energy" else 4)
        assert report.mass_min >= 1.0 / (dim + 2) - 1e-10
        assert report.lambda_max <= report.c_inv**report.exponent + 1 + 1e-8
        assert report.passed
        assert report.as_dict()["passed"] is True


class TestCrossForm:
    """Test all admissible forms produce the same state."""

    def test_energy_forms_agree(self, square):
        """Test primal, Schur and saddle states agree to 1e-6."""
        mesh, dofmap = square
        result = verify_cross_form(mesh, dofmap, Regularization())

        assert result["reference"] == "primal"
        assert set(result["deviations"]) == {"schur", "saddle"}
        assert max(result["deviations"].values()) <= 1e-6

    def test_l2_forms_agree(self, square):
        """Test Schur and saddle states agree under L2 regularization."""
        mesh, dofmap = square
        result = verify_cross_form(mesh, dofmap, Regularization(kind="l2"))

        assert result["reference"] == "schur"
        assert result["deviations"]["saddle"] <= 1e-6
