"""Unit tests for mesh construction, refinement and marking."""

import numpy as np
import pytest

from mesh import (
    Prolongation,
    build_unit_cube_mesh,
    check_conformity,
    element_size,
    mark_doerfler,
    read_mesh,
    refine_adaptive,
    refine_uniform,
    uniform_mesh,
    write_mesh,
)
from utils.errors import ParameterError


def _linear(points):
    return 0.3 + points @ np.array([1.0, -2.0, 0.5])[: points.shape[1]]


class TestBuildUnitCubeMesh:
    """Test the Kuhn triangulation of the unit cube."""

    @pytest.mark.parametrize(
        "n, d, vertices, elements",
        [(1, 1, 2, 1), (2, 2, 9, 8), (2, 3, 27, 48), (4, 3, 125, 384)],
    )
    def test_counts(self, n, d, vertices, elements):
        """Test (n+1)^d vertices and d!·n^d elements."""
        mesh = build_unit_cube_mesh(n, d)

        assert mesh.n_vertices == vertices
        assert mesh.n_elements == elements

    def test_reference_cube_counts(self):
        """Test the 16^3 cube mesh has 4,913 vertices and 24,576 tetrahedra."""
        mesh = build_unit_cube_mesh(16, 3)

        assert mesh.n_vertices == 4913
        assert mesh.n_elements == 24576

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_volumes_cover_domain(self, d):
        """Test element volumes are positive and sum to one."""
        mesh = build_unit_cube_mesh(3, d)
        volumes = mesh.volumes()

        assert np.all(volumes > 0)
        assert volumes.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_conforming(self, d):
        """Test the initial mesh passes the shared-face test."""
        assert check_conformity(build_unit_cube_mesh(3, d))

    def test_boundary_flags(self, unit_square):
        """Test boundary flags mark exactly the vertices with a coordinate 0 or 1."""
        coords = unit_square.vertices
        expected = np.any((coords == 0.0) | (coords == 1.0), axis=1)

        np.testing.assert_array_equal(unit_square.boundary_vertex, expected)
        assert (~unit_square.boundary_vertex).sum() == 9

    def test_arrays_are_read_only(self, unit_square):
        """Test mesh arrays cannot be modified after construction."""
        with pytest.raises(ValueError):
            unit_square.vertices[0, 0] = 0.5

    def test_refinement_edge_is_first_to_last(self, unit_cube):
        """Test every element reports the (x_0, x_d) edge as refinement edge."""
        assert np.all(unit_cube.refinement_edge == 2)

    @pytest.mark.parametrize("n, d", [(0, 2), (2, 4), (2, 0)])
    def test_invalid_arguments(self, n, d):
        """Test zero cells or unsupported dimensions are rejected."""
        with pytest.raises(ParameterError):
            build_unit_cube_mesh(n, d)


class TestElementSize:
    """Test element diameters."""

    def test_kuhn_tetrahedron(self):
        """Test the longest edge of a Kuhn tetrahedron is the cell diagonal."""
        mesh = build_unit_cube_mesh(16, 3)

        assert element_size(mesh, 0) == pytest.approx(np.sqrt(3) / 16, abs=1e-15)

    def test_interval(self):
        """Test a 1D element of length 0.5."""
        mesh = build_unit_cube_mesh(2, 1)

        assert element_size(mesh, 0) == pytest.approx(0.5)

    def test_right_triangle(self):
        """Test the unit right triangle has diameter sqrt(2)."""
        mesh = build_unit_cube_mesh(1, 2)

        assert element_size(mesh, 0) == pytest.approx(np.sqrt(2))

    def test_jacobian_size_is_lattice_spacing(self):
        """Test (d!|τ|)^(1/d) equals 1/n on a Kuhn mesh."""
        mesh = build_unit_cube_mesh(16, 3)

        np.testing.assert_allclose(mesh.jacobian_sizes(), 1.0 / 16, rtol=1e-12)

    def test_index_out_of_range(self, unit_square):
        """Test an invalid element index is rejected."""
        with pytest.raises(ParameterError):
            element_size(unit_square, unit_square.n_elements)


class TestRefineUniform:
    """Test red refinement."""

    @pytest.mark.parametrize("n, d", [(4, 1), (3, 2), (2, 3)])
    def test_lattice_counts(self, n, d):
        """Test refined counts match the (2n+1)^d lattice and 2^d children."""
        mesh = build_unit_cube_mesh(n, d)
        fine, prolongation = refine_uniform(mesh)

        assert fine.n_vertices == (2 * n + 1) ** d
        assert fine.n_elements == 2**d * mesh.n_elements
        assert prolongation.coarse_dofs == mesh.n_vertices
        assert prolongation.fine_dofs == fine.n_vertices

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_children_keep_parent_volume(self, d):
        """Test children of each parent sum to the parent volume."""
        mesh = build_unit_cube_mesh(2, d)
        fine, _ = refine_uniform(mesh)
        children = fine.volumes().reshape(mesh.n_elements, -1).sum(axis=1)

        np.testing.assert_allclose(children, mesh.volumes(), atol=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_conforming_after_refinement(self, d):
        """Test two uniform refinements stay conforming."""
        mesh = build_unit_cube_mesh(2, d)
        for _ in range(2):
            mesh, _ = refine_uniform(mesh)
            assert check_conformity(mesh)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_halves_diameters(self, d):
        """Test red refinement of a lattice mesh halves every diameter."""
        mesh = build_unit_cube_mesh(2, d)
        fine, _ = refine_uniform(mesh)

        np.testing.assert_allclose(fine.element_sizes(), mesh.element_sizes()[0] / 2, rtol=1e-14)

    def test_single_interval(self):
        """Test the 1D midpoint gets two half weights."""
        mesh = build_unit_cube_mesh(1, 1)
        fine, prolongation = refine_uniform(mesh)
        rows = prolongation.rows()

        assert fine.n_elements == 2
        assert rows[0] == [(0, 1.0)]
        assert sorted(rows[2]) == [(0, 0.5), (1, 0.5)]

    def test_reference_cube_level_two(self):
        """Test 4,913 vertices refine to 35,937 and 196,608 elements."""
        fine, _ = refine_uniform(build_unit_cube_mesh(16, 3))

        assert fine.n_vertices == 35937
        assert fine.n_elements == 196608

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_prolongation_reproduces_linear_functions(self, d):
        """Test prolongating a linear interpolant equals the fine interpolant."""
        mesh = build_unit_cube_mesh(2, d)
        fine, prolongation = refine_uniform(mesh)

        np.testing.assert_allclose(
            prolongation.apply(_linear(mesh.vertices)), _linear(fine.vertices), atol=1e-14
        )

    def test_prolongation_weights(self, unit_square):
        """Test weights sum to one with one or two entries per row."""
        _, prolongation = refine_uniform(unit_square)
        for row in prolongation.rows():
            weights = [w for _, w in row]
            assert sum(weights) == pytest.approx(1.0)
            assert weights in ([1.0], [0.5, 0.5])

    @pytest.mark.parametrize("d", [2, 3])
    def test_refined_kuhn_mesh_is_finer_kuhn_mesh(self, d):
        """Test refining the n-cell Kuhn mesh gives the 2n-cell Kuhn mesh simplex for simplex."""
        fine, _ = refine_uniform(build_unit_cube_mesh(2, d))
        direct = build_unit_cube_mesh(4, d)

        def simplices(mesh):
            corners = np.rint(mesh.vertices[mesh.elements] * 4).astype(int)
            return sorted(tuple(sorted(map(tuple, c))) for c in corners)

        assert simplices(fine) == simplices(direct)

    def test_refined_levels_keep_lattice_spacing(self):
        """Test (d!|τ|)^(1/d) halves exactly on each refined level of the 4-cell cube."""
        mesh = uniform_mesh(2, 4, 3)
        np.testing.assert_allclose(mesh.jacobian_sizes(), 1.0 / 8, rtol=1e-12)

        finer, _ = refine_uniform(mesh)
        np.testing.assert_allclose(finer.jacobian_sizes(), 1.0 / 16, rtol=1e-12)

    def test_uniform_mesh_levels(self):
        """Test uniform_mesh applies levels-1 refinements."""
        assert uniform_mesh(1, 4, 3).n_vertices == 125
        assert uniform_mesh(2, 4, 3).n_vertices == 729
        assert uniform_mesh(3, 2, 2).n_vertices == 81


class TestRefineAdaptive:
    """Test newest-vertex bisection with closure."""

    def test_empty_marking(self, unit_square):
        """Test no marked elements leaves the mesh unchanged."""
        fine, prolongation = refine_adaptive(unit_square, [])

        assert fine is unit_square
        assert prolongation.matrix.shape == (unit_square.n_vertices, unit_square.n_vertices)
        assert prolongation.rows()[3] == [(3, 1.0)]

    def test_interval_bisection(self):
        """Test bisecting the first of two intervals."""
        mesh = build_unit_cube_mesh(2, 1)
        fine, prolongation = refine_adaptive(mesh, [0])

        assert fine.n_elements == 3
        np.testing.assert_allclose(np.sort(fine.volumes()), [0.25, 0.25, 0.5])
        assert sorted(prolongation.rows()[3]) == [(0, 0.5), (1, 0.5)]

    def test_square_single_mark(self):
        """Test marking one triangle of the 2x2 Kuhn mesh yields a conforming mesh."""
        mesh = build_unit_cube_mesh(2, 2)
        fine, _ = refine_adaptive(mesh, [0])

        assert fine.n_elements >= 9
        assert check_conformity(fine)
        assert fine.volumes().sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_repeated_refinement_near_corner(self, d):
        """Test repeated bisection towards the origin stays conforming."""
        mesh = build_unit_cube_mesh(2, d)
        for _ in range(6):
            centroids = mesh.vertices[mesh.elements].mean(axis=1)
            marked = np.flatnonzero(np.linalg.norm(centroids, axis=1) < 0.5)
            mesh, prolongation = refine_adaptive(mesh, marked)

            assert check_conformity(mesh)
            assert mesh.volumes().sum() == pytest.approx(1.0, abs=1e-12)
        assert mesh.element_sizes().min() < 0.5 * mesh.element_sizes().max()

    @pytest.mark.parametrize("d", [2, 3])
    def test_prolongation_reproduces_linear_functions(self, d):
        """Test prolongation is exact for linear functions after closure."""
        mesh = build_unit_cube_mesh(2, d)
        fine, prolongation = refine_adaptive(mesh, [0, 3])

        np.testing.assert_allclose(
            prolongation.apply(_linear(mesh.vertices)), _linear(fine.vertices), atol=1e-14
        )

    def test_marked_elements_are_bisected(self, unit_square):
        """Test every marked element loses half of its volume."""
        fine, _ = refine_adaptive(unit_square, [5])

        assert fine.volumes()[5] == pytest.approx(unit_square.volumes()[5] / 2)
        assert fine.element_generation[5] == 1

    def test_invalid_index(self, unit_square):
        """Test marked indices outside the mesh are rejected."""
        with pytest.raises(ParameterError):
            refine_adaptive(unit_square, [unit_square.n_elements])


class TestMarkDoerfler:
    """Test bulk-criterion marking."""

    @pytest.mark.parametrize(
        "indicators, theta, expected",
        [
            ([3, 0, 0, 0], 0.5, [0]),
            ([1, 1, 1, 1], 0.5, [0, 1]),
            ([2, 1], 1.0, [0, 1]),
            ([1, 3, 2], 0.5, [1]),
            ([1, 3, 2], 0.8, [1, 2]),
        ],
    )
    def test_examples(self, indicators, theta, expected):
        """Test greedy minimal sets with ties broken by lower index."""
        np.testing.assert_array_equal(mark_doerfler(indicators, theta), expected)

    def test_all_zero(self):
        """Test zero indicators give an empty set."""
        assert mark_doerfler([0.0, 0.0, 0.0]).size == 0

    def test_theta_one_marks_zero_indicators(self):
        """Test theta=1 marks every element, including zero indicators."""
        np.testing.assert_array_equal(mark_doerfler([2.0, 0.0, 1.0], 1.0), [0, 1, 2])
        np.testing.assert_array_equal(mark_doerfler([0.0, 0.0], 1.0), [0, 1])

    def test_negative_indicator(self):
        """Test negative indicators are rejected."""
        with pytest.raises(ParameterError):
            mark_doerfler([1.0, -0.1])

    @pytest.mark.parametrize("theta", [0.0, 1.5])
    def test_invalid_theta(self, theta):
        """Test theta outside (0, 1] is rejected."""
        with pytest.raises(ParameterError):
            mark_doerfler([1.0, 2.0], theta)


class TestMeshIO:
    """Test the plain-text mesh dump."""

    def test_write_then_read(self, tmp_path, unit_cube):
        """Test a dumped mesh reads back with the same geometry."""
        path = tmp_path / "cube.txt"
        write_mesh(unit_cube, path)
        loaded = read_mesh(path)

        assert path.read_text().splitlines()[0] == "3 27 48"
        np.testing.assert_array_equal(loaded.elements, unit_cube.elements)
        np.testing.assert_array_equal(loaded.vertices, unit_cube.vertices)
        np.testing.assert_array_equal(loaded.boundary_vertex, unit_cube.boundary_vertex)

    def test_identity_prolongation(self):
        """Test the identity prolongation copies values."""
        values = np.arange(4.0)

        np.testing.assert_array_equal(Prolongation.identity(4).apply(values), values)
