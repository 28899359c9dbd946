"""P1 finite element assembly with exact integration of box-indicator targets."""

import logging
from dataclasses import dataclass
from math import factorial, sqrt
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from scipy.spatial import Delaunay, QhullError

from linalg.kernels import get_threads, to_csr
from linalg.matrices import DiagonalMatrix
from mesh import Mesh, Prolongation
from utils.errors import DimensionMismatchError, NumericalError, ParameterError
from utils.validation import require_positive_array

logger = logging.getLogger(__name__)

# Elements per assembly task; fixed so the merge order does not depend on threads
ASSEMBLY_BLOCK = 65536
CLASSIFY_TOL = 1e-14
DEGENERATE_PIECE = 1e-15


@dataclass(frozen=True)
class DofMap:
    """Free (interior) vertex numbering for the homogeneous Dirichlet problem."""

    n_vertices: int
    free: np.ndarray
    full_to_free: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "DofMap":
        free = np.flatnonzero(~mesh.boundary_vertex).astype(np.int64)
        full_to_free = np.full(mesh.n_vertices, -1, dtype=np.int64)
        full_to_free[free] = np.arange(free.size)
        free.flags.writeable = False
        full_to_free.flags.writeable = False
        return cls(n_vertices=mesh.n_vertices, free=free, full_to_free=full_to_free)

    @property
    def n_free(self) -> int:
        return self.free.shape[0]

    def restrict(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.n_vertices:
            raise DimensionMismatchError(
                f"Expected {self.n_vertices} vertex values, got {values.shape[0]}"
            )
        return values[self.free]

    def extend(self, values: np.ndarray) -> np.ndarray:
        """Free-dof vector to all vertices, zero on the boundary."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.n_free:
            raise DimensionMismatchError(f"Expected {self.n_free} free values, got {values.shape[0]}")
        full = np.zeros(self.n_vertices)
        full[self.free] = values
        return full


def restrict_vector(dofmap: DofMap, values: np.ndarray) -> np.ndarray:
    return dofmap.restrict(values)


def extend_vector(dofmap: DofMap, values: np.ndarray) -> np.ndarray:
    return dofmap.extend(values)


@dataclass(frozen=True)
class BoxTarget:
    """Piecewise constant desired state: inside_value on the box, outside_value elsewhere."""

    lower: np.ndarray
    upper: np.ndarray
    inside_value: float = 1.0
    outside_value: float = 0.0

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64).ravel()
        upper = np.asarray(self.upper, dtype=np.float64).ravel()
        if lower.shape != upper.shape:
            raise ParameterError(f"Box corners differ in dimension: {lower.shape} vs {upper.shape}")
        if np.any(lower >= upper):
            raise ParameterError(f"Box lower corner {lower} must be below upper corner {upper}")
        if np.any(lower < 0) or np.any(upper > 1):
            raise ParameterError(f"Box [{lower}, {upper}] must lie inside the unit cube")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def centered(cls, dim: int, lower: float = 0.25, upper: float = 0.75) -> "BoxTarget":
        return cls(np.full(dim, lower), np.full(dim, upper))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        inside = np.all((points >= self.lower) & (points <= self.upper), axis=1)
        return np.where(inside, self.inside_value, self.outside_value)


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference simplex in barycentric coordinates.

    Weights sum to one; multiply by |τ| to integrate over τ.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @classmethod
    def vertex(cls, d: int) -> "QuadratureRule":
        return cls(np.eye(d + 1), np.full(d + 1, 1.0 / (d + 1)), 1)

    @classmethod
    def centroid(cls, d: int) -> "QuadratureRule":
        return cls(np.full((1, d + 1), 1.0 / (d + 1)), np.ones(1), 1)

    @classmethod
    def degree_two(cls, d: int) -> "QuadratureRule":
        """Stroud's (d+1)-point rule, exact for quadratics."""
        b = (d + 2 - sqrt(d + 2)) / ((d + 2) * (d + 1))
        a = 1.0 - d * b
        points = np.full((d + 1, d + 1), b)
        np.fill_diagonal(points, a)
        return cls(points, np.full(d + 1, 1.0 / (d + 1)), 2)

    def integrate(self, vertex_values: np.ndarray, volumes: np.ndarray,
                  func: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
        """Per-element ∫_τ func(u_h) for P1 vertex values of shape (ne, d+1)."""
        at_points = np.asarray(vertex_values) @ self.points.T
        if func is not None:
            at_points = func(at_points)
        return volumes * (at_points @ self.weights)


def element_geometry(mesh: Mesh, start: int = 0, stop: Optional[int] = None
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric gradients (ne, d+1, d) and volumes (ne,) of a range of elements."""
    d = mesh.dim
    coords = mesh.vertices[mesh.elements[start:stop]]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    inverse = np.linalg.inv(edges)
    grads = np.empty((coords.shape[0], d + 1, d))
    grads[:, 1:, :] = np.swapaxes(inverse, 1, 2)
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    volumes = np.abs(np.linalg.det(edges)) / factorial(d)
    return grads, volumes


def _element_coefficients(mesh: Mesh, coeff) -> np.ndarray:
    values = np.asarray(coeff, dtype=np.float64)
    if values.ndim == 0:
        values = np.full(mesh.n_elements, float(values))
    if values.shape != (mesh.n_elements,):
        raise DimensionMismatchError(
            f"Coefficient has shape {values.shape}, mesh has {mesh.n_elements} elements"
        )
    return require_positive_array("Element coefficient", values)


def _assemble(mesh: Mesh, local: Callable[[int, int], np.ndarray],
              dofmap: Optional[DofMap]) -> sp.csr_matrix:
    """Sum element matrices into CSR.

    Each block of elements builds its own COO triplets; blocks are merged in
    block order.
    """
    nv = mesh.n_vertices
    k = mesh.dim + 1

    def block(start: int, stop: int) -> sp.csr_matrix:
        elements = mesh.elements[start:stop]
        rows = np.repeat(elements, k, axis=1).ravel()
        cols = np.tile(elements, (1, k)).ravel()
        return sp.csr_matrix((local(start, stop).ravel(), (rows, cols)), shape=(nv, nv))

    ranges = [(s, min(s + ASSEMBLY_BLOCK, mesh.n_elements))
              for s in range(0, mesh.n_elements, ASSEMBLY_BLOCK)]
    if len(ranges) == 1:
        parts = [block(*ranges[0])]
    else:
        parts = Parallel(n_jobs=get_threads(), prefer="threads")(
            delayed(block)(s, e) for s, e in ranges
        )
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    total = to_csr(total)
    if dofmap is None:
        return total
    return apply_dirichlet(total, dofmap)


def assemble_stiffness(mesh: Mesh, dofmap: Optional[DofMap], coeff=1.0) -> sp.csr_matrix:
    """Stiffness Σ_τ coeff_τ ∫_τ ∇φ_j·∇φ_i.

    Args:
        mesh: Simplicial mesh
        dofmap: Free-dof numbering, or None for the all-vertex matrix
        coeff: Scalar or per-element coefficient, e.g. ϱ_τ

    Returns:
        Symmetric CSR matrix on the free dofs (or all vertices)
    """
    coeff = _element_coefficients(mesh, coeff)

    def local(start: int, stop: int) -> np.ndarray:
        grads, volumes = element_geometry(mesh, start, stop)
        return (coeff[start:stop] * volumes)[:, None, None] * np.einsum(
            "eik,ejk->eij", grads, grads
        )

    matrix = _assemble(mesh, local, dofmap)
    logger.debug(f"Assembled stiffness: {matrix.shape[0]} dofs, {matrix.nnz} nonzeros")
    return matrix


def assemble_mass(mesh: Mesh, dofmap: Optional[DofMap], coeff=1.0) -> sp.csr_matrix:
    """Consistent mass (M_τ)_ij = coeff_τ |τ| (1+δ_ij) / ((d+1)(d+2))."""
    d = mesh.dim
    coeff = _element_coefficients(mesh, coeff)
    pattern = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    volumes = mesh.volumes()

    def local(start: int, stop: int) -> np.ndarray:
        return (coeff[start:stop] * volumes[start:stop])[:, None, None] * pattern[None, :, :]

    matrix = _assemble(mesh, local, dofmap)
    logger.debug(f"Assembled mass: {matrix.shape[0]} dofs, {matrix.nnz} nonzeros")
    return matrix


def lump_mass(M) -> DiagonalMatrix:
    """Row-sum lumping D = lump(M)."""
    if isinstance(M, DiagonalMatrix):
        return M
    sums = np.asarray(M.sum(axis=1)).ravel()
    if np.any(sums <= 0) or not np.all(np.isfinite(sums)):
        bad = int(np.argmin(sums))
        raise NumericalError(
            f"Lumped mass has non-positive row sum {sums[bad]:.3e} at row {bad}",
            suggested_action="Check the mesh for degenerate or inverted elements.",
            context={"row": bad},
        )
    return DiagonalMatrix(sums)


def apply_dirichlet(A: sp.spmatrix, dofmap: DofMap) -> sp.csr_matrix:
    """Restrict an all-vertex matrix to the free dofs."""
    if A.shape != (dofmap.n_vertices, dofmap.n_vertices):
        raise DimensionMismatchError(f"Matrix shape {A.shape} does not match {dofmap.n_vertices} vertices")
    A = sp.csr_matrix(A)
    return to_csr(A[dofmap.free][:, dofmap.free])


def prolongate(prolongation: Prolongation, coarse: DofMap, fine: DofMap,
               values: np.ndarray) -> np.ndarray:
    """Map a coarse free-dof vector to the fine free dofs (boundary values stay zero)."""
    return fine.restrict(prolongation.apply(coarse.extend(values)))


def interpolate(mesh: Mesh, dofmap: DofMap, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal interpolant of f on the free dofs; f maps (n, d) points to (n,) values."""
    return np.asarray(f(mesh.vertices[dofmap.free]), dtype=np.float64)


# ---------------------------------------------------------------------------
# Exact integration against the box indicator
# ---------------------------------------------------------------------------


def classify_elements(mesh: Mesh, target: BoxTarget) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks (inside, outside, cut) of elements relative to the box."""
    coords = mesh.vertices[mesh.elements]
    lo = coords.min(axis=1)
    hi = coords.max(axis=1)
    inside = np.all((lo >= target.lower - CLASSIFY_TOL) & (hi <= target.upper + CLASSIFY_TOL), axis=1)
    outside = np.any((hi <= target.lower + CLASSIFY_TOL) | (lo >= target.upper - CLASSIFY_TOL), axis=1)
    outside &= ~inside
    cut = ~(inside | outside)
    return inside, outside, cut


def _clip_halfspace(points: np.ndarray, axis: int, bound: float, sign: float) -> np.ndarray:
    """Convex hull generators of conv(points) ∩ {sign·(x_axis − bound) ≥ 0}."""
    s = sign * (points[:, axis] - bound)
    keep = s >= 0
    if keep.all() or not keep.any():
        return points if keep.all() else points[:0]
    pos = np.flatnonzero(s > 0)
    neg = np.flatnonzero(s < 0)
    i, j = np.meshgrid(pos, neg, indexing="ij")
    i, j = i.ravel(), j.ravel()
    t = s[i] / (s[i] - s[j])
    crossings = points[i] + t[:, None] * (points[j] - points[i])
    crossings[:, axis] = bound
    return np.vstack([points[keep], crossings])


def clip_simplex_to_box(simplex: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Triangulation of simplex ∩ box as an array of sub-simplices (k, d+1, d).

    The simplex is clipped successively against the 2d box half-spaces and the
    remaining convex polytope is re-triangulated. Pieces with measure below
    1e-15·|simplex| are dropped.

    Args:
        simplex: Vertex coordinates, shape (d+1, d)
        lower: Lower box corner
        upper: Upper box corner

    Returns:
        Sub-simplices of shape (k, d+1, d); k = 0 when the intersection has no volume
    """
    simplex = np.asarray(simplex, dtype=np.float64)
    d = simplex.shape[1]
    reference = abs(np.linalg.det(simplex[1:] - simplex[0])) / factorial(d)
    points = simplex
    for axis in range(d):
        points = _clip_halfspace(points, axis, lower[axis], 1.0)
        points = _clip_halfspace(points, axis, upper[axis], -1.0)
        if points.shape[0] < d + 1:
            return np.empty((0, d + 1, d))

    points = np.unique(np.round(points, 15), axis=0)
    if points.shape[0] < d + 1:
        return np.empty((0, d + 1, d))
    if d == 1:
        pieces = np.array([[[points[:, 0].min()], [points[:, 0].max()]]])
    else:
        try:
            pieces = points[Delaunay(points).simplices]
        except QhullError:
            return np.empty((0, d + 1, d))

    volumes = np.abs(np.linalg.det(pieces[:, 1:, :] - pieces[:, :1, :])) / factorial(d)
    return pieces[volumes >= DEGENERATE_PIECE * reference]


def _cut_piece_integrals(mesh: Mesh, cut: np.ndarray, target: BoxTarget
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """For cut elements: ∫_{τ∩B} φ_i for each local vertex, and |τ∩B|."""
    d = mesh.dim
    indices = np.flatnonzero(cut)
    basis = np.zeros((indices.size, d + 1))
    measure = np.zeros(indices.size)
    if indices.size == 0:
        return basis, measure

    for row, tau in enumerate(indices):
        coords = mesh.vertices[mesh.elements[tau]]
        inverse = np.linalg.inv(coords[1:] - coords[0])
        pieces = clip_simplex_to_box(coords, target.lower, target.upper)
        if pieces.shape[0] == 0:
            continue
        volumes = np.abs(np.linalg.det(pieces[:, 1:, :] - pieces[:, :1, :])) / factorial(d)
        centroids = pieces.mean(axis=1)
        local = (centroids - coords[0]) @ inverse
        bary = np.column_stack([1.0 - local.sum(axis=1), local])
        basis[row] = volumes @ bary
        measure[row] = volumes.sum()
    logger.debug(f"Clipped {indices.size} cut elements against the target box")
    return basis, measure


def _box_basis_integrals(mesh: Mesh, target: BoxTarget) -> np.ndarray:
    """(ne, d+1) array of ∫_{τ∩B} φ_i."""
    if target.dim != mesh.dim:
        raise DimensionMismatchError(f"Box dimension {target.dim} != mesh dimension {mesh.dim}")
    d = mesh.dim
    inside, _, cut = classify_elements(mesh, target)
    volumes = mesh.volumes()
    integrals = np.zeros((mesh.n_elements, d + 1))
    integrals[inside] = (volumes[inside] / (d + 1))[:, None]
    integrals[cut], _ = _cut_piece_integrals(mesh, cut, target)
    return integrals


def assemble_load_box_target(mesh: Mesh, dofmap: Optional[DofMap], target: BoxTarget
                             ) -> np.ndarray:
    """Load vector ∫_Ω y_d φ_i with y_d integrated exactly on clipped element pieces.

    Args:
        mesh: Simplicial mesh
        dofmap: Free-dof numbering, or None for all vertices
        target: Piecewise constant desired state

    Returns:
        Load vector on the free dofs (or all vertices)
    """
    d = mesh.dim
    volumes = mesh.volumes()
    local = target.outside_value * np.repeat((volumes / (d + 1))[:, None], d + 1, axis=1)
    local += (target.inside_value - target.outside_value) * _box_basis_integrals(mesh, target)
    full = np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return full if dofmap is None else dofmap.restrict(full)


def _vertex_values(mesh: Mesh, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == mesh.n_vertices:
        return y
    dofmap = DofMap.from_mesh(mesh)
    return dofmap.extend(y)


def element_error_indicators(mesh: Mesh, y: np.ndarray, target: BoxTarget) -> np.ndarray:
    """η_τ = ‖y_h − y_d‖_{L2(τ)}; y is given on free dofs or on all vertices.

    With y_d = b + (a − b)χ_B the element integral splits into ∫_τ (y_h − b)², exact
    with the degree-two rule, and ∫_{τ∩B} (b − a)(2y_h − a − b), which is linear
    in y_h and exact by the centroid value on each piece.

    Args:
        mesh: Simplicial mesh
        y: Discrete state on the free dofs or on all vertices
        target: Piecewise constant desired state

    Returns:
        Array of η_τ, one per element; their squares sum to the squared global error
    """
    d = mesh.dim
    values = _vertex_values(mesh, y)[mesh.elements]
    volumes = mesh.volumes()
    a, b = target.inside_value, target.outside_value

    squared = QuadratureRule.degree_two(d).integrate(values, volumes, lambda u: (u - b) ** 2)
    if a != b:
        basis = _box_basis_integrals(mesh, target)
        inside, _, cut = classify_elements(mesh, target)
        measure = np.zeros(mesh.n_elements)
        measure[inside] = volumes[inside]
        measure[cut] = basis[cut].sum(axis=1)
        linear = np.einsum("ei,ei->e", basis, values)
        squared += (b - a) * (2.0 * linear - (a + b) * measure)
    return np.sqrt(np.maximum(squared, 0.0))


def l2_error_box_target(mesh: Mesh, y: np.ndarray, target: BoxTarget) -> float:
    """‖y_h − y_d‖_{L2(Ω)} with exact clipped integration."""
    eta = element_error_indicators(mesh, y, target)
    return float(np.sqrt(np.sum(eta**2)))

