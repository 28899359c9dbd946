"""Conforming simplicial meshes of the unit d-cube with uniform and bisection refinement."""

import logging
from dataclasses import dataclass
from itertools import combinations, permutations
from math import factorial
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import scipy.sparse as sp

from utils.errors import MeshError, ParameterError
from utils.validation import (
    require_dimension,
    require_fraction,
    require_index_set,
    require_positive_int,
)

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-14
MAX_CLOSURE_ROUNDS = 1000
# Octahedron diagonals within this relative length count as tied
DIAGONAL_TIE_TOL = 1e-10

# Edge keys encode (lo, hi) vertex pairs as lo * _KEY_BASE + hi
_KEY_BASE = np.int64(1) << np.int64(31)

LOCAL_EDGES = {d: list(combinations(range(d + 1), 2)) for d in (1, 2, 3)}


def _edge_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * _KEY_BASE + hi


def _boundary_flags(vertices: np.ndarray) -> np.ndarray:
    on_zero = np.abs(vertices) <= BOUNDARY_TOL
    on_one = np.abs(vertices - 1.0) <= BOUNDARY_TOL
    return np.any(on_zero | on_one, axis=1)


@dataclass
class Mesh:
    """Simplicial mesh of [0,1]^d.

    Element vertex order is significant: for bisection the refinement edge is
    (x_0, x_d) and ``element_tag`` is the Maubach/Stevenson tag of the element.
    Arrays are frozen after construction so a mesh can be shared across threads.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    boundary_vertex: np.ndarray
    element_generation: np.ndarray
    element_tag: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        self.boundary_vertex = np.asarray(self.boundary_vertex, dtype=bool)
        self.element_generation = np.asarray(self.element_generation, dtype=np.int64)
        self.element_tag = np.asarray(self.element_tag, dtype=np.int64)
        for arr in (
            self.vertices,
            self.elements,
            self.boundary_vertex,
            self.element_generation,
            self.element_tag,
        ):
            arr.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def refinement_edge(self) -> np.ndarray:
        """Local index (into ``LOCAL_EDGES[dim]``) of each element's refinement edge."""
        index = LOCAL_EDGES[self.dim].index((0, self.dim))
        return np.full(self.n_elements, index, dtype=np.int64)

    def volumes(self) -> np.ndarray:
        """Per-element measure |τ|."""
        coords = self.vertices[self.elements]
        edges = coords[:, 1:, :] - coords[:, :1, :]
        return np.abs(np.linalg.det(edges)) / factorial(self.dim)

    def element_sizes(self) -> np.ndarray:
        """Per-element diameter (longest edge length)."""
        coords = self.vertices[self.elements]
        sizes = np.zeros(self.n_elements)
        for i, j in LOCAL_EDGES[self.dim]:
            sizes = np.maximum(sizes, np.linalg.norm(coords[:, i, :] - coords[:, j, :], axis=1))
        return sizes

    def jacobian_sizes(self) -> np.ndarray:
        """Per-element size (d! |τ|)^(1/d); the lattice spacing for Kuhn simplices."""
        return (factorial(self.dim) * self.volumes()) ** (1.0 / self.dim)

    def edges(self) -> np.ndarray:
        """Unique edges as an (m, 2) array of sorted vertex pairs."""
        pairs = np.concatenate(
            [self.elements[:, [i, j]] for i, j in LOCAL_EDGES[self.dim]], axis=0
        )
        return np.unique(np.sort(pairs, axis=1), axis=0)


@dataclass
class Prolongation:
    """P1 interpolation from a coarse mesh to the next finer mesh (all vertices)."""

    coarse_dofs: int
    fine_dofs: int
    matrix: sp.csr_matrix

    @classmethod
    def identity(cls, n: int) -> "Prolongation":
        return cls(coarse_dofs=n, fine_dofs=n, matrix=sp.identity(n, format="csr"))

    def rows(self) -> List[List[Tuple[int, float]]]:
        """For each fine vertex, the (coarse vertex, weight) pairs."""
        m = self.matrix
        return [
            list(zip(m.indices[m.indptr[i] : m.indptr[i + 1]].tolist(),
                     m.data[m.indptr[i] : m.indptr[i + 1]].tolist()))
            for i in range(self.fine_dofs)
        ]

    def apply(self, coarse_values: np.ndarray) -> np.ndarray:
        """Map coarse vertex values to fine vertex values."""
        coarse_values = np.asarray(coarse_values, dtype=np.float64)
        if coarse_values.shape[0] != self.coarse_dofs:
            raise ParameterError(
                f"Expected {self.coarse_dofs} coarse values, got {coarse_values.shape[0]}"
            )
        return self.matrix @ coarse_values


def _make_mesh(
    dim: int,
    vertices: np.ndarray,
    elements: np.ndarray,
    generation: np.ndarray,
    tags: np.ndarray,
) -> Mesh:
    return Mesh(
        dim=dim,
        vertices=vertices,
        elements=elements,
        boundary_vertex=_boundary_flags(vertices),
        element_generation=generation,
        element_tag=tags,
    )


def build_unit_cube_mesh(n: int, d: int) -> Mesh:
    """Kuhn/Freudenthal triangulation of [0,1]^d with n cells per axis.

    Each lattice cell is split into d! simplices, one per axis permutation, with
    vertices ordered along the monotone path from the cell corner to the opposite
    corner. All tags start at 0.

    Args:
        n: Cells per axis
        d: Spatial dimension, 1 to 3

    Returns:
        Mesh with (n+1)^d vertices and n^d·d! elements

    Raises:
        ParameterError: If n is not a positive integer or d is out of range
    """
    require_positive_int("n", n)
    d = require_dimension(d)

    strides = np.array([(n + 1) ** (d - 1 - k) for k in range(d)], dtype=np.int64)
    lattice = np.stack(np.meshgrid(*([np.arange(n + 1)] * d), indexing="ij"), axis=-1)
    vertices = lattice.reshape(-1, d).astype(np.float64) / n

    cells = np.stack(np.meshgrid(*([np.arange(n)] * d), indexing="ij"), axis=-1)
    base = cells.reshape(-1, d).astype(np.int64) @ strides

    perms = list(permutations(range(d)))
    offsets = np.zeros((len(perms), d + 1), dtype=np.int64)
    for p_idx, perm in enumerate(perms):
        for j, axis in enumerate(perm):
            offsets[p_idx, j + 1] = offsets[p_idx, j] + strides[axis]
    elements = (base[:, None, None] + offsets[None, :, :]).reshape(-1, d + 1)

    ne = elements.shape[0]
    logger.debug(f"Built Kuhn mesh: d={d}, n={n}, {vertices.shape[0]} vertices, {ne} elements")
    return _make_mesh(d, vertices, elements, np.zeros(ne, np.int64), np.zeros(ne, np.int64))


def uniform_mesh(levels: int, cells: int, dim: int) -> Mesh:
    """Level-`levels` mesh of the uniform hierarchy started from the Kuhn mesh."""
    require_positive_int("levels", levels)
    mesh = build_unit_cube_mesh(cells, dim)
    for _ in range(levels - 1):
        mesh, _ = refine_uniform(mesh)
    return mesh


# Red refinement templates: ints are parent vertices, tuples are edge midpoints.
_RED_CHILDREN = {
    1: [(0, (0, 1)), ((0, 1), 1)],
    2: [
        (0, (0, 1), (0, 2)),
        ((0, 1), 1, (1, 2)),
        ((0, 2), (1, 2), 2),
        ((0, 1), (0, 2), (1, 2)),
    ],
    3: [
        (0, (0, 1), (0, 2), (0, 3)),
        ((0, 1), 1, (1, 2), (1, 3)),
        ((0, 2), (1, 2), 2, (2, 3)),
        ((0, 3), (1, 3), (2, 3), 3),
    ],
}

# Interior octahedron splits, one per diagonal; the first entry keeps Kuhn
# simplices Kuhn-ordered after refinement and wins ties.
_OCTAHEDRON_SPLITS = [
    (
        ((0, 2), (1, 3)),
        [
            ((0, 1), (0, 2), (0, 3), (1, 3)),
            ((0, 1), (0, 2), (1, 2), (1, 3)),
            ((0, 2), (0, 3), (1, 3), (2, 3)),
            ((0, 2), (1, 2), (1, 3), (2, 3)),
        ],
    ),
    (
        ((0, 3), (1, 2)),
        [
            ((0, 3), (1, 2), (0, 1), (0, 2)),
            ((0, 3), (1, 2), (0, 2), (2, 3)),
            ((0, 3), (1, 2), (2, 3), (1, 3)),
            ((0, 3), (1, 2), (1, 3), (0, 1)),
        ],
    ),
    (
        ((0, 1), (2, 3)),
        [
            ((0, 1), (2, 3), (0, 2), (0, 3)),
            ((0, 1), (2, 3), (0, 3), (1, 3)),
            ((0, 1), (2, 3), (1, 3), (1, 2)),
            ((0, 1), (2, 3), (1, 2), (0, 2)),
        ],
    ),
]


def refine_uniform(mesh: Mesh) -> Tuple[Mesh, Prolongation]:
    """Red refinement: every simplex is split into 2^d children.

    In 3D the interior octahedron is cut along its shortest diagonal; among tied
    diagonals the split keeping Kuhn simplices Kuhn-ordered wins, so refining the
    n-cell Kuhn mesh gives the 2n-cell Kuhn mesh.

    Args:
        mesh: Mesh to refine

    Returns:
        Tuple of (fine mesh, prolongation from coarse to fine vertex values)
    """
    d = mesh.dim
    nv = mesh.n_vertices
    ne = mesh.n_elements
    local = LOCAL_EDGES[d]
    el = mesh.elements

    keys = np.stack([_edge_keys(el[:, i], el[:, j]) for i, j in local], axis=1)
    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
    edge_mid = nv + inverse.reshape(keys.shape)
    a = unique_keys // _KEY_BASE
    b = unique_keys % _KEY_BASE
    vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[a] + mesh.vertices[b])])

    def column(token):
        if isinstance(token, tuple):
            return edge_mid[:, local.index(token)]
        return el[:, token]

    def build(template):
        return np.stack([np.stack([column(t) for t in child], axis=1) for child in template], axis=1)

    children = build(_RED_CHILDREN[d])
    if d == 3:
        lengths = []
        for (e1, e2), _ in _OCTAHEDRON_SPLITS:
            p = vertices[column(e1)] - vertices[column(e2)]
            lengths.append(np.einsum("ij,ij->i", p, p))
        lengths = np.stack(lengths, axis=1)
        shortest = lengths.min(axis=1, keepdims=True)
        choice = np.argmax(lengths <= shortest * (1.0 + DIAGONAL_TIE_TOL), axis=1)
        inner = np.zeros((ne, 4, 4), dtype=np.int64)
        for k, (_, template) in enumerate(_OCTAHEDRON_SPLITS):
            mask = choice == k
            if np.any(mask):
                inner[mask] = build(template)[mask]
        children = np.concatenate([children, inner], axis=1)

    n_children = children.shape[1]
    elements = children.reshape(-1, d + 1)
    generation = np.repeat(mesh.element_generation + 1, n_children)
    tags = np.zeros(elements.shape[0], dtype=np.int64)

    n_new = unique_keys.shape[0]
    rows = np.concatenate([np.arange(nv), nv + np.arange(n_new), nv + np.arange(n_new)])
    cols = np.concatenate([np.arange(nv), a, b])
    vals = np.concatenate([np.ones(nv), np.full(n_new, 0.5), np.full(n_new, 0.5)])
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(nv + n_new, nv))

    fine = _make_mesh(d, vertices, elements, generation, tags)
    logger.debug(f"Uniform refinement: {ne} -> {fine.n_elements} elements, {fine.n_vertices} vertices")
    return fine, Prolongation(coarse_dofs=nv, fine_dofs=fine.n_vertices, matrix=matrix)


def _bisect(
    elements: np.ndarray, tags: np.ndarray, midpoints: np.ndarray, d: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Children of tagged simplices (x_0, ..., x_d)_γ bisected at z on edge (x_0, x_d).

    child 1: (x_0, z, x_1, ..., x_{d-1})
    child 2: (x_d, z, x_1, ..., x_γ, x_{d-1}, ..., x_{γ+1})
    both with tag (γ + 1) mod d.
    """
    first = np.column_stack([elements[:, 0], midpoints, elements[:, 1:d]])
    second = np.empty_like(first)
    for gamma in np.unique(tags):
        sel = tags == gamma
        inner = elements[sel, 1:d]
        second[sel] = np.column_stack(
            [elements[sel, d], midpoints[sel], inner[:, :gamma], inner[:, gamma:][:, ::-1]]
        )
    new_tags = (tags + 1) % d
    return first, second, new_tags


def refine_adaptive(mesh: Mesh, marked) -> Tuple[Mesh, Prolongation]:
    """Newest-vertex bisection of the marked elements with conforming closure.

    Marked elements are bisected once along their refinement edge; afterwards every
    element carrying a bisected edge is bisected along its own refinement edge
    until no hanging vertex remains.

    Args:
        mesh: Mesh to refine
        marked: Indices of the elements to bisect

    Returns:
        Tuple of (fine mesh, composed prolongation); an empty marking returns the
        mesh itself with the identity prolongation

    Raises:
        ParameterError: If an index is out of range
        MeshError: If the closure does not terminate
    """
    d = mesh.dim
    nv0 = mesh.n_vertices
    marked = require_index_set("marked", marked, mesh.n_elements)
    if marked.size == 0:
        return mesh, Prolongation.identity(nv0)

    local = LOCAL_EDGES[d]
    vertices = mesh.vertices
    elements = np.array(mesh.elements)
    tags = np.array(mesh.element_tag)
    generation = np.array(mesh.element_generation)

    split_keys = np.empty(0, dtype=np.int64)
    split_mid = np.empty(0, dtype=np.int64)
    prolongation = sp.identity(nv0, format="csr")

    to_bisect = marked
    rounds = 0
    while to_bisect.size:
        rounds += 1
        if rounds > MAX_CLOSURE_ROUNDS:
            raise MeshError(
                f"Bisection closure did not finish within {MAX_CLOSURE_ROUNDS} rounds",
                error_code="CLOSURE_NOT_TERMINATING",
                suggested_action="Adaptive refinement requires a Kuhn-ordered initial mesh.",
            )

        sub = elements[to_bisect]
        keys = _edge_keys(sub[:, 0], sub[:, d])
        new_keys = np.setdiff1d(keys, split_keys)
        if new_keys.size:
            a = new_keys // _KEY_BASE
            b = new_keys % _KEY_BASE
            nv = vertices.shape[0]
            vertices = np.vstack([vertices, 0.5 * (vertices[a] + vertices[b])])
            new_rows = 0.5 * (prolongation[a] + prolongation[b])
            prolongation = sp.vstack([prolongation, new_rows], format="csr")
            split_keys = np.concatenate([split_keys, new_keys])
            split_mid = np.concatenate([split_mid, nv + np.arange(new_keys.size)])
            order = np.argsort(split_keys)
            split_keys = split_keys[order]
            split_mid = split_mid[order]

        mids = split_mid[np.searchsorted(split_keys, keys)]
        first, second, new_tags = _bisect(sub, tags[to_bisect], mids, d)
        elements[to_bisect] = first
        elements = np.vstack([elements, second])
        tags[to_bisect] = new_tags
        tags = np.concatenate([tags, new_tags])
        generation[to_bisect] += 1
        generation = np.concatenate([generation, generation[to_bisect]])

        touched = np.zeros(vertices.shape[0], dtype=bool)
        touched[split_keys // _KEY_BASE] = True
        touched[split_keys % _KEY_BASE] = True
        candidates = np.flatnonzero(touched[elements].any(axis=1))
        if candidates.size == 0:
            break
        cand = elements[candidates]
        cand_keys = np.stack([_edge_keys(cand[:, i], cand[:, j]) for i, j in local], axis=1)
        hanging = np.isin(cand_keys, split_keys).any(axis=1)
        to_bisect = candidates[hanging]
        logger.debug(f"Bisection round {rounds}: {to_bisect.size} elements with hanging vertices")

    fine = _make_mesh(d, vertices, elements, generation, tags)
    logger.debug(
        f"Adaptive refinement: {marked.size} marked, {mesh.n_elements} -> {fine.n_elements} "
        f"elements in {rounds} rounds"
    )
    return fine, Prolongation(coarse_dofs=nv0, fine_dofs=fine.n_vertices, matrix=prolongation)


def mark_doerfler(indicators, theta: float = 0.5) -> np.ndarray:
    """Minimal set of elements carrying a fraction theta of the squared indicators.

    Elements are taken greedily by descending indicator; ties go to the lower index.
    theta = 1 marks every element whatever its indicator.

    Args:
        indicators: Nonnegative per-element error indicators
        theta: Bulk fraction in (0, 1]

    Returns:
        Sorted element indices; empty when every indicator is zero and theta < 1
    """
    eta = np.asarray(indicators, dtype=np.float64).ravel()
    require_fraction("theta", theta)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ParameterError("Error indicators must be finite and nonnegative")
    if theta == 1.0:
        return np.arange(eta.size, dtype=np.int64)

    squares = eta**2
    order = np.argsort(-squares, kind="stable")
    cumulative = np.cumsum(squares[order])
    if cumulative.size == 0 or cumulative[-1] == 0:
        return np.empty(0, dtype=np.int64)

    count = int(np.searchsorted(cumulative, theta * cumulative[-1], side="left")) + 1
    count = min(count, eta.size)
    return np.sort(order[:count])


def element_size(mesh: Mesh, tau: int) -> float:
    """Diameter h_τ (longest edge) of element tau."""
    if not 0 <= tau < mesh.n_elements:
        raise ParameterError(f"Element index {tau} out of range [0, {mesh.n_elements})")
    coords = mesh.vertices[mesh.elements[tau]]
    return max(float(np.linalg.norm(coords[i] - coords[j])) for i, j in LOCAL_EDGES[mesh.dim])


def check_conformity(mesh: Mesh) -> bool:
    """Shared-face test.

    Every (d-1)-face must be shared by exactly two elements, or by one element and
    lie in a face of the unit cube. Element volumes must be positive.
    """
    d = mesh.dim
    if np.any(mesh.volumes() <= 0):
        return False

    faces = np.concatenate([np.delete(mesh.elements, k, axis=1) for k in range(d + 1)], axis=0)
    faces = np.sort(faces, axis=1)
    unique_faces, counts = np.unique(faces, axis=0, return_counts=True)
    if np.any(counts > 2):
        return False

    single = unique_faces[counts == 1]
    coords = mesh.vertices[single]
    on_cube_face = np.zeros(single.shape[0], dtype=bool)
    for axis in range(d):
        c = coords[:, :, axis]
        on_cube_face |= np.all(np.abs(c) <= BOUNDARY_TOL, axis=1)
        on_cube_face |= np.all(np.abs(c - 1.0) <= BOUNDARY_TOL, axis=1)
    return bool(np.all(on_cube_face))


def write_mesh(mesh: Mesh, path: Union[str, Path]) -> None:
    """Write the plain-text dump: `dim nv ne`, vertex lines, 0-based element lines."""
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements}\n")
        np.savetxt(f, mesh.vertices, fmt="%.17g")
        np.savetxt(f, mesh.elements, fmt="%d")
    logger.info(f"Wrote mesh with {mesh.n_elements} elements to {path}")


def read_mesh(path: Union[str, Path]) -> Mesh:
    """Read a mesh written by `write_mesh` (tags and generations reset to 0)."""
    path = Path(path)
    with open(path, "r") as f:
        header = f.readline().split()
        if len(header) != 3:
            raise MeshError(f"Malformed mesh header in {path}: {header}")
        dim, nv, ne = (int(x) for x in header)
        vertices = np.loadtxt(f, max_rows=nv, ndmin=2)
        elements = np.loadtxt(f, max_rows=ne, ndmin=2, dtype=np.int64)
    if vertices.shape != (nv, dim) or elements.shape != (ne, dim + 1):
        raise MeshError(f"Mesh file {path} does not match its header")
    return _make_mesh(dim, vertices, elements, np.zeros(ne, np.int64), np.zeros(ne, np.int64))
