"""Discrete forms of the tracking-type optimal control problem and their structural checks."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from fem import (
    BoxTarget,
    DofMap,
    assemble_load_box_target,
    assemble_mass,
    assemble_stiffness,
    lump_mass,
)
from linalg import DiagonalMatrix, KrylovReport, extremal_generalized_eigs, minres, pcg
from mesh import Mesh
from utils.errors import InnerSolveError, ParameterError
from utils.validation import require_positive

logger = logging.getLogger(__name__)

INNER_TOL = 1e-10
INNER_MAX_ITERS = 10000
MESH_SIZE_MEASURES = ("jacobian", "diameter")


class RegularizationKind(str, Enum):
    ENERGY = "energy"
    L2 = "l2"


class RhoMode(str, Enum):
    CONSTANT = "constant"
    ADAPTED = "adapted"


class ProblemForm(str, Enum):
    PRIMAL = "primal"
    SCHUR = "schur"
    SADDLE = "saddle"


@dataclass(frozen=True)
class Regularization:
    """Control cost and the coupling ϱ.

    Adapted mode uses ϱ_τ = h_τ^r with r = 2 (energy) or r = 4 (L2), where h_τ is
    measured by ``mesh_size``. ``lumped`` only affects L2: A = lump(M_{1/ϱ}) when
    set, the consistent M_{1/ϱ} with an inner solve otherwise.
    """

    kind: RegularizationKind = RegularizationKind.ENERGY
    rho_mode: RhoMode = RhoMode.ADAPTED
    value: Optional[float] = None
    lumped: bool = True
    mesh_size: str = "jacobian"

    def __post_init__(self):
        object.__setattr__(self, "kind", RegularizationKind(self.kind))
        object.__setattr__(self, "rho_mode", RhoMode(self.rho_mode))
        if self.rho_mode is RhoMode.CONSTANT:
            if self.value is None:
                raise ParameterError("Constant regularization needs a value")
            require_positive("rho", self.value)
        if self.mesh_size not in MESH_SIZE_MEASURES:
            raise ParameterError(
                f"Unknown mesh size measure '{self.mesh_size}'; expected one of {MESH_SIZE_MEASURES}"
            )

    @property
    def exponent(self) -> int:
        return 2 if self.kind is RegularizationKind.ENERGY else 4

    @classmethod
    def balanced(cls, kind: Union[str, RegularizationKind], mesh: Mesh, **kwargs) -> "Regularization":
        """Constant ϱ = h^r with h the largest element size of the mesh."""
        adapted = cls(kind=kind, rho_mode=RhoMode.ADAPTED, **kwargs)
        h = float(np.max(adapted.element_sizes(mesh)))
        return cls(kind=kind, rho_mode=RhoMode.CONSTANT, value=h**adapted.exponent, **kwargs)

    def element_sizes(self, mesh: Mesh) -> np.ndarray:
        return mesh.jacobian_sizes() if self.mesh_size == "jacobian" else mesh.element_sizes()

    def rho_per_element(self, mesh: Mesh) -> np.ndarray:
        if self.rho_mode is RhoMode.CONSTANT:
            return np.full(mesh.n_elements, float(self.value))
        return self.element_sizes(mesh) ** self.exponent

    def describe(self) -> str:
        rho = f"constant:{self.value:g}" if self.rho_mode is RhoMode.CONSTANT else f"h^{self.exponent}"
        return f"{self.kind.value}, rho={rho}"


RegularizationBlock = Union[sp.csr_matrix, DiagonalMatrix]


@dataclass
class DiscreteSystem:
    """Assembled problem on the free dofs.

    For the saddle form the unknown is (p, y) and the operator is the block matrix;
    otherwise the unknown is the state y.
    """

    form: ProblemForm
    operator: Union[sp.csr_matrix, LinearOperator]
    rhs: np.ndarray
    dofmap: DofMap
    regularization: Regularization
    mass: sp.csr_matrix
    coupling: sp.csr_matrix
    regularization_block: Optional[RegularizationBlock]
    rho: np.ndarray

    @property
    def n(self) -> int:
        return self.rhs.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.operator @ x


@dataclass
class SaddleSolution:
    y: np.ndarray
    p: np.ndarray

    def control(self, system: DiscreteSystem) -> np.ndarray:
        return recover_control(system, self.p)


def _common(mesh: Mesh, dofmap: DofMap, target: Optional[BoxTarget]):
    target = target or BoxTarget.centered(mesh.dim)
    mass = assemble_mass(mesh, dofmap)
    load = assemble_load_box_target(mesh, dofmap, target)
    return mass, load


def build_primal_system(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                        target: Optional[BoxTarget] = None) -> DiscreteSystem:
    """(K_ϱ + M) y = y_d for energy regularization."""
    if reg.kind is not RegularizationKind.ENERGY:
        raise ParameterError(
            "The primal diffusion form exists only for energy regularization",
            suggested_action="Use --form schur or --form saddle with --reg l2.",
        )
    rho = reg.rho_per_element(mesh)
    mass, load = _common(mesh, dofmap, target)
    stiffness = assemble_stiffness(mesh, dofmap)
    operator = assemble_stiffness(mesh, dofmap, rho) + mass
    logger.debug(f"Primal system: {dofmap.n_free} dofs, {reg.describe()}")
    return DiscreteSystem(
        form=ProblemForm.PRIMAL,
        operator=operator.tocsr(),
        rhs=load,
        dofmap=dofmap,
        regularization=reg,
        mass=mass,
        coupling=stiffness,
        regularization_block=None,
        rho=rho,
    )


def _regularization_block(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                          rho: np.ndarray) -> RegularizationBlock:
    """A_{1/ϱ}: K_{1/ϱ} (energy), lump(M_{1/ϱ}) or M_{1/ϱ} (L2)."""
    if reg.kind is RegularizationKind.ENERGY:
        return assemble_stiffness(mesh, dofmap, 1.0 / rho)
    weighted = assemble_mass(mesh, dofmap, 1.0 / rho)
    return lump_mass(weighted) if reg.lumped else weighted


def _inverse(block: RegularizationBlock, inner_tol: float):
    """v ↦ A^{-1} v; exact for diagonal A, inner PCG otherwise."""
    if isinstance(block, DiagonalMatrix):
        return block.solve

    jacobi = DiagonalMatrix.from_matrix_diagonal(block)

    def solve(v: np.ndarray) -> np.ndarray:
        if not np.any(v):
            return np.zeros_like(v)
        w, report = pcg(block, jacobi, v, rel_tol=inner_tol, max_iters=INNER_MAX_ITERS)
        if not report.converged:
            raise InnerSolveError(
                f"Inner solve stalled at relative residual {report.relative_residual:.3e} "
                f"after {report.iterations} iterations",
                context={"inner_tol": inner_tol, "iterations": report.iterations},
            )
        return w

    return solve


def build_schur_operator(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                         target: Optional[BoxTarget] = None,
                         inner_tol: float = INNER_TOL) -> DiscreteSystem:
    """Matrix-free S = Kᵀ A_{1/ϱ}^{-1} K + M."""
    rho = reg.rho_per_element(mesh)
    mass, load = _common(mesh, dofmap, target)
    stiffness = assemble_stiffness(mesh, dofmap)
    block = _regularization_block(mesh, dofmap, reg, rho)
    inverse = _inverse(block, inner_tol)

    def matvec(v: np.ndarray) -> np.ndarray:
        v = np.ravel(v)
        return stiffness @ inverse(stiffness @ v) + mass @ v

    n = dofmap.n_free
    operator = LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=np.float64)
    logger.debug(f"Schur operator: {n} dofs, {reg.describe()}, lumped={reg.lumped}")
    return DiscreteSystem(
        form=ProblemForm.SCHUR,
        operator=operator,
        rhs=load,
        dofmap=dofmap,
        regularization=reg,
        mass=mass,
        coupling=stiffness,
        regularization_block=block,
        rho=rho,
    )


def build_saddle_system(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                        target: Optional[BoxTarget] = None) -> DiscreteSystem:
    """[[A, K], [K, -M]] (p, y) = (0, -y_d)."""
    rho = reg.rho_per_element(mesh)
    mass, load = _common(mesh, dofmap, target)
    stiffness = assemble_stiffness(mesh, dofmap)
    block = _regularization_block(mesh, dofmap, reg, rho)
    leading = block.as_matrix() if isinstance(block, DiagonalMatrix) else block
    operator = sp.bmat([[leading, stiffness], [stiffness.T, -mass]], format="csr")
    rhs = np.concatenate([np.zeros(dofmap.n_free), -load])
    logger.debug(f"Saddle system: {2 * dofmap.n_free} unknowns, {reg.describe()}")
    return DiscreteSystem(
        form=ProblemForm.SADDLE,
        operator=operator,
        rhs=rhs,
        dofmap=dofmap,
        regularization=reg,
        mass=mass,
        coupling=stiffness,
        regularization_block=block,
        rho=rho,
    )


def build_system(form: Union[str, ProblemForm], mesh: Mesh, dofmap: DofMap, reg: Regularization,
                 target: Optional[BoxTarget] = None, inner_tol: float = INNER_TOL) -> DiscreteSystem:
    """Build the discrete system of the requested form.

    Args:
        form: "primal", "schur" or "saddle"
        mesh: Simplicial mesh
        dofmap: Free-dof numbering of the mesh
        reg: Regularization kind and ϱ
        target: Desired state, the centered box by default
        inner_tol: Relative tolerance of inner solves in the Schur operator

    Returns:
        DiscreteSystem ready for `solve_system`

    Raises:
        ParameterError: For the primal form with L2 regularization
        ValueError: For an unknown form name
    """
    form = ProblemForm(form)
    if form is ProblemForm.PRIMAL:
        return build_primal_system(mesh, dofmap, reg, target)
    if form is ProblemForm.SCHUR:
        return build_schur_operator(mesh, dofmap, reg, target, inner_tol)
    return build_saddle_system(mesh, dofmap, reg, target)


def mass_preconditioner(mass: sp.csr_matrix, kind: str = "diag") -> DiagonalMatrix:
    """diag(M) or lump(M) on the free dofs."""
    if kind == "diag":
        return DiagonalMatrix.from_matrix_diagonal(mass)
    if kind == "lumped":
        return lump_mass(mass)
    raise ParameterError(f"Unknown preconditioner '{kind}'; expected 'diag' or 'lumped'")


def saddle_preconditioner(system: DiscreteSystem, kind: str = "diag") -> DiagonalMatrix:
    """Block diagonal [diag(A), diag(M) or lump(M)]."""
    block = system.regularization_block
    leading = block if isinstance(block, DiagonalMatrix) else DiagonalMatrix.from_matrix_diagonal(block)
    return DiagonalMatrix.concatenate([leading, mass_preconditioner(system.mass, kind)])


def solve_saddle(system: DiscreteSystem, rel_tol: float = 1e-6, max_iters: int = 1000,
                 preconditioner: str = "diag", x0: Optional[np.ndarray] = None
                 ) -> Tuple[SaddleSolution, KrylovReport]:
    """MINRES on the saddle form; x0 is an optional initial state."""
    if system.form is not ProblemForm.SADDLE:
        raise ParameterError(f"solve_saddle needs a saddle system, got {system.form.value}")
    n = system.dofmap.n_free
    start = None
    if x0 is not None:
        start = np.concatenate([np.zeros(n), np.asarray(x0, dtype=np.float64)])
    x, report = minres(system.operator, saddle_preconditioner(system, preconditioner), system.rhs,
                       start, rel_tol, max_iters)
    return SaddleSolution(y=x[n:], p=x[:n]), report


def solve_system(system: DiscreteSystem, rel_tol: float = 1e-6, max_iters: int = 1000,
                 preconditioner: str = "diag", x0: Optional[np.ndarray] = None
                 ) -> Tuple[np.ndarray, KrylovReport]:
    """State y: PCG for primal and Schur forms, MINRES for the saddle form.

    Args:
        system: System built by `build_system`
        rel_tol: Reduction of the preconditioned residual norm
        max_iters: Iteration cap
        preconditioner: "diag" for diag(M) or "lumped" for lump(M)
        x0: Initial state, zero when None

    Returns:
        Tuple of (state on the free dofs, KrylovReport)
    """
    if system.form is ProblemForm.SADDLE:
        solution, report = solve_saddle(system, rel_tol, max_iters, preconditioner, x0)
        return solution.y, report
    precond = mass_preconditioner(system.mass, preconditioner)
    return pcg(system.operator, precond, system.rhs, x0, rel_tol, max_iters)


def recover_control(system: DiscreteSystem, p: np.ndarray) -> np.ndarray:
    """u = -A_{1/ϱ} p."""
    block = system.regularization_block
    if block is None:
        raise ParameterError(
            "Control recovery needs the regularization block of a Schur or saddle system"
        )
    p = np.asarray(p, dtype=np.float64)
    if isinstance(block, DiagonalMatrix):
        return -block.apply(p)
    return -(block @ p)


def verify_schur_identity(mesh: Mesh, dofmap: DofMap, rho_const: float, n_vectors: int = 20,
                          seed: int = 0, rho_reference: Optional[float] = None,
                          inner_tol: float = INNER_TOL) -> float:
    """Max relative deviation between Kᵀ K_{1/ϱ}^{-1} K + M and ϱK + M on random unit vectors.

    ``rho_reference`` replaces ϱ in the explicit operator; a wrong value must show up
    as an O(1) deviation.

    Args:
        mesh: Simplicial mesh
        dofmap: Free-dof numbering
        rho_const: Constant ϱ of the Schur operator
        n_vectors: Number of random unit vectors
        seed: Seed of the random vectors
        rho_reference: ϱ of the explicit operator, rho_const when None
        inner_tol: Inner solve tolerance

    Returns:
        Largest ‖(S − ϱK − M)v‖ / ‖(ϱK + M)v‖ over the vectors
    """
    require_positive("rho_const", rho_const)
    reference_rho = rho_const if rho_reference is None else rho_reference
    reg = Regularization(RegularizationKind.ENERGY, RhoMode.CONSTANT, value=rho_const)
    schur = build_schur_operator(mesh, dofmap, reg, inner_tol=inner_tol)
    explicit = (reference_rho * schur.coupling + schur.mass).tocsr()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_vectors):
        v = rng.standard_normal(dofmap.n_free)
        v /= np.linalg.norm(v)
        expected = explicit @ v
        deviation = np.linalg.norm(schur.apply(v) - expected) / np.linalg.norm(expected)
        worst = max(worst, float(deviation))
    logger.info(
        f"Schur identity on {dofmap.n_free} dofs, rho={rho_const:g}: max relative deviation {worst:.3e}"
    )
    return worst


@dataclass
class SpectralReport:
    """Extremal eigenvalues of D⁻¹M and D⁻¹S with their theoretical bounds."""

    dim: int
    exponent: int
    mass_min: float
    mass_max: float
    lambda_min: float
    lambda_max: float
    lower_bound: float
    c_inv: float
    upper_bound: float
    method: str
    confident: bool

    @property
    def passed(self) -> bool:
        return (
            self.mass_min >= self.lower_bound - 1e-10
            and self.mass_max <= 1.0 + 1e-10
            and self.lambda_min >= self.lower_bound - 1e-10
            and self.lambda_max <= self.upper_bound + 1e-8
        )

    def as_dict(self) -> dict:
        fields = {k: v for k, v in self.__dict__.items()}
        fields["passed"] = self.passed
        return fields


def verify_spectral_equivalence(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                                n_small_threshold: int = 600,
                                inner_tol: float = INNER_TOL) -> SpectralReport:
    """Check (d+2)^{-1} D ≤ M ≤ S ≤ (c_inv^r + 1) D with D = lump(M).

    c_inv is estimated on the same mesh as sqrt(λ_max(D⁻¹ K_{h²})), with K_{h²} the
    stiffness matrix weighted by h_τ² in the regularization's size measure.

    Args:
        mesh: Simplicial mesh
        dofmap: Free-dof numbering
        reg: Regularization defining S and the exponent r
        n_small_threshold: Largest size solved densely
        inner_tol: Inner solve tolerance

    Returns:
        SpectralReport with the computed bounds and whether they hold
    """
    schur = build_schur_operator(mesh, dofmap, reg, inner_tol=inner_tol)
    lumped = lump_mass(schur.mass)

    mass_min, mass_max = extremal_generalized_eigs(schur.mass, lumped, n_small_threshold)
    sizes = reg.element_sizes(mesh)
    weighted = assemble_stiffness(mesh, dofmap, sizes**2)
    c_inv = float(np.sqrt(extremal_generalized_eigs(weighted, lumped, n_small_threshold).lambda_max))
    estimate = extremal_generalized_eigs(schur.operator, lumped, n_small_threshold)

    report = SpectralReport(
        dim=mesh.dim,
        exponent=reg.exponent,
        mass_min=mass_min,
        mass_max=mass_max,
        lambda_min=estimate.lambda_min,
        lambda_max=estimate.lambda_max,
        lower_bound=1.0 / (mesh.dim + 2),
        c_inv=c_inv,
        upper_bound=c_inv**reg.exponent + 1.0,
        method=estimate.method,
        confident=estimate.confident,
    )
    log = logger.info if report.passed else logger.warning
    log(
        f"Spectral check d={mesh.dim}, {reg.describe()}: D^-1 M in [{mass_min:.4f}, {mass_max:.4f}], "
        f"D^-1 S in [{report.lambda_min:.4f}, {report.lambda_max:.4f}], "
        f"bounds [{report.lower_bound:.4f}, {report.upper_bound:.4f}], passed={report.passed}"
    )
    return report


def verify_cross_form(mesh: Mesh, dofmap: DofMap, reg: Regularization,
                      target: Optional[BoxTarget] = None, rel_tol: float = 1e-10,
                      max_iters: int = 20000, preconditioner: str = "diag") -> dict:
    """Solve every admissible form and report ‖y_form − y_ref‖_M against the first one.

    The reference is the primal solve for energy regularization, the Schur solve for L2.
    """
    forms = [ProblemForm.SCHUR, ProblemForm.SADDLE]
    if reg.kind is RegularizationKind.ENERGY:
        forms.insert(0, ProblemForm.PRIMAL)

    states = {}
    mass = None
    for form in forms:
        system = build_system(form, mesh, dofmap, reg, target)
        y, report = solve_system(system, rel_tol, max_iters, preconditioner)
        if not report.converged:
            logger.warning(f"Cross-form check: {form.value} solve did not converge")
        states[form.value] = y
        mass = system.mass

    reference = forms[0].value
    deviations = {}
    for name, y in states.items():
        if name == reference:
            continue
        diff = y - states[reference]
        deviations[name] = float(np.sqrt(diff @ (mass @ diff)))
    logger.info(f"Cross-form deviations against {reference}: {deviations}")
    return {"reference": reference, "deviations": deviations}
