"""P1 finite element assembly of the thermo-poroelastic operator set.

Bilinear forms have piecewise-constant coefficients, so their cell integrals
are polynomial of degree <= 2 and are integrated exactly (closed forms,
equivalent to the 3-point mid-edge rule).  Load vectors use a 6-point
degree-4 triangle rule; a 13-point degree-7 rule is kept as an oracle.

Every operator is assembled over all vertex dofs and then restricted to the
free dofs of its test (rows) and trial (columns) spaces, which imposes
homogeneous Dirichlet conditions without penalty terms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import finalize_csr
from .meshing import Mesh, SpaceSet

__all__ = [
    "PhysicalParams",
    "CoefficientField",
    "FormId",
    "FORM_SPACES",
    "assemble_form",
    "assemble_load",
    "LoadAssembler",
    "OperatorSet",
    "build_operator_set",
    "QUAD_ORDER4",
    "QUAD_ORDER7",
]


@dataclass(frozen=True)
class PhysicalParams:
    """Scalar material and scheme parameters.

    ``K_dr`` is the drained bulk modulus in two dimensions, lam + mu.
    ``L`` is the fixed-stress stabilization constant.
    """

    mu: float
    lam: float
    c0: float
    alpha: float
    alpha_T: float
    alpha_m: float
    C_d: float
    theta0: float
    L: float = 1.0

    def __post_init__(self) -> None:
        strictly_positive = {
            "mu": self.mu, "c0": self.c0, "C_d": self.C_d, "theta0": self.theta0,
        }
        for name, value in strictly_positive.items():
            if not value > 0.0:
                raise ValueError(f"{name} must be > 0, got {value}")
        nonnegative = {
            "lam": self.lam, "alpha": self.alpha, "alpha_T": self.alpha_T,
            "alpha_m": self.alpha_m, "L": self.L,
        }
        for name, value in nonnegative.items():
            if not value >= 0.0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @property
    def K_dr(self) -> float:
        return self.lam + self.mu


@dataclass(frozen=True)
class CoefficientField:
    """Piecewise-constant hydraulic (K) and thermal (D) conductivities.

    Values are keyed by cell label.  All values must be strictly positive.
    """

    K: dict[int, float]
    D: dict[int, float]

    def __post_init__(self) -> None:
        for name, table in (("K", self.K), ("D", self.D)):
            for label, value in table.items():
                if not value > 0.0:
                    raise ValueError(f"{name}[{label}] must be > 0, got {value}")

    @classmethod
    def constant(cls, K: float, D: float) -> "CoefficientField":
        return cls(K={1: K, 2: K}, D={1: D, 2: D})

    def k_per_cell(self, mesh: Mesh) -> np.ndarray:
        return self._per_cell(self.K, mesh)

    def d_per_cell(self, mesh: Mesh) -> np.ndarray:
        return self._per_cell(self.D, mesh)

    @staticmethod
    def _per_cell(table: dict[int, float], mesh: Mesh) -> np.ndarray:
        out = np.empty(mesh.n_cells)
        for label in np.unique(mesh.cell_labels):
            if int(label) not in table:
                raise KeyError(f"no coefficient for cell label {int(label)}")
            out[mesh.cell_labels == label] = table[int(label)]
        return out


class FormId(enum.Enum):
    """Identifiers of the bilinear forms of the coupled scheme.

    A* are stiffness-type blocks, M* backward-Euler mass-type blocks scaled
    by 1/dt, S* the fixed-stress stabilization blocks, GRAM_* the full H1
    inner products used for norms and POD.
    """

    AUU = "AUU"
    APP = "APP"
    ATT = "ATT"
    AUP = "AUP"
    AUT = "AUT"
    MPP = "MPP"
    MTT = "MTT"
    MPU = "MPU"
    MPT = "MPT"
    MTU = "MTU"
    MTP = "MTP"
    SPP = "SPP"
    STT = "STT"
    GRAM_U = "GRAM_U"
    GRAM_P = "GRAM_P"
    GRAM_T = "GRAM_T"


# (test space, trial space) per form; rows belong to the test space.
FORM_SPACES: dict[FormId, tuple[str, str]] = {
    FormId.AUU: ("u", "u"),
    FormId.APP: ("p", "p"),
    FormId.ATT: ("theta", "theta"),
    FormId.AUP: ("u", "p"),
    FormId.AUT: ("u", "theta"),
    FormId.MPP: ("p", "p"),
    FormId.MTT: ("theta", "theta"),
    FormId.MPU: ("p", "u"),
    FormId.MPT: ("p", "theta"),
    FormId.MTU: ("theta", "u"),
    FormId.MTP: ("theta", "p"),
    FormId.SPP: ("p", "p"),
    FormId.STT: ("theta", "theta"),
    FormId.GRAM_U: ("u", "u"),
    FormId.GRAM_P: ("p", "p"),
    FormId.GRAM_T: ("theta", "theta"),
}

_TIME_SCALED = {
    FormId.MPP, FormId.MTT, FormId.MPU, FormId.MPT, FormId.MTU, FormId.MTP,
    FormId.SPP, FormId.STT,
}

# Reference-triangle P1 mass matrix scaled by area/12.
_MASS_PATTERN = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])


def _dunavant(groups: list[tuple[float, list[tuple[float, float, float]]]]):
    points = []
    weights = []
    for w, pts in groups:
        for bary in pts:
            points.append(bary)
            weights.append(w)
    return np.array(points), np.array(weights)


def _perm3(a: float, b: float) -> list[tuple[float, float, float]]:
    return [(a, b, b), (b, a, b), (b, b, a)]


def _perm6(a: float, b: float, c: float) -> list[tuple[float, float, float]]:
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


# Degree-4 (6 points) and degree-7 (13 points) rules in barycentric
# coordinates; weights sum to one and multiply the cell area.
QUAD_ORDER4 = _dunavant([
    (0.223381589678011, _perm3(0.108103018168070, 0.445948490915965)),
    (0.109951743655322, _perm3(0.816847572980459, 0.091576213509771)),
])
QUAD_ORDER7 = _dunavant([
    (-0.149570044467670, [(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)]),
    (0.175615257433204, _perm3(0.479308067841923, 0.260345966079038)),
    (0.053347235608839, _perm3(0.869739794195568, 0.065130102902216)),
    (0.077113760890257, _perm6(0.638444188569809, 0.312865496004875,
                               0.048690315425316)),
])

_QUAD_RULES = {"order4": QUAD_ORDER4, "order7": QUAD_ORDER7}


class P1Kernels:
    """Vectorized element kernels for one mesh.

    Precomputes cell areas and the constant P1 basis gradients, then builds
    element arrays of shape (n_cells, n_test_local, n_trial_local) for each
    form.  Local vector dofs are ordered 2*i + component.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        cells = mesh.cells
        pts = mesh.vertices[cells]  # (nc, 3, 2)
        e1 = pts[:, 1] - pts[:, 0]
        e2 = pts[:, 2] - pts[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.area = 0.5 * det
        # grad lambda_i = (y_j - y_k, x_k - x_j) / (2A), cyclic in (i, j, k).
        grads = np.empty((mesh.n_cells, 3, 2))
        x = pts[..., 0]
        y = pts[..., 1]
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = (y[:, j] - y[:, k]) / det
            grads[:, i, 1] = (x[:, k] - x[:, j]) / det
        self.grads = grads
        self.gg = np.einsum("nik,njk->nij", grads, grads)  # grad_i . grad_j

    # ----- element arrays ----------------------------------------------

    def scalar_mass(self, coeff: np.ndarray | float = 1.0) -> np.ndarray:
        w = np.asarray(coeff) * self.area / 12.0
        return w[:, None, None] * _MASS_PATTERN

    def scalar_stiffness(self, coeff: np.ndarray | float = 1.0) -> np.ndarray:
        w = np.asarray(coeff) * self.area
        return w[:, None, None] * self.gg

    def vector_mass(self) -> np.ndarray:
        out = np.zeros((self.mesh.n_cells, 6, 6))
        block = self.scalar_mass()
        for c in range(2):
            out[:, c::2, c::2] = block
        return out

    def grad_gram(self) -> np.ndarray:
        out = np.zeros((self.mesh.n_cells, 6, 6))
        block = self.area[:, None, None] * self.gg
        for c in range(2):
            out[:, c::2, c::2] = block
        return out

    def eps_eps(self) -> np.ndarray:
        """(eps(u), eps(v)) element arrays for the vector space."""
        g = self.grads
        out = np.empty((self.mesh.n_cells, 6, 6))
        for c in range(2):
            for d in range(2):
                cross = np.einsum("ni,nj->nij", g[:, :, d], g[:, :, c])
                block = 0.5 * (cross + (self.gg if c == d else 0.0))
                out[:, c::2, d::2] = self.area[:, None, None] * block
        return out

    def div_div(self) -> np.ndarray:
        g = self.grads
        out = np.empty((self.mesh.n_cells, 6, 6))
        for c in range(2):
            for d in range(2):
                out[:, c::2, d::2] = self.area[:, None, None] * np.einsum(
                    "ni,nj->nij", g[:, :, c], g[:, :, d])
        return out

    def div_pairing_scalar_test(self) -> np.ndarray:
        """(div u_trial, q_test): rows scalar, columns vector."""
        out = np.empty((self.mesh.n_cells, 3, 6))
        for d in range(2):
            col = (self.area / 3.0)[:, None] * self.grads[:, :, d]
            out[:, :, d::2] = col[:, None, :]
        return out

    def div_pairing_vector_test(self) -> np.ndarray:
        """(q_trial, div v_test): rows vector, columns scalar."""
        out = np.empty((self.mesh.n_cells, 6, 3))
        for c in range(2):
            row = (self.area / 3.0)[:, None] * self.grads[:, :, c]
            out[:, c::2, :] = row[:, :, None]
        return out

    # ----- scatter -------------------------------------------------------

    def local_dofs(self, components: int) -> np.ndarray:
        cells = self.mesh.cells
        if components == 1:
            return cells
        out = np.empty((cells.shape[0], 3 * components), dtype=np.int64)
        for c in range(components):
            out[:, c::components] = components * cells + c
        return out

    def assemble(self, element: np.ndarray, test_components: int,
                 trial_components: int, spaces: SpaceSet,
                 test_field: str, trial_field: str) -> sp.csr_matrix:
        """Scatter element arrays into a CSR matrix on free dofs."""
        rows_local = self.local_dofs(test_components)
        cols_local = self.local_dofs(trial_components)
        n_test = rows_local.shape[1]
        n_trial = cols_local.shape[1]
        rows = np.repeat(rows_local, n_trial, axis=1).ravel()
        cols = np.tile(cols_local, (1, n_test)).ravel()
        data = element.reshape(element.shape[0], -1).ravel()

        fs_test = spaces.field(test_field)
        fs_trial = spaces.field(trial_field)
        r = fs_test.free_index[rows]
        c = fs_trial.free_index[cols]
        keep = (r >= 0) & (c >= 0)
        mat = sp.coo_matrix(
            (data[keep], (r[keep], c[keep])),
            shape=(fs_test.n_free, fs_trial.n_free),
        )
        return finalize_csr(mat)


def _components(field_name: str) -> int:
    return 2 if field_name == "u" else 1


def assemble_form(form: FormId, spaces: SpaceSet, params: PhysicalParams,
                  coeffs: CoefficientField, dt: float | None = None) -> sp.csr_matrix:
    """Assemble one bilinear form on the free dofs of its spaces.

    ``dt`` is required for the mass-type (M*) and stabilization (S*) forms,
    which carry a 1/dt factor.
    """
    if form in _TIME_SCALED:
        if dt is None or not dt > 0.0:
            raise ValueError(f"form {form.value} requires a positive dt")
    kern = P1Kernels(spaces.mesh)
    test_field, trial_field = FORM_SPACES[form]
    K_dr = params.K_dr

    if form is FormId.AUU:
        element = 2.0 * params.mu * kern.eps_eps() + params.lam * kern.div_div()
    elif form is FormId.APP:
        element = kern.scalar_stiffness(coeffs.k_per_cell(spaces.mesh))
    elif form is FormId.ATT:
        element = kern.scalar_stiffness(coeffs.d_per_cell(spaces.mesh))
    elif form is FormId.AUP:
        element = -params.alpha * kern.div_pairing_vector_test()
    elif form is FormId.AUT:
        element = -3.0 * params.alpha_T * K_dr * kern.div_pairing_vector_test()
    elif form is FormId.MPP:
        element = (params.c0 / dt) * kern.scalar_mass()
    elif form is FormId.MTT:
        element = (params.C_d / dt) * kern.scalar_mass()
    elif form is FormId.MPU:
        element = (params.alpha / dt) * kern.div_pairing_scalar_test()
    elif form is FormId.MPT:
        element = (-3.0 * params.alpha_m / dt) * kern.scalar_mass()
    elif form is FormId.MTU:
        element = (3.0 * params.alpha_T * K_dr * params.theta0 / dt) * \
            kern.div_pairing_scalar_test()
    elif form is FormId.MTP:
        element = (-3.0 * params.alpha_m * params.theta0 / dt) * kern.scalar_mass()
    elif form is FormId.SPP:
        element = (params.L * params.alpha ** 2 / (K_dr * dt)) * kern.scalar_mass()
    elif form is FormId.STT:
        element = (9.0 * params.L * params.alpha_T ** 2 * K_dr * params.theta0 / dt) * \
            kern.scalar_mass()
    elif form is FormId.GRAM_U:
        element = kern.vector_mass() + kern.grad_gram()
    elif form in (FormId.GRAM_P, FormId.GRAM_T):
        element = kern.scalar_mass() + kern.scalar_stiffness()
    else:  # pragma: no cover
        raise ValueError(f"unhandled form {form}")

    return kern.assemble(element, _components(test_field), _components(trial_field),
                         spaces, test_field, trial_field)


class LoadAssembler:
    """Quadrature-based load vectors for one space set.

    The scatter operator from quadrature-point values to vertex dofs is
    precomputed once per rule, so assembling a load at a new time costs one
    vectorized evaluation of the source plus a sparse matvec.
    """

    def __init__(self, spaces: SpaceSet, rule: str = "order4"):
        if rule not in _QUAD_RULES:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        self.spaces = spaces
        mesh = spaces.mesh
        bary, weights = _QUAD_RULES[rule]
        pts = mesh.vertices[mesh.cells]  # (nc, 3, 2)
        # Quadrature points in global coordinates, (nc, nq, 2).
        qp = np.einsum("qi,nik->nqk", bary, pts)
        self.qx = qp[..., 0].ravel()
        self.qy = qp[..., 1].ravel()

        kern = P1Kernels(mesh)
        nc = mesh.n_cells
        nq = bary.shape[0]
        # Entry for vertex i of cell n at point q: area_n * w_q * lambda_i(q).
        vals = kern.area[:, None, None] * weights[None, :, None] * bary[None, :, :]
        rows = np.repeat(mesh.cells[:, None, :], nq, axis=1).ravel()
        cols = np.repeat(np.arange(nc * nq), 3)
        self._scatter = sp.csr_matrix(
            (vals.ravel(), (rows, cols)), shape=(mesh.n_vertices, nc * nq))

    def scalar(self, field_name: str, fn, t: float) -> np.ndarray:
        """(fn(., t), test) for a scalar field, restricted to free dofs."""
        values = np.asarray(fn(self.qx, self.qy, t), dtype=np.float64)
        full = self._scatter @ values
        return full[self.spaces.field(field_name).free]

    def vector(self, fn, t: float) -> np.ndarray:
        """(fn(., t), test) for the displacement space; fn returns (fx, fy)."""
        fx, fy = fn(self.qx, self.qy, t)
        lx = self._scatter @ np.asarray(fx, dtype=np.float64)
        ly = self._scatter @ np.asarray(fy, dtype=np.float64)
        full = np.empty(2 * lx.shape[0])
        full[0::2] = lx
        full[1::2] = ly
        return full[self.spaces.u.free]


def assemble_load(field_name: str, fn, t: float, spaces: SpaceSet,
                  rule: str = "order4") -> np.ndarray:
    """One-off load assembly; prefer LoadAssembler inside time loops."""
    assembler = LoadAssembler(spaces, rule=rule)
    if field_name == "u":
        return assembler.vector(fn, t)
    return assembler.scalar(field_name, fn, t)


@dataclass
class OperatorSet:
    """All dt-independent matrices of the coupled scheme on free dofs.

    Mass-type couplings are stored without the 1/dt factor; the solvers and
    the reduced-order projections divide by their own dt.  Names follow the
    block layout: rows first (test space), columns second (trial space).
    """

    spaces: SpaceSet
    params: PhysicalParams
    coeffs: CoefficientField

    AUU: sp.csr_matrix = field(repr=False, default=None)
    APP: sp.csr_matrix = field(repr=False, default=None)
    ATT: sp.csr_matrix = field(repr=False, default=None)
    AUP: sp.csr_matrix = field(repr=False, default=None)
    AUT: sp.csr_matrix = field(repr=False, default=None)

    # dt-free mass-type blocks (multiply by 1/dt to get the M*/S* forms).
    P_PP: sp.csr_matrix = field(repr=False, default=None)
    P_TT: sp.csr_matrix = field(repr=False, default=None)
    P_PU: sp.csr_matrix = field(repr=False, default=None)
    P_PT: sp.csr_matrix = field(repr=False, default=None)
    P_TU: sp.csr_matrix = field(repr=False, default=None)
    P_TP: sp.csr_matrix = field(repr=False, default=None)
    S_PP: sp.csr_matrix = field(repr=False, default=None)
    S_TT: sp.csr_matrix = field(repr=False, default=None)

    GRAM_U: sp.csr_matrix = field(repr=False, default=None)
    GRAM_P: sp.csr_matrix = field(repr=False, default=None)
    GRAM_T: sp.csr_matrix = field(repr=False, default=None)

    # Unit-coefficient L2 mass matrices (initial-condition projection, norms).
    MASS_U: sp.csr_matrix = field(repr=False, default=None)
    MASS_P: sp.csr_matrix = field(repr=False, default=None)
    MASS_T: sp.csr_matrix = field(repr=False, default=None)

    def table_matrix(self, form: FormId, dt: float | None = None) -> sp.csr_matrix:
        """The scheme matrix for one FormId, with 1/dt baked into M*/S*."""
        if form in _TIME_SCALED:
            if dt is None or not dt > 0.0:
                raise ValueError(f"form {form.value} requires a positive dt")
            base = {
                FormId.MPP: self.P_PP, FormId.MTT: self.P_TT,
                FormId.MPU: self.P_PU, FormId.MPT: self.P_PT,
                FormId.MTU: self.P_TU, FormId.MTP: self.P_TP,
                FormId.SPP: self.S_PP, FormId.STT: self.S_TT,
            }[form]
            return finalize_csr(base / dt)
        return {
            FormId.AUU: self.AUU, FormId.APP: self.APP, FormId.ATT: self.ATT,
            FormId.AUP: self.AUP, FormId.AUT: self.AUT,
            FormId.GRAM_U: self.GRAM_U, FormId.GRAM_P: self.GRAM_P,
            FormId.GRAM_T: self.GRAM_T,
        }[form]

    def gram(self, field_name: str) -> sp.csr_matrix:
        return {"u": self.GRAM_U, "p": self.GRAM_P, "theta": self.GRAM_T}[field_name]

    def mass(self, field_name: str) -> sp.csr_matrix:
        return {"u": self.MASS_U, "p": self.MASS_P, "theta": self.MASS_T}[field_name]


def build_operator_set(spaces: SpaceSet, params: PhysicalParams,
                       coeffs: CoefficientField) -> OperatorSet:
    """Assemble every scheme matrix once for a given discretization."""
    kern = P1Kernels(spaces.mesh)
    mesh = spaces.mesh

    def asm(element, test, trial):
        return kern.assemble(element, _components(test), _components(trial),
                             spaces, test, trial)

    eps = kern.eps_eps()
    div = kern.div_div()
    mass = kern.scalar_mass()
    vec_mass = kern.vector_mass()
    pair_sv = kern.div_pairing_scalar_test()
    pair_vs = kern.div_pairing_vector_test()
    K_dr = params.K_dr

    ops = OperatorSet(spaces=spaces, params=params, coeffs=coeffs)
    ops.AUU = asm(2.0 * params.mu * eps + params.lam * div, "u", "u")
    ops.APP = asm(kern.scalar_stiffness(coeffs.k_per_cell(mesh)), "p", "p")
    ops.ATT = asm(kern.scalar_stiffness(coeffs.d_per_cell(mesh)), "theta", "theta")
    ops.AUP = asm(-params.alpha * pair_vs, "u", "p")
    ops.AUT = asm(-3.0 * params.alpha_T * K_dr * pair_vs, "u", "theta")

    ops.P_PP = asm(params.c0 * mass, "p", "p")
    ops.P_TT = asm(params.C_d * mass, "theta", "theta")
    ops.P_PU = asm(params.alpha * pair_sv, "p", "u")
    ops.P_PT = asm(-3.0 * params.alpha_m * mass, "p", "theta")
    ops.P_TU = asm(3.0 * params.alpha_T * K_dr * params.theta0 * pair_sv, "theta", "u")
    ops.P_TP = asm(-3.0 * params.alpha_m * params.theta0 * mass, "theta", "p")
    ops.S_PP = asm((params.L * params.alpha ** 2 / K_dr) * mass, "p", "p")
    ops.S_TT = asm(9.0 * params.L * params.alpha_T ** 2 * K_dr * params.theta0 * mass,
                   "theta", "theta")

    unit_stiff = kern.scalar_stiffness()
    ops.GRAM_U = asm(vec_mass + kern.grad_gram(), "u", "u")
    ops.GRAM_P = asm(mass + unit_stiff, "p", "p")
    ops.GRAM_T = asm(mass + unit_stiff, "theta", "theta")

    ops.MASS_U = asm(vec_mass, "u", "u")
    ops.MASS_P = asm(mass, "p", "p")
    ops.MASS_T = asm(mass, "theta", "theta")
    return ops
