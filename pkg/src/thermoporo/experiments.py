"""Experiment drivers built on the solver stack.

Five ready-made studies exercise the solvers end to end: a mesh-refinement
convergence study against the closed-form solution (1a), trained-vs-deployed
reduced models on one mesh (1b), time extrapolation beyond the training
window (1c), online time steps larger than the training step (1d), and a
two-region parametric benchmark with an affine offline/online decomposition
(2).  Every driver returns its results in memory and can also emit a CSV
bundle; all drivers refuse to run until the closed-form forcing terms pass
the finite-difference consistency check.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from functools import lru_cache, partial

import numpy as np

from .assembly import (
    QUAD_ORDER4,
    QUAD_ORDER7,
    CoefficientField,
    LoadAssembler,
    OperatorSet,
    P1Kernels,
    PhysicalParams,
    build_operator_set,
)
from .hf import (
    FIXED_STRESS,
    MONOLITHIC,
    HfProblem,
    SolverReport,
    StoppingCriterion,
    Trajectory,
    run_hf,
)
from .manufactured import ManufacturedCase, verify_forcing_consistency
from .meshing import (
    DIRICHLET,
    FIELDS,
    NEUMANN,
    BcSpec,
    RegionSpec,
    SpaceSet,
    build_spaces,
    build_unit_square_mesh,
)
from .pod import (
    DEFAULT_EIG_FLOOR,
    ReducedBasis,
    SnapshotSet,
    build_basis,
    orthonormality_defect,
    pod_spectrum_report,
)
from .rom import (
    BLOCK_FIELD_PAIRS,
    BLOCK_NAMES,
    FS_ROM,
    M_ROM,
    AffineOperatorFamily,
    AffineTerm,
    ReducedBlocks,
    RomOperators,
    project_block_matrix,
    project_blocks,
    project_initial_condition,
    project_loads,
    lift_trajectory,
    run_rom,
)

__all__ = [
    "EXAMPLE_IDS",
    "ExperimentConfig",
    "ParamGrid",
    "ExperimentResult",
    "CycleResult",
    "StudyResult",
    "default_config",
    "integral_steps",
    "example1_case",
    "configured_case",
    "build_manufactured_problem",
    "assemble_loads",
    "history_norms",
    "exact_history",
    "exact_histories",
    "manufactured_errors",
    "TrueErrorEvaluator",
    "trajectory_distance",
    "basis_from_trajectory",
    "run_convergence_study",
    "run_config",
    "run_example",
    "write_bundle",
    "GaussianDipole",
    "example2_params",
    "example2_coeffs",
    "example2_spaces",
    "example2_full_order_terms",
    "example2_affine_family",
    "example2_direct_blocks",
    "affine_blocks_at",
    "blocks_relative_difference",
]

logger = logging.getLogger("thermoporo.experiments")

EXAMPLE_IDS = ("1a", "1b", "1c", "1d", "2")

M_HF = "m_hf"
FS_HF = "fs_hf"

_COMPONENTS = {"u": 2, "p": 1, "theta": 1}

# CSV schemas of the artifact bundle (header row always written).
ERRORS_HEADER = ("experiment", "scheme", "field", "norm", "cycle_or_r", "value")
RATES_HEADER = ("experiment", "scheme", "field", "norm", "pair", "rate")
ITERATIONS_HEADER = ("experiment", "scheme", "r", "time_index", "iterations")
TIMINGS_HEADER = ("experiment", "scheme", "phase", "seconds")
EIGENVALUES_HEADER = ("field", "k", "nu_normalized")
CONDITION_HEADER = ("experiment", "scheme", "r", "matrix", "value")
PARAM_ERRORS_HEADER = ("experiment", "scheme", "case", "omega1", "omega2",
                       "r", "field", "norm", "value")
SUMMARY_HEADER = ("experiment", "key", "value")

_CORE_TABLES = ("errors", "rates", "iterations", "timings", "eigenvalues",
                "condition_numbers")
_HEADERS = {
    "errors": ERRORS_HEADER,
    "rates": RATES_HEADER,
    "iterations": ITERATIONS_HEADER,
    "timings": TIMINGS_HEADER,
    "eigenvalues": EIGENVALUES_HEADER,
    "condition_numbers": CONDITION_HEADER,
    "param_errors": PARAM_ERRORS_HEADER,
    "summary": SUMMARY_HEADER,
}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def integral_steps(T: float, dt: float) -> int:
    """Number of steps when T is an integer multiple of dt, else ValueError."""
    if not dt > 0.0 or not T > 0.0:
        raise ValueError(f"T and dt must be positive, got T={T}, dt={dt}")
    ratio = T / dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-12 * max(1.0, abs(ratio)):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


@dataclass(frozen=True)
class ParamGrid:
    """Uniform training and testing grids in the two-parameter rectangle.

    The training rectangle is a strict subset of the testing rectangle;
    evaluation case i reuses the training points, case ii refines inside the
    training rectangle discarding points already trained on, and case iii
    samples the testing rectangle keeping only points outside the training
    rectangle (extrapolation).
    """

    train_box: tuple = ((-3.0, 0.0), (-1.0, 1.0))
    test_box: tuple = ((-4.0, 1.0), (-2.0, 2.0))
    n_train: int = 5
    n_test: int = 7

    def __post_init__(self) -> None:
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("grids need at least 2 points per axis")
        for box in (self.train_box, self.test_box):
            for lo, hi in box:
                if not lo < hi:
                    raise ValueError(f"empty parameter interval ({lo}, {hi})")
        for (tlo, thi), (slo, shi) in zip(self.train_box, self.test_box):
            if tlo < slo or thi > shi:
                raise ValueError("training box must lie inside the test box")

    @staticmethod
    def _grid(box, k):
        xs = np.linspace(box[0][0], box[0][1], k)
        ys = np.linspace(box[1][0], box[1][1], k)
        return [(float(x), float(y)) for y in ys for x in xs]

    def train_points(self) -> list[tuple[float, float]]:
        return self._grid(self.train_box, self.n_train)

    def case_i_points(self) -> list[tuple[float, float]]:
        return self.train_points()

    def case_ii_points(self) -> list[tuple[float, float]]:
        """Finer grid on the training rectangle, minus the training points."""
        seen = self.train_points()
        out = []
        for pt in self._grid(self.train_box, self.n_test):
            if not any(abs(pt[0] - s[0]) <= 1e-9 and abs(pt[1] - s[1]) <= 1e-9
                       for s in seen):
                out.append(pt)
        return out

    def _in_train_box(self, pt) -> bool:
        (alo, ahi), (blo, bhi) = self.train_box
        return alo <= pt[0] <= ahi and blo <= pt[1] <= bhi

    def case_iii_points(self) -> list[tuple[float, float]]:
        """Grid on the test rectangle, outside the training rectangle."""
        return [pt for pt in self._grid(self.test_box, self.n_test)
                if not self._in_train_box(pt)]

    def corners(self) -> list[tuple[float, float]]:
        (alo, ahi), (blo, bhi) = self.test_box
        return [(alo, blo), (alo, bhi), (ahi, blo), (ahi, bhi)]


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run: discretization, scheme, and reduction settings.

    dt_train/T_train describe the snapshot-generating runs, dt_online and
    T_online the deployed reduced model; they coincide except in the 1c
    (longer online horizon) and 1d (larger online step) studies.
    """

    experiment: str
    n: int
    dt_train: float
    dt_online: float
    T_train: float
    T_online: float
    cycles: int = 1
    tol: float = 1e-10
    max_iter: int = 20
    L: float = 1.0
    r_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    eig_floor: float = DEFAULT_EIG_FLOOR
    max_snapshots: int = 1200
    grid: ParamGrid = ParamGrid()
    out_dir: str | None = None
    workers: int = 1
    params: PhysicalParams | None = None
    conductivity: float | None = None

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"mesh parameter n must be >= 2, got {self.n}")
        if self.conductivity is not None and not self.conductivity > 0.0:
            raise ValueError(
                f"conductivity must be positive, got {self.conductivity}")
        if self.cycles < 1 or self.max_iter < 1 or self.workers < 1:
            raise ValueError("cycles, max_iter, and workers must be >= 1")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not self.L >= 0.0:
            raise ValueError(f"L must be nonnegative, got {self.L}")
        if not self.eig_floor >= 0.0:
            raise ValueError(f"eig_floor must be >= 0, got {self.eig_floor}")
        if self.max_snapshots < 2:
            raise ValueError("max_snapshots must be >= 2")
        if not self.r_values or any(int(r) != r or r < 1 for r in self.r_values):
            raise ValueError(f"r_values must be positive ints, got {self.r_values}")
        if tuple(sorted(set(self.r_values))) != tuple(self.r_values):
            raise ValueError("r_values must be strictly increasing")
        integral_steps(self.T_train, self.dt_train)
        integral_steps(self.T_online, self.dt_online)

    @property
    def stopping(self) -> StoppingCriterion:
        return StoppingCriterion(tol=self.tol, max_iter=self.max_iter)


_DEFAULTS = {
    "1a": dict(n=4, dt_train=0.0025, dt_online=0.0025, T_train=0.1,
               T_online=0.1, cycles=3, r_values=(1, 2, 3, 4, 5)),
    "1b": dict(n=16, dt_train=0.001, dt_online=0.001, T_train=1.0,
               T_online=1.0, r_values=tuple(range(1, 11))),
    "1c": dict(n=16, dt_train=0.001, dt_online=0.001, T_train=0.1,
               T_online=1.0, r_values=tuple(range(1, 13))),
    "1d": dict(n=16, dt_train=0.001, dt_online=0.01, T_train=1.0,
               T_online=1.0, r_values=tuple(range(1, 11))),
    "2": dict(n=20, dt_train=0.1, dt_online=0.1, T_train=2.0, T_online=2.0,
              r_values=(2, 5, 10, 20, 40),
              grid=ParamGrid(n_train=3, n_test=4)),
}


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Desk-scale defaults for one experiment, with keyword overrides."""
    if experiment not in _DEFAULTS:
        raise ValueError(
            f"unknown experiment {experiment!r}; expected one of {EXAMPLE_IDS}")
    merged = {**_DEFAULTS[experiment], **overrides}
    return ExperimentConfig(experiment=experiment, **merged)


# --------------------------------------------------------------------------
# Shared numerics: problems, loads, norms
# --------------------------------------------------------------------------

EXAMPLE1_PARAMS = PhysicalParams(mu=1e2, lam=1e2, c0=1.0, alpha=1.0,
                                 alpha_T=1e-3, alpha_m=1e-5, C_d=1.0,
                                 theta0=1.0, L=1.0)
EXAMPLE1_CONDUCTIVITY = 1e-5


def example1_case(L: float = 1.0) -> ManufacturedCase:
    """The closed-form validation case with its standard parameters."""
    return ManufacturedCase(params=replace(EXAMPLE1_PARAMS, L=L),
                            K=EXAMPLE1_CONDUCTIVITY, D=EXAMPLE1_CONDUCTIVITY)


def configured_case(config: ExperimentConfig) -> ManufacturedCase:
    """Closed-form case honoring any material overrides in the config."""
    base = config.params if config.params is not None else EXAMPLE1_PARAMS
    kd = config.conductivity
    if kd is None:
        kd = EXAMPLE1_CONDUCTIVITY
    return ManufacturedCase(params=replace(base, L=config.L), K=kd, D=kd)


@lru_cache(maxsize=None)
def _certified(case: ManufacturedCase) -> float:
    """Standing gate: the forcing oracle must pass before any experiment."""
    worst = verify_forcing_consistency(case)
    logger.info("forcing consistency certified, worst residual %.3e", worst)
    return worst


def build_manufactured_problem(case: ManufacturedCase, n: int):
    """Problem, spaces, and operators for the closed-form case on an n-mesh."""
    mesh = build_unit_square_mesh(n)
    spaces = build_spaces(mesh, BcSpec())
    initial = tuple(case.interpolant(spaces, name, 0.0) for name in FIELDS)
    problem = HfProblem(spaces=spaces, params=case.params, coeffs=case.coeffs(),
                        body_force=case.body_force,
                        fluid_source=case.fluid_source,
                        heat_source=case.heat_source, initial=initial)
    ops = build_operator_set(spaces, case.params, case.coeffs())
    return problem, spaces, ops


def assemble_loads(spaces: SpaceSet, body_force, fluid_source, heat_source,
                   dt: float, n_steps: int) -> list[tuple]:
    """Load triples (f, g, eta) for the time indices 1..n_steps."""
    assembler = LoadAssembler(spaces)
    zero_u = np.zeros(spaces.u.n_free)
    zero_p = np.zeros(spaces.p.n_free)
    zero_t = np.zeros(spaces.theta.n_free)
    out = []
    for k in range(1, n_steps + 1):
        t = k * dt
        f = assembler.vector(body_force, t) if body_force is not None else zero_u
        g = assembler.scalar("p", fluid_source, t) if fluid_source is not None else zero_p
        eta = assembler.scalar("theta", heat_source, t) if heat_source is not None else zero_t
        out.append((f, g, eta))
    return out


def history_norms(rows: np.ndarray, matrix) -> np.ndarray:
    """Matrix-weighted norm sqrt(x M x) of every row of a state history."""
    weighted = matrix @ rows.T
    vals = np.einsum("ni,in->n", rows, weighted)
    return np.sqrt(np.maximum(vals, 0.0))


def exact_history(case: ManufacturedCase, spaces: SpaceSet, field_name: str,
                  times) -> np.ndarray:
    """Vertex interpolants of one exact field at each requested time."""
    return np.stack([case.interpolant(spaces, field_name, t) for t in times])


def exact_histories(case: ManufacturedCase, spaces: SpaceSet, times) -> dict:
    """All three exact field histories, for reuse across error evaluations."""
    return {name: exact_history(case, spaces, name, times) for name in FIELDS}


_NORM_MATRICES = {"l2": ("MASS_U", "MASS_P", "MASS_T"),
                  "h1": ("GRAM_U", "GRAM_P", "GRAM_T")}


def _field_rows(traj: Trajectory):
    return (("u", traj.U), ("p", traj.P), ("theta", traj.TH))


def manufactured_errors(traj: Trajectory, case: ManufacturedCase,
                        spaces: SpaceSet, ops: OperatorSet,
                        exact: dict | None = None) -> dict:
    """Per-field max-over-time errors against the exact solution.

    The maximum runs over the computed states n >= 1; relative values divide
    by the max-over-time norm of the exact interpolant.  Pass precomputed
    ``exact`` histories to amortize the interpolation across many calls.
    """
    out = {}
    times = traj.times
    for idx, (name, rows) in enumerate(_field_rows(traj)):
        exact_rows = (exact[name] if exact is not None
                      else exact_history(case, spaces, name, times))
        diff = rows - exact_rows
        entry = {}
        for norm, matrices in _NORM_MATRICES.items():
            matrix = getattr(ops, matrices[idx])
            err = history_norms(diff[1:], matrix).max()
            ref = history_norms(exact_rows[1:], matrix).max()
            entry[norm] = float(err)
            entry[f"{norm}_rel"] = float(err / ref)
        out[name] = entry
    return out


class TrueErrorEvaluator:
    """True L2/H1 errors against the closed-form fields, by quadrature.

    Comparing the finite element solution with the vertex interpolant in the
    discrete norms underrates the H1 error on this uniform mesh family: the
    difference between the two superconverges, so its decay reflects neither
    term's distance from the exact solution.  Convergence rates are therefore
    measured against the exact fields directly, integrating the pointwise
    error with a degree-4 rule (degree 7 available for verification).
    """

    def __init__(self, case: ManufacturedCase, spaces: SpaceSet,
                 rule: str = "order4"):
        rules = {"order4": QUAD_ORDER4, "order7": QUAD_ORDER7}
        if rule not in rules:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        self.case = case
        self.spaces = spaces
        mesh = spaces.mesh
        bary, weights = rules[rule]
        pts = mesh.vertices[mesh.cells]
        self.qx = np.einsum("qj,cj->cq", bary, pts[..., 0])
        self.qy = np.einsum("qj,cj->cq", bary, pts[..., 1])
        kern = P1Kernels(mesh)
        self.area = kern.area
        self.grads = kern.grads
        self.bary = bary
        self.weights = weights
        self.cells = mesh.cells

    def _full_values(self, name: str, vec: np.ndarray) -> np.ndarray:
        space = self.spaces.field(name)
        full = np.zeros(space.n_dofs)
        full[space.free] = vec
        return full

    def _integrate(self, squares: np.ndarray) -> float:
        return float(self.area @ (squares @ self.weights))

    def _scalar_squares(self, name: str, vec: np.ndarray, t: float):
        exact_fn = {"p": self.case.pressure,
                    "theta": self.case.temperature}[name]
        grad_fn = {"p": self.case.pressure_gradient,
                   "theta": self.case.temperature_gradient}[name]
        vals = self._full_values(name, vec)[self.cells]
        at_q = vals @ self.bary.T
        grad = np.einsum("cj,cjk->ck", vals, self.grads)
        exact = exact_fn(self.qx, self.qy, t)
        gx, gy = grad_fn(self.qx, self.qy, t)
        diff = at_q - exact
        dx = grad[:, :1] - gx
        dy = grad[:, 1:] - gy
        l2 = self._integrate(diff * diff)
        semi = self._integrate(dx * dx + dy * dy)
        ref_l2 = self._integrate(exact * exact)
        ref_semi = self._integrate(gx * gx + gy * gy)
        return l2, l2 + semi, ref_l2, ref_l2 + ref_semi

    def _vector_squares(self, vec: np.ndarray, t: float):
        vals = self._full_values("u", vec).reshape(-1, 2)[self.cells]
        at_q = np.einsum("cjm,qj->cqm", vals, self.bary)
        grad = np.einsum("cjm,cjk->cmk", vals, self.grads)
        e1, e2 = self.case.displacement(self.qx, self.qy, t)
        g11, g12, g21, g22 = self.case.displacement_gradient(self.qx,
                                                             self.qy, t)
        d1 = at_q[..., 0] - e1
        d2 = at_q[..., 1] - e2
        l2 = self._integrate(d1 * d1 + d2 * d2)
        semi = self._integrate(
            (grad[:, 0, 0][:, None] - g11) ** 2
            + (grad[:, 0, 1][:, None] - g12) ** 2
            + (grad[:, 1, 0][:, None] - g21) ** 2
            + (grad[:, 1, 1][:, None] - g22) ** 2)
        ref_l2 = self._integrate(e1 * e1 + e2 * e2)
        ref_semi = self._integrate(g11 ** 2 + g12 ** 2 + g21 ** 2 + g22 ** 2)
        return l2, l2 + semi, ref_l2, ref_l2 + ref_semi

    def norms(self, traj: Trajectory) -> dict:
        """Max-over-time true errors, same layout as manufactured_errors."""
        times = traj.times
        out = {}
        for name, rows in _field_rows(traj):
            err = np.zeros((traj.n_states - 1, 2))
            ref = np.zeros((traj.n_states - 1, 2))
            for n in range(1, traj.n_states):
                if name == "u":
                    sq = self._vector_squares(rows[n], times[n])
                else:
                    sq = self._scalar_squares(name, rows[n], times[n])
                err[n - 1] = sq[0], sq[1]
                ref[n - 1] = sq[2], sq[3]
            e_l2, e_h1 = np.sqrt(err.max(axis=0))
            r_l2, r_h1 = np.sqrt(ref.max(axis=0))
            out[name] = {"l2_true": float(e_l2), "h1_true": float(e_h1),
                         "l2_true_rel": float(e_l2 / r_l2),
                         "h1_true_rel": float(e_h1 / r_h1)}
        return out


def trajectory_distance(traj: Trajectory, reference: Trajectory,
                        ops: OperatorSet, norm: str = "h1") -> dict[str, float]:
    """Max-over-time relative distance per field, in the L2 or full H1 norm.

    Computed as max_n ||a_n - b_n|| / max_n ||b_n|| over the states n >= 1.
    """
    matrices = _NORM_MATRICES[norm]
    out = {}
    for idx, (name, rows) in enumerate(_field_rows(traj)):
        ref_rows = {"u": reference.U, "p": reference.P,
                    "theta": reference.TH}[name]
        if rows.shape != ref_rows.shape:
            raise ValueError(
                f"{name}: trajectory shapes {rows.shape} vs {ref_rows.shape} differ")
        matrix = getattr(ops, matrices[idx])
        err = history_norms(rows[1:] - ref_rows[1:], matrix).max()
        ref = history_norms(ref_rows[1:], matrix).max()
        out[name] = float(err / ref)
    return out


# --------------------------------------------------------------------------
# Reduction helpers
# --------------------------------------------------------------------------

def _snapshot_rows(n_states: int, cap: int) -> np.ndarray:
    """Uniform subsample of state indices, always keeping first and last."""
    if n_states <= cap:
        return np.arange(n_states)
    return np.unique(np.round(np.linspace(0, n_states - 1, cap)).astype(int))


def basis_from_trajectory(traj: Trajectory, ops: OperatorSet,
                          r_max: int | None = None,
                          eig_floor: float = DEFAULT_EIG_FLOOR,
                          max_snapshots: int = 1200) -> ReducedBasis:
    """Per-field modes from one trajectory, decimated to max_snapshots."""
    rows = _snapshot_rows(traj.n_states, max_snapshots)
    sets = [SnapshotSet("u", traj.U[rows], ops.GRAM_U),
            SnapshotSet("p", traj.P[rows], ops.GRAM_P),
            SnapshotSet("theta", traj.TH[rows], ops.GRAM_T)]
    return build_basis(sets, r_max=r_max, eig_floor=eig_floor)


def _clipped_ranks(basis: ReducedBasis, r: int) -> dict[str, int]:
    return {name: min(r, basis.r(name)) for name in FIELDS}


def _truncated_operators(blocks: ReducedBlocks, loads, dt: float,
                         ranks: dict[str, int]) -> RomOperators:
    """Reduced operators for a prefix of the modes, sliced without re-projection."""
    data = {}
    for name in BLOCK_NAMES:
        test_field, trial_field = BLOCK_FIELD_PAIRS[name]
        full = getattr(blocks, name)
        data[name] = np.ascontiguousarray(
            full[:ranks[test_field], :ranks[trial_field]])
    F, G, H = loads
    sliced = (F[:, :ranks["u"]], G[:, :ranks["p"]], H[:, :ranks["theta"]])
    return RomOperators(ReducedBlocks(**data), dt, sliced)


# --------------------------------------------------------------------------
# Result containers and CSV bundle
# --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    """In-memory results of one driver plus its CSV tables."""

    experiment: str
    config: ExperimentConfig
    data: dict
    tables: dict[str, list[tuple]]
    out_dir: str | None = None
    files: list[str] = dc_field(default_factory=list)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_bundle(result: ExperimentResult) -> list[str]:
    """Write the CSV bundle; the manifest is written last, so a missing
    manifest.txt flags a partial bundle."""
    out_dir = result.out_dir
    if not out_dir:
        raise ValueError("result has no output directory")
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(set(_CORE_TABLES) | set(result.tables))
    written = []
    for name in names:
        rows = result.tables.get(name, [])
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(_HEADERS[name])
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        written.append(f"{name}.csv")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as handle:
        handle.write("\n".join(written) + "\n")
    result.files = written + ["manifest.txt"]
    return result.files


def _map(task, items, workers: int) -> list:
    if workers <= 1:
        return [task(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, items))


def _timing_rows(tag: str, scheme: str, report: SolverReport,
                 suffix: str = "") -> list[tuple]:
    return [
        (tag, scheme, f"setup_seconds{suffix}", report.setup_seconds),
        (tag, scheme, f"per_step_avg_seconds{suffix}", report.avg_step_seconds),
        (tag, scheme, f"total_seconds{suffix}", report.total_seconds),
    ]


def _eigenvalue_rows(basis: ReducedBasis) -> list[tuple]:
    rows = []
    for name, spectrum in pod_spectrum_report(basis).items():
        for k, nu in enumerate(spectrum):
            rows.append((name, k, nu))
    return rows


# --------------------------------------------------------------------------
# Convergence study (experiment 1a)
# --------------------------------------------------------------------------

@dataclass
class CycleResult:
    """Everything measured on one refinement level."""

    cycle: int
    n: int
    dt: float
    hf_errors: dict
    rom_errors: dict
    hf_reports: dict
    rom_reports: dict
    scheme_distance: dict
    rom_iterations: dict
    contraction_violations: int | None
    spectrum: dict
    fs_condition: dict


@dataclass
class StudyResult:
    """Per-cycle results plus observed convergence rates.

    ``rates[scheme][field][norm]`` holds one entry per consecutive cycle
    pair (key "c0c1", ...) plus a least-squares fit over all cycles (key
    "fit"); errors halve the mesh per cycle, so each pairwise rate is
    log2(e_k / e_{k+1}).
    """

    config: ExperimentConfig
    cycles: list[CycleResult]
    rates: dict


def _rom_schemes(scheme: str) -> tuple[str, str]:
    """(HF label, ROM label) for one training scheme family."""
    return (M_HF, M_ROM) if scheme == MONOLITHIC else (FS_HF, FS_ROM)


def _run_cycle(config: ExperimentConfig, cycle: int) -> CycleResult:
    n = config.n * 2 ** cycle
    dt = config.dt_train / 4.0 ** cycle
    case = configured_case(config)
    problem, spaces, ops = build_manufactured_problem(case, n)
    stopping = config.stopping
    n_steps = integral_steps(config.T_train, dt)
    logger.info("cycle %d: n=%d, dt=%g, %d steps", cycle, n, dt, n_steps)

    exact = exact_histories(case, spaces, dt * np.arange(n_steps + 1))
    evaluator = TrueErrorEvaluator(case, spaces)

    def all_errors(traj):
        discrete = manufactured_errors(traj, case, spaces, ops, exact=exact)
        true = evaluator.norms(traj)
        return {name: {**discrete[name], **true[name]} for name in FIELDS}

    trajs, hf_reports, hf_errors = {}, {}, {}
    for scheme in (MONOLITHIC, FIXED_STRESS):
        label = _rom_schemes(scheme)[0]
        traj, report = run_hf(problem, scheme, dt, config.T_train,
                              stopping=stopping, ops=ops,
                              track_contraction=(
                                  scheme == FIXED_STRESS and cycle == 0))
        trajs[scheme] = traj
        hf_reports[label] = report
        hf_errors[label] = all_errors(traj)
    scheme_distance = trajectory_distance(trajs[FIXED_STRESS],
                                          trajs[MONOLITHIC], ops, "h1")
    violations = None
    if cycle == 0:
        violations = hf_reports[FS_HF].contraction_violations()

    loads = assemble_loads(spaces, case.body_force, case.fluid_source,
                           case.heat_source, dt, n_steps)
    r_top = max(config.r_values)
    initial_state = problem.initial_state()
    rom_errors: dict = {M_ROM: {}, FS_ROM: {}}
    rom_reports: dict = {M_ROM: {}, FS_ROM: {}}
    rom_iterations: dict = {}
    fs_condition: dict = {}
    spectrum = {}
    for scheme in (MONOLITHIC, FIXED_STRESS):
        rom_label = _rom_schemes(scheme)[1]
        basis = basis_from_trajectory(trajs[scheme], ops, r_max=r_top,
                                      eig_floor=config.eig_floor,
                                      max_snapshots=config.max_snapshots)
        if scheme == FIXED_STRESS:
            spectrum = pod_spectrum_report(basis)
        blocks = project_blocks(basis, ops)
        projected_loads = project_loads(basis, loads)
        for r in config.r_values:
            ranks = _clipped_ranks(basis, r)
            rom_ops = _truncated_operators(blocks, projected_loads, dt, ranks)
            reduced_initial = project_initial_condition(
                basis.truncated(ranks), initial_state, ops)
            rom_traj, rom_report = run_rom(rom_label, rom_ops,
                                           initial=reduced_initial,
                                           stopping=stopping)
            lifted = lift_trajectory(rom_traj, basis.truncated(ranks))
            rom_errors[rom_label][r] = all_errors(lifted)
            rom_reports[rom_label][r] = rom_report
            if scheme == FIXED_STRESS:
                rom_iterations[r] = list(rom_report.iterations)
                fs_condition[r] = rom_ops.fs_condition_numbers()

    return CycleResult(cycle=cycle, n=n, dt=dt, hf_errors=hf_errors,
                       rom_errors=rom_errors, hf_reports=hf_reports,
                       rom_reports=rom_reports, scheme_distance=scheme_distance,
                       rom_iterations=rom_iterations,
                       contraction_violations=violations, spectrum=spectrum,
                       fs_condition=fs_condition)


def _pairwise_rates(errors: list[float]) -> dict[str, float]:
    out = {}
    for k in range(len(errors) - 1):
        out[f"c{k}c{k + 1}"] = float(np.log2(errors[k] / errors[k + 1]))
    if len(errors) >= 2:
        logs = np.log2(np.asarray(errors))
        slope = np.polyfit(np.arange(len(errors)), logs, 1)[0]
        out["fit"] = float(-slope)
    return out


def run_convergence_study(config: ExperimentConfig) -> StudyResult:
    """Halve h and quarter dt per cycle; collect errors, rates, and timings."""
    _certified(configured_case(config))
    cycles = _map(partial(_run_cycle, config), range(config.cycles),
                  config.workers)

    rates: dict = {}
    schemes = [M_HF, FS_HF] + [f"{label}_r{r}" for label in (M_ROM, FS_ROM)
                               for r in config.r_values]
    for scheme in schemes:
        rates[scheme] = {}
        for name in FIELDS:
            rates[scheme][name] = {}
            for norm in ("l2", "h1", "l2_true", "h1_true"):
                if scheme in (M_HF, FS_HF):
                    errors = [c.hf_errors[scheme][name][norm] for c in cycles]
                else:
                    label, r_txt = scheme.rsplit("_r", 1)
                    errors = [c.rom_errors[label][int(r_txt)][name][norm]
                              for c in cycles]
                rates[scheme][name][norm] = _pairwise_rates(errors)
    return StudyResult(config=config, cycles=cycles, rates=rates)


def _run_1a(config: ExperimentConfig) -> ExperimentResult:
    study = run_convergence_study(config)
    exp = config.experiment
    errors_rows, rates_rows, iter_rows, timing_rows = [], [], [], []
    cond_rows, summary_rows = [], []

    for c in study.cycles:
        tag = f"{exp}_c{c.cycle}"
        for scheme, per_field in c.hf_errors.items():
            for name, entry in per_field.items():
                for norm, value in entry.items():
                    errors_rows.append((exp, scheme, name, norm,
                                        f"c{c.cycle}", value))
        for scheme, per_r in c.rom_errors.items():
            for r, per_field in per_r.items():
                for name, entry in per_field.items():
                    for norm, value in entry.items():
                        errors_rows.append((exp, scheme, name, norm,
                                            f"c{c.cycle}_r{r}", value))
        for name, value in c.scheme_distance.items():
            summary_rows.append((exp, f"fs_vs_m_h1_{name}_c{c.cycle}", value))
        if c.contraction_violations is not None:
            summary_rows.append((exp, f"contraction_violations_c{c.cycle}",
                                 c.contraction_violations))
        for scheme, report in c.hf_reports.items():
            timing_rows.extend(_timing_rows(tag, scheme, report))
            if scheme == FS_HF:
                for idx, its in enumerate(report.iterations):
                    iter_rows.append((tag, scheme, 0, idx + 1, its))
        for scheme, per_r in c.rom_reports.items():
            for r, report in per_r.items():
                timing_rows.extend(_timing_rows(tag, scheme, report,
                                                suffix=f"_r{r}"))
                if scheme == FS_ROM:
                    for idx, its in enumerate(report.iterations):
                        iter_rows.append((tag, scheme, r, idx + 1, its))
        for r, conds in c.fs_condition.items():
            for matrix, value in conds.items():
                cond_rows.append((tag, FS_ROM, r, matrix, value))

    for scheme, per_field in study.rates.items():
        for name, per_norm in per_field.items():
            for norm, pairs in per_norm.items():
                for pair, rate in pairs.items():
                    rates_rows.append((exp, scheme, name, norm, pair, rate))

    tables = {"errors": errors_rows, "rates": rates_rows,
              "iterations": iter_rows, "timings": timing_rows,
              "eigenvalues": _eigenvalue_rows_from_spectrum(
                  study.cycles[0].spectrum),
              "condition_numbers": cond_rows, "summary": summary_rows}
    return ExperimentResult(experiment=exp, config=config,
                            data={"study": study}, tables=tables,
                            out_dir=config.out_dir)


def _eigenvalue_rows_from_spectrum(spectrum: dict) -> list[tuple]:
    rows = []
    for name, values in spectrum.items():
        for k, nu in enumerate(values):
            rows.append((name, k, nu))
    return rows


# --------------------------------------------------------------------------
# One-mesh reduced-model studies (experiments 1b, 1c, 1d)
# --------------------------------------------------------------------------

def _run_1b(config: ExperimentConfig) -> ExperimentResult:
    case = configured_case(config)
    _certified(case)
    problem, spaces, ops = build_manufactured_problem(case, config.n)
    stopping = config.stopping
    dt = config.dt_train
    n_steps = integral_steps(config.T_train, dt)
    exp = config.experiment

    exact = exact_histories(case, spaces, dt * np.arange(n_steps + 1))
    trajs, hf_reports, hf_errors = {}, {}, {}
    for scheme in (MONOLITHIC, FIXED_STRESS):
        label = _rom_schemes(scheme)[0]
        traj, report = run_hf(problem, scheme, dt, config.T_train,
                              stopping=stopping, ops=ops)
        trajs[scheme] = traj
        hf_reports[label] = report
        hf_errors[label] = manufactured_errors(traj, case, spaces, ops,
                                               exact=exact)

    loads = assemble_loads(spaces, case.body_force, case.fluid_source,
                           case.heat_source, dt, n_steps)
    initial_state = problem.initial_state()
    r_top = max(config.r_values)

    data: dict = {"hf_reports": hf_reports, "hf_errors": hf_errors,
                  "spaces": spaces, "ops": ops, "case": case,
                  "trajectories": trajs}
    errors_rows, iter_rows, timing_rows, cond_rows, summary_rows = [], [], [], [], []
    for scheme, per_field in hf_errors.items():
        for name, entry in per_field.items():
            for norm, value in entry.items():
                errors_rows.append((exp, scheme, name, norm, "hf", value))
    for label, report in hf_reports.items():
        timing_rows.extend(_timing_rows(exp, label, report))
        if label == FS_HF:
            for idx, its in enumerate(report.iterations):
                iter_rows.append((exp, label, 0, idx + 1, its))

    full_bases, defects, ranks, reproduction = {}, {}, {}, {}
    bases, rom_vs_hf, rom_errors, rom_reports = {}, {}, {}, {}
    eig_rows: list[tuple] = []
    for scheme in (MONOLITHIC, FIXED_STRESS):
        hf_label, rom_label = _rom_schemes(scheme)
        family = "m" if scheme == MONOLITHIC else "fs"
        traj = trajs[scheme]

        t0 = time.perf_counter()
        full = basis_from_trajectory(traj, ops, r_max=None,
                                     eig_floor=config.eig_floor,
                                     max_snapshots=config.max_snapshots)
        pod_seconds = time.perf_counter() - t0
        full_bases[family] = full
        defects[family] = {
            name: float(orthonormality_defect(full.field(name).modes,
                                              ops.gram(name)))
            for name in FIELDS}
        ranks[family] = {name: full.r(name) for name in FIELDS}
        timing_rows.append((exp, rom_label, "pod_seconds_full_rank",
                            pod_seconds))
        for name in FIELDS:
            summary_rows.append((exp, f"pod_defect_{family}_{name}",
                                 defects[family][name]))
            summary_rows.append((exp, f"retained_rank_{family}_{name}",
                                 ranks[family][name]))

        # Full-rank reproduction: the reduced run must replay its trainer.
        full_ops = RomOperators(project_blocks(full, ops), dt,
                                project_loads(full, loads))
        full_initial = project_initial_condition(full, initial_state, ops)
        full_traj, _ = run_rom(rom_label, full_ops, initial=full_initial,
                               stopping=stopping)
        reproduction[rom_label] = {
            norm: trajectory_distance(lift_trajectory(full_traj, full),
                                      traj, ops, norm)
            for norm in ("h1", "l2")}
        for norm, per_field in reproduction[rom_label].items():
            for name, value in per_field.items():
                summary_rows.append(
                    (exp, f"reproduction_{norm}_{rom_label}_{name}", value))

        # The capped working basis is a prefix of the full one by design.
        basis = full.truncated(_clipped_ranks(full, r_top))
        bases[family] = basis
        if scheme == FIXED_STRESS:
            eig_rows = _eigenvalue_rows(full)
        blocks = project_blocks(basis, ops)
        projected_loads = project_loads(basis, loads)
        rom_vs_hf[rom_label], rom_errors[rom_label] = {}, {}
        rom_reports[rom_label] = {}
        for r in config.r_values:
            ranks_r = _clipped_ranks(basis, r)
            rom_ops = _truncated_operators(blocks, projected_loads, dt, ranks_r)
            reduced_initial = project_initial_condition(
                basis.truncated(ranks_r), initial_state, ops)
            rom_traj, rom_report = run_rom(rom_label, rom_ops,
                                           initial=reduced_initial,
                                           stopping=stopping)
            lifted = lift_trajectory(rom_traj, basis.truncated(ranks_r))
            rom_errors[rom_label][r] = manufactured_errors(lifted, case,
                                                           spaces, ops,
                                                           exact=exact)
            rom_vs_hf[rom_label][r] = {
                norm: trajectory_distance(lifted, traj, ops, norm)
                for norm in ("h1", "l2")}
            rom_reports[rom_label][r] = rom_report
            for name, entry in rom_errors[rom_label][r].items():
                for norm, value in entry.items():
                    errors_rows.append((exp, rom_label, name, norm,
                                        f"r{r}", value))
            for norm, per_field in rom_vs_hf[rom_label][r].items():
                for name, value in per_field.items():
                    errors_rows.append((exp, rom_label, name,
                                        f"{norm}_rel_vs_hf", f"r{r}", value))
            timing_rows.extend(_timing_rows(exp, rom_label, rom_report,
                                            suffix=f"_r{r}"))
            if rom_label == FS_ROM:
                for idx, its in enumerate(rom_report.iterations):
                    iter_rows.append((exp, rom_label, r, idx + 1, its))
                for matrix, value in rom_ops.fs_condition_numbers().items():
                    cond_rows.append((exp, rom_label, r, matrix, value))

    data.update(full_bases=full_bases, defects=defects, ranks=ranks,
                reproduction=reproduction, bases=bases, rom_vs_hf=rom_vs_hf,
                rom_errors=rom_errors, rom_reports=rom_reports)
    tables = {"errors": errors_rows, "rates": [], "iterations": iter_rows,
              "timings": timing_rows, "eigenvalues": eig_rows,
              "condition_numbers": cond_rows, "summary": summary_rows}
    return ExperimentResult(experiment=exp, config=config, data=data,
                            tables=tables, out_dir=config.out_dir)


def _run_1c(config: ExperimentConfig) -> ExperimentResult:
    case = configured_case(config)
    _certified(case)
    problem, spaces, ops = build_manufactured_problem(case, config.n)
    stopping = config.stopping
    dt = config.dt_train
    exp = config.experiment
    steps_train = integral_steps(config.T_train, dt)
    steps_online = integral_steps(config.T_online, dt)
    if steps_online < steps_train:
        raise ValueError("the online horizon must contain the training window")

    exact = exact_histories(case, spaces, dt * np.arange(steps_online + 1))
    traj, hf_report = run_hf(problem, FIXED_STRESS, dt, config.T_online,
                             stopping=stopping, ops=ops)
    hf_errors = manufactured_errors(traj, case, spaces, ops, exact=exact)
    train_traj = Trajectory(U=traj.U[:steps_train + 1],
                            P=traj.P[:steps_train + 1],
                            TH=traj.TH[:steps_train + 1], dt=dt)

    loads = assemble_loads(spaces, case.body_force, case.fluid_source,
                           case.heat_source, dt, steps_online)
    initial_state = problem.initial_state()
    r_top = max(config.r_values)

    errors_rows, iter_rows, timing_rows, cond_rows, summary_rows = [], [], [], [], []
    for name, entry in hf_errors.items():
        for norm, value in entry.items():
            errors_rows.append((exp, FS_HF, name, norm, "hf", value))
    timing_rows.extend(_timing_rows(exp, FS_HF, hf_report))
    for idx, its in enumerate(hf_report.iterations):
        iter_rows.append((exp, FS_HF, 0, idx + 1, its))

    variants = {}
    eig_rows: list[tuple] = []
    for floor_label, floor in (("default", config.eig_floor),
                               ("no_floor", 0.0)):
        basis = basis_from_trajectory(train_traj, ops, r_max=r_top,
                                      eig_floor=floor,
                                      max_snapshots=config.max_snapshots)
        if floor_label == "default":
            eig_rows = _eigenvalue_rows(basis)
        blocks = project_blocks(basis, ops)
        projected_loads = project_loads(basis, loads)
        per_r_errors, per_r_conds, per_r_unconverged = {}, {}, {}
        per_r_iterations = {}
        for r in config.r_values:
            ranks_r = _clipped_ranks(basis, r)
            rom_ops = _truncated_operators(blocks, projected_loads, dt, ranks_r)
            reduced_initial = project_initial_condition(
                basis.truncated(ranks_r), initial_state, ops)
            rom_traj, rom_report = run_rom(FS_ROM, rom_ops,
                                           initial=reduced_initial,
                                           stopping=stopping)
            lifted = lift_trajectory(rom_traj, basis.truncated(ranks_r))
            per_r_errors[r] = manufactured_errors(lifted, case, spaces, ops,
                                                  exact=exact)
            per_r_conds[r] = rom_ops.fs_condition_numbers()
            per_r_unconverged[r] = rom_report.n_unconverged
            per_r_iterations[r] = list(rom_report.iterations)
            tag = exp if floor_label == "default" else f"{exp}_no_floor"
            for name, entry in per_r_errors[r].items():
                for norm, value in entry.items():
                    errors_rows.append((tag, FS_ROM, name, norm, f"r{r}",
                                        value))
            for matrix, value in per_r_conds[r].items():
                cond_rows.append((tag, FS_ROM, r, matrix, value))
            summary_rows.append((tag, f"unconverged_steps_r{r}",
                                 per_r_unconverged[r]))
            timing_rows.extend(_timing_rows(tag, FS_ROM, rom_report,
                                            suffix=f"_r{r}"))
            if floor_label == "default":
                for idx, its in enumerate(rom_report.iterations):
                    iter_rows.append((exp, FS_ROM, r, idx + 1, its))
        variants[floor_label] = {
            "basis": basis,
            "ranks": {name: basis.r(name) for name in FIELDS},
            "errors": per_r_errors,
            "conds": per_r_conds,
            "unconverged": per_r_unconverged,
            "iterations": per_r_iterations,
        }

    data = {"hf_report": hf_report, "hf_errors": hf_errors,
            "variants": variants, "spaces": spaces, "ops": ops}
    tables = {"errors": errors_rows, "rates": [], "iterations": iter_rows,
              "timings": timing_rows, "eigenvalues": eig_rows,
              "condition_numbers": cond_rows, "summary": summary_rows}
    return ExperimentResult(experiment=exp, config=config, data=data,
                            tables=tables, out_dir=config.out_dir)


def _run_1d(config: ExperimentConfig) -> ExperimentResult:
    case = configured_case(config)
    _certified(case)
    problem, spaces, ops = build_manufactured_problem(case, config.n)
    stopping = config.stopping
    exp = config.experiment
    steps_online = integral_steps(config.T_online, config.dt_online)
    stride = integral_steps(config.dt_online, config.dt_train)

    steps_train = integral_steps(config.T_train, config.dt_train)
    exact_train = exact_histories(case, spaces,
                                  config.dt_train * np.arange(steps_train + 1))
    exact_online = exact_histories(
        case, spaces, config.dt_online * np.arange(steps_online + 1))
    trajs, hf_reports, hf_errors = {}, {}, {}
    for scheme in (MONOLITHIC, FIXED_STRESS):
        label = _rom_schemes(scheme)[0]
        traj, report = run_hf(problem, scheme, config.dt_train,
                              config.T_train, stopping=stopping, ops=ops)
        trajs[scheme] = traj
        hf_reports[label] = report
        hf_errors[label] = manufactured_errors(traj, case, spaces, ops,
                                               exact=exact_train)

    online_loads = assemble_loads(spaces, case.body_force, case.fluid_source,
                                  case.heat_source, config.dt_online,
                                  steps_online)
    initial_state = problem.initial_state()
    r_top = max(config.r_values)

    errors_rows, iter_rows, timing_rows, cond_rows, summary_rows = [], [], [], [], []
    for scheme, per_field in hf_errors.items():
        for name, entry in per_field.items():
            for norm, value in entry.items():
                errors_rows.append((exp, scheme, name, norm, "hf", value))
    for label, report in hf_reports.items():
        timing_rows.extend(_timing_rows(exp, label, report))
        if label == FS_HF:
            for idx, its in enumerate(report.iterations):
                iter_rows.append((exp, label, 0, idx + 1, its))

    rom_errors, rom_vs_hf, rom_reports, bases = {}, {}, {}, {}
    eig_rows: list[tuple] = []
    for scheme in (MONOLITHIC, FIXED_STRESS):
        hf_label, rom_label = _rom_schemes(scheme)
        family = "m" if scheme == MONOLITHIC else "fs"
        traj = trajs[scheme]
        basis = basis_from_trajectory(traj, ops, r_max=r_top,
                                      eig_floor=config.eig_floor,
                                      max_snapshots=config.max_snapshots)
        bases[family] = basis
        if scheme == FIXED_STRESS:
            eig_rows = _eigenvalue_rows(basis)
        blocks = project_blocks(basis, ops)
        projected_loads = project_loads(basis, online_loads)
        # The reduced model steps on the coarser online grid; HF states are
        # compared at the matching fine-grid indices.
        subsampled = Trajectory(U=traj.U[::stride], P=traj.P[::stride],
                                TH=traj.TH[::stride], dt=config.dt_online)
        rom_errors[rom_label], rom_vs_hf[rom_label] = {}, {}
        rom_reports[rom_label] = {}
        for r in config.r_values:
            ranks_r = _clipped_ranks(basis, r)
            rom_ops = _truncated_operators(blocks, projected_loads,
                                           config.dt_online, ranks_r)
            reduced_initial = project_initial_condition(
                basis.truncated(ranks_r), initial_state, ops)
            rom_traj, rom_report = run_rom(rom_label, rom_ops,
                                           initial=reduced_initial,
                                           stopping=stopping)
            lifted = lift_trajectory(rom_traj, basis.truncated(ranks_r))
            rom_errors[rom_label][r] = manufactured_errors(
                lifted, case, spaces, ops, exact=exact_online)
            rom_vs_hf[rom_label][r] = trajectory_distance(lifted, subsampled,
                                                          ops, "h1")
            rom_reports[rom_label][r] = rom_report
            for name, entry in rom_errors[rom_label][r].items():
                for norm, value in entry.items():
                    errors_rows.append((exp, rom_label, name, norm, f"r{r}",
                                        value))
            for name, value in rom_vs_hf[rom_label][r].items():
                errors_rows.append((exp, rom_label, name, "h1_rel_vs_hf",
                                    f"r{r}", value))
            timing_rows.extend(_timing_rows(exp, rom_label, rom_report,
                                            suffix=f"_r{r}"))
            if rom_label == FS_ROM:
                for idx, its in enumerate(rom_report.iterations):
                    iter_rows.append((exp, rom_label, r, idx + 1, its))
                for matrix, value in rom_ops.fs_condition_numbers().items():
                    cond_rows.append((exp, rom_label, r, matrix, value))
                summary_rows.append((exp, f"avg_iterations_fs_rom_r{r}",
                                     rom_report.avg_iterations))
    summary_rows.append((exp, "avg_iterations_fs_hf",
                         hf_reports[FS_HF].avg_iterations))

    data = {"hf_reports": hf_reports, "hf_errors": hf_errors,
            "rom_errors": rom_errors, "rom_vs_hf": rom_vs_hf,
            "rom_reports": rom_reports, "bases": bases}
    tables = {"errors": errors_rows, "rates": [], "iterations": iter_rows,
              "timings": timing_rows, "eigenvalues": eig_rows,
              "condition_numbers": cond_rows, "summary": summary_rows}
    return ExperimentResult(experiment=exp, config=config, data=data,
                            tables=tables, out_dir=config.out_dir)


# --------------------------------------------------------------------------
# Parametric two-region benchmark (experiment 2)
# --------------------------------------------------------------------------

EXAMPLE2_BAND = (0.35, 0.65)
EXAMPLE2_ALPHA = 1.0
EXAMPLE2_ALPHA_T = 1e-4
EXAMPLE2_ALPHA_M = 1e-6
EXAMPLE2_C0 = 1e-2
EXAMPLE2_CD = 1.0
EXAMPLE2_THETA0 = 1.0


@dataclass(frozen=True)
class GaussianDipole:
    """Injection/production source: a positive and a negative Gaussian."""

    x1: float = 0.25
    y1: float = 0.5
    x2: float = 0.75
    y2: float = 0.5
    width: float = 1000.0
    amplitude: float = 1e-2

    def __call__(self, x, y, t):
        lobe1 = np.exp(-self.width * ((x - self.x1) ** 2 + (y - self.y1) ** 2))
        lobe2 = np.exp(-self.width * ((x - self.x2) ** 2 + (y - self.y2) ** 2))
        return self.amplitude * (lobe1 - lobe2)


def example2_params(omega, L: float = 1.0) -> PhysicalParams:
    """Material record at one parameter point; both moduli are 10**omega2."""
    elastic = 10.0 ** float(omega[1])
    return PhysicalParams(mu=elastic, lam=elastic, c0=EXAMPLE2_C0,
                          alpha=EXAMPLE2_ALPHA, alpha_T=EXAMPLE2_ALPHA_T,
                          alpha_m=EXAMPLE2_ALPHA_M, C_d=EXAMPLE2_CD,
                          theta0=EXAMPLE2_THETA0, L=L)


def example2_coeffs(omega) -> CoefficientField:
    """Conductivities: fixed inside the band (label 1), 10**omega1-scaled
    outside (label 2)."""
    w1 = float(omega[0])
    return CoefficientField(K={1: 1e-1, 2: 10.0 ** (w1 - 1.0)},
                            D={1: 1.0, 2: 10.0 ** w1})


def example2_spaces(n: int) -> SpaceSet:
    """Banded mesh with clamped displacement and no-flux scalar fields."""
    mesh = build_unit_square_mesh(n, region=RegionSpec(*EXAMPLE2_BAND))
    return build_spaces(mesh, BcSpec(u=DIRICHLET, p=NEUMANN, theta=NEUMANN))


def example2_full_order_terms(spaces: SpaceSet, L: float = 1.0):
    """Parameter-independent matrices of the affine operator splitting.

    Returns (constant, terms): constant maps block names to matrices that do
    not depend on the parameters; terms maps the remaining names to lists of
    (matrix, exp1, exp2) whose scalar coefficient is 10**(exp1*w1 + exp2*w2).
    """
    kern = P1Kernels(spaces.mesh)
    labels = spaces.mesh.cell_labels

    def asm(element, test, trial):
        return kern.assemble(element, _COMPONENTS[test], _COMPONENTS[trial],
                             spaces, test, trial)

    inside = (labels == 1).astype(np.float64)
    outside = 1.0 - inside
    mass = kern.scalar_mass()
    pair_sv = kern.div_pairing_scalar_test()
    pair_vs = kern.div_pairing_vector_test()
    elastic_unit = 2.0 * kern.eps_eps() + kern.div_div()

    a = EXAMPLE2_ALPHA
    a_T = EXAMPLE2_ALPHA_T
    a_m = EXAMPLE2_ALPHA_M
    th0 = EXAMPLE2_THETA0

    constant = {
        "AUP": asm(-a * pair_vs, "u", "p"),
        "P_PP": asm(EXAMPLE2_C0 * mass, "p", "p"),
        "P_PT": asm(-3.0 * a_m * mass, "p", "theta"),
        "P_PU": asm(a * pair_sv, "p", "u"),
        "P_TP": asm(-3.0 * a_m * th0 * mass, "theta", "p"),
        "P_TT": asm(EXAMPLE2_CD * mass, "theta", "theta"),
    }
    # The drained modulus is lam + mu = 2 * 10**omega2, so every block that
    # carries K_dr picks up a factor 2 and the exponent (0, 1); the flow
    # stabilization divides by it instead, hence (0, -1).
    terms = {
        "APP": [(asm(kern.scalar_stiffness(1e-1 * inside), "p", "p"), 0.0, 0.0),
                (asm(kern.scalar_stiffness(1e-1 * outside), "p", "p"), 1.0, 0.0)],
        "ATT": [(asm(kern.scalar_stiffness(inside), "theta", "theta"), 0.0, 0.0),
                (asm(kern.scalar_stiffness(outside), "theta", "theta"), 1.0, 0.0)],
        "AUU": [(asm(elastic_unit, "u", "u"), 0.0, 1.0)],
        "AUT": [(asm(-6.0 * a_T * pair_vs, "u", "theta"), 0.0, 1.0)],
        "P_TU": [(asm(6.0 * a_T * th0 * pair_sv, "theta", "u"), 0.0, 1.0)],
        "S_PP": [(asm((L * a ** 2 / 2.0) * mass, "p", "p"), 0.0, -1.0)],
        "S_TT": [(asm(18.0 * L * a_T ** 2 * th0 * mass, "theta", "theta"),
                  0.0, 1.0)],
    }
    return constant, terms


def example2_affine_family(basis: ReducedBasis, spaces: SpaceSet, dt: float,
                           loads, L: float = 1.0) -> AffineOperatorFamily:
    """Project the affine splitting onto the basis once, for all parameters."""
    constant_fo, terms_fo = example2_full_order_terms(spaces, L)
    constant = {name: project_block_matrix(basis, name, matrix)
                for name, matrix in constant_fo.items()}
    terms = {name: [AffineTerm(project_block_matrix(basis, name, matrix),
                               exp1=e1, exp2=e2)
                    for matrix, e1, e2 in entries]
             for name, entries in terms_fo.items()}
    return AffineOperatorFamily(constant, terms, dt,
                                project_loads(basis, loads))


def example2_direct_blocks(basis: ReducedBasis, spaces: SpaceSet, omega,
                           L: float = 1.0) -> ReducedBlocks:
    """Assemble at one parameter point and project; the affine reference."""
    ops = build_operator_set(spaces, example2_params(omega, L),
                             example2_coeffs(omega))
    return project_blocks(basis, ops)


def affine_blocks_at(family: AffineOperatorFamily, omega) -> ReducedBlocks:
    """Combine the affine terms of every block at one parameter point."""
    return ReducedBlocks(**{name: family.block_at(name, omega)
                            for name in BLOCK_NAMES})


def blocks_relative_difference(a: ReducedBlocks, b: ReducedBlocks) -> float:
    """Max over blocks of the Frobenius-relative difference."""
    worst = 0.0
    for name in BLOCK_NAMES:
        x = getattr(a, name)
        y = getattr(b, name)
        scale = max(float(np.linalg.norm(y)), 1e-300)
        worst = max(worst, float(np.linalg.norm(x - y)) / scale)
    return worst


def _example2_hf_run(config: ExperimentConfig, omega):
    """Both full-order schemes at one parameter point."""
    spaces = example2_spaces(config.n)
    params = example2_params(omega, config.L)
    coeffs = example2_coeffs(omega)
    ops = build_operator_set(spaces, params, coeffs)
    dipole = GaussianDipole()
    problem = HfProblem(spaces=spaces, params=params, coeffs=coeffs,
                        fluid_source=dipole, heat_source=dipole,
                        static_loads=True)
    out = {}
    for scheme in (MONOLITHIC, FIXED_STRESS):
        traj, report = run_hf(problem, scheme, config.dt_train,
                              config.T_train, stopping=config.stopping,
                              ops=ops)
        out[_rom_schemes(scheme)[0]] = (traj, report)
    return omega, out


def _run_2(config: ExperimentConfig) -> ExperimentResult:
    exp = config.experiment
    grid = config.grid
    spaces = example2_spaces(config.n)
    dt = config.dt_train
    n_steps = integral_steps(config.T_train, dt)
    assembler = LoadAssembler(spaces)
    dipole = GaussianDipole()
    g_vec = assembler.scalar("p", dipole, 0.0)
    eta_vec = assembler.scalar("theta", dipole, 0.0)
    f_vec = np.zeros(spaces.u.n_free)
    loads = [(f_vec, g_vec, eta_vec)] * n_steps

    train_points = grid.train_points()
    logger.info("training at %d parameter points", len(train_points))
    train_runs = dict(_map(partial(_example2_hf_run, config), train_points,
                           config.workers))

    r_top = max(config.r_values)
    errors_rows, iter_rows, timing_rows, cond_rows = [], [], [], []
    param_rows, summary_rows = [], []
    data: dict = {"spaces": spaces, "loads": loads, "train_runs": train_runs}

    bases, families = {}, {}
    eig_rows: list[tuple] = []
    for scheme in (MONOLITHIC, FIXED_STRESS):
        hf_label, rom_label = _rom_schemes(scheme)
        family_key = "m" if scheme == MONOLITHIC else "fs"
        pooled_u = np.vstack([train_runs[w][hf_label][0].U
                              for w in train_points])
        pooled_p = np.vstack([train_runs[w][hf_label][0].P
                              for w in train_points])
        pooled_t = np.vstack([train_runs[w][hf_label][0].TH
                              for w in train_points])
        ops_any = build_operator_set(spaces, example2_params(train_points[0]),
                                     example2_coeffs(train_points[0]))
        t0 = time.perf_counter()
        basis = build_basis(
            [SnapshotSet("u", pooled_u, ops_any.GRAM_U),
             SnapshotSet("p", pooled_p, ops_any.GRAM_P),
             SnapshotSet("theta", pooled_t, ops_any.GRAM_T)],
            r_max=r_top, eig_floor=config.eig_floor)
        pod_seconds = time.perf_counter() - t0
        bases[family_key] = basis
        timing_rows.append((exp, rom_label, "pod_seconds", pod_seconds))
        if scheme == FIXED_STRESS:
            eig_rows = _eigenvalue_rows(basis)

        t0 = time.perf_counter()
        families[family_key] = example2_affine_family(basis, spaces, dt,
                                                      loads, L=config.L)
        timing_rows.append((exp, rom_label, "affine_projection_seconds",
                            time.perf_counter() - t0))
    data.update(bases=bases, families=families)

    # Note: the Gram matrices of this problem do not depend on the parameters
    # (unit-coefficient L2 + H1 products), so any parameter point provides
    # the norms used below.
    norm_ops = build_operator_set(spaces, example2_params(train_points[0]),
                                  example2_coeffs(train_points[0]))

    cases = {"i": grid.case_i_points(), "ii": grid.case_ii_points(),
             "iii": grid.case_iii_points()}
    case_errors: dict = {name: {M_ROM: {}, FS_ROM: {}} for name in cases}
    iter_ratio: dict = {name: {} for name in cases}
    speedup: dict = {name: {} for name in cases}
    trend: dict = {M_ROM: {}, FS_ROM: {}}

    for case_name, points in cases.items():
        for omega in points:
            if omega in train_runs:
                hf_at = train_runs[omega]
            else:
                hf_at = _example2_hf_run(config, omega)[1]
            for scheme in (MONOLITHIC, FIXED_STRESS):
                hf_label, rom_label = _rom_schemes(scheme)
                family_key = "m" if scheme == MONOLITHIC else "fs"
                basis = bases[family_key]
                family = families[family_key]
                hf_traj, hf_report = hf_at[hf_label]
                combined = affine_blocks_at(family, omega)
                per_r = {}
                for r in config.r_values:
                    ranks_r = _clipped_ranks(basis, r)
                    rom_ops = _truncated_operators(combined, family.loads,
                                                   dt, ranks_r)
                    rom_traj, rom_report = run_rom(rom_label, rom_ops,
                                                   stopping=config.stopping)
                    lifted = lift_trajectory(rom_traj,
                                             basis.truncated(ranks_r))
                    dist = trajectory_distance(lifted, hf_traj, norm_ops, "h1")
                    final = _final_time_distance(lifted, hf_traj, norm_ops)
                    per_r[r] = {"max": dist, "final": final}
                    for name in FIELDS:
                        param_rows.append((exp, rom_label, case_name,
                                           omega[0], omega[1], r, name,
                                           "h1_rel_max", dist[name]))
                        param_rows.append((exp, rom_label, case_name,
                                           omega[0], omega[1], r, name,
                                           "h1_rel_final", final[name]))
                    if r == r_top:
                        if rom_label == FS_ROM:
                            hf_total = sum(hf_report.iterations)
                            rom_total = sum(rom_report.iterations)
                            iter_ratio[case_name][omega] = rom_total / hf_total
                            for matrix, value in (
                                    rom_ops.fs_condition_numbers().items()):
                                cond_rows.append(
                                    (f"{exp}_w1={omega[0]:g}_w2={omega[1]:g}",
                                     rom_label, r, matrix, value))
                        if rom_label == FS_ROM:
                            speedup[case_name][omega] = (
                                hf_report.total_seconds
                                / max(rom_report.total_seconds, 1e-12))
                case_errors[case_name][rom_label][omega] = per_r
        # Mean over the case-i points per r gives the error-vs-r trend.
        if case_name == "i":
            for rom_label in (M_ROM, FS_ROM):
                for r in config.r_values:
                    trend[rom_label][r] = {
                        name: float(np.mean(
                            [case_errors["i"][rom_label][w][r]["max"][name]
                             for w in points]))
                        for name in FIELDS}
                    for name in FIELDS:
                        errors_rows.append(
                            (exp, rom_label, name, "h1_rel_vs_hf_mean_case_i",
                             f"r{r}", trend[rom_label][r][name]))

    for case_name in cases:
        for omega, ratio in iter_ratio[case_name].items():
            summary_rows.append(
                (exp, f"iter_ratio_case_{case_name}_w1={omega[0]:g}"
                      f"_w2={omega[1]:g}", ratio))
        for omega, value in speedup[case_name].items():
            summary_rows.append(
                (exp, f"speedup_case_{case_name}_w1={omega[0]:g}"
                      f"_w2={omega[1]:g}", value))

    data.update(case_errors=case_errors, trend=trend, iter_ratio=iter_ratio,
                speedup=speedup)
    tables = {"errors": errors_rows, "rates": [], "iterations": iter_rows,
              "timings": timing_rows, "eigenvalues": eig_rows,
              "condition_numbers": cond_rows, "param_errors": param_rows,
              "summary": summary_rows}
    return ExperimentResult(experiment=exp, config=config, data=data,
                            tables=tables, out_dir=config.out_dir)


def _final_time_distance(traj: Trajectory, reference: Trajectory,
                         ops: OperatorSet) -> dict[str, float]:
    """Relative H1 distance of the final states only."""
    out = {}
    for idx, (name, rows) in enumerate(_field_rows(traj)):
        ref_rows = {"u": reference.U, "p": reference.P,
                    "theta": reference.TH}[name]
        matrix = getattr(ops, _NORM_MATRICES["h1"][idx])
        err = history_norms(rows[-1:] - ref_rows[-1:], matrix)[0]
        ref = history_norms(ref_rows[-1:], matrix)[0]
        out[name] = float(err / max(ref, 1e-300))
    return out


# --------------------------------------------------------------------------
# Dispatcher
# --------------------------------------------------------------------------

_DRIVERS = {"1a": _run_1a, "1b": _run_1b, "1c": _run_1c, "1d": _run_1d,
            "2": _run_2}


def run_config(config: ExperimentConfig) -> ExperimentResult:
    """Run the experiment an already-built config describes."""
    logger.info("running experiment %s", config.experiment)
    result = _DRIVERS[config.experiment](config)
    if config.out_dir:
        write_bundle(result)
    return result


def run_example(experiment: str, overrides: dict | None = None,
                out_dir: str | None = None,
                workers: int | None = None) -> ExperimentResult:
    """Run one ready-made experiment, optionally writing its CSV bundle."""
    config = default_config(experiment, **(overrides or {}))
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    if workers is not None:
        config = replace(config, workers=workers)
    return run_config(config)
