"""Reduced-order solvers obtained by Galerkin projection onto POD modes.

The offline stage projects every assembled operator and every load vector
onto the per-field mode matrices; the online stage then runs the same
monolithic and fixed-stress time loops as the full schemes, but on dense
systems whose size is the mode count.  Mass-like matrices are stored free of
the time step and scaled by 1/dt when a concrete online grid is chosen, so
one offline pass serves any online time step.  For parametrized problems
whose coefficients enter affinely, the projected matrices are stored as
parameter-independent terms with scalar coefficient functions and combined
per parameter point without touching the full-order problem again.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np
import scipy.linalg

from .hf import SolverReport, State, StoppingCriterion, Trajectory
from .linalg import condition_number_2
from .pod import ReducedBasis

__all__ = [
    "RomError",
    "RomState",
    "ReducedBlocks",
    "RomOperators",
    "AffineTerm",
    "AffineOperatorFamily",
    "BLOCK_NAMES",
    "BLOCK_FIELD_PAIRS",
    "project_block_matrix",
    "project_blocks",
    "project_loads",
    "project_operators",
    "project_initial_condition",
    "lift",
    "lift_trajectory",
    "solve_m_rom_step",
    "fs_rom_step_i",
    "fs_rom_step_ii",
    "fs_rom_step_iii",
    "fs_rom_sweep",
    "run_rom",
    "instantiate_affine",
    "M_ROM",
    "FS_ROM",
]

logger = logging.getLogger("thermoporo.rom")

M_ROM = "m_rom"
FS_ROM = "fs_rom"

# Reduced states reuse the full-order container; the coefficient vectors are
# simply mode coordinates instead of nodal values.
RomState = State


class RomError(Exception):
    """Projection or reduced-solve failure."""


@dataclass(frozen=True)
class ReducedBlocks:
    """Time-step-free congruence products of all operators.

    Mass-like blocks (P_*, S_*) carry the same dt-free scaling as their
    full-order counterparts: dividing by dt yields the matrices of the time
    steppers.
    """

    AUU: np.ndarray
    AUP: np.ndarray
    AUT: np.ndarray
    APP: np.ndarray
    ATT: np.ndarray
    P_PP: np.ndarray
    P_PT: np.ndarray
    P_PU: np.ndarray
    P_TU: np.ndarray
    P_TP: np.ndarray
    P_TT: np.ndarray
    S_PP: np.ndarray
    S_TT: np.ndarray

    @property
    def r_u(self) -> int:
        return self.AUU.shape[0]

    @property
    def r_p(self) -> int:
        return self.APP.shape[0]

    @property
    def r_theta(self) -> int:
        return self.ATT.shape[0]


BLOCK_NAMES = tuple(f.name for f in dataclass_fields(ReducedBlocks))

# (test field, trial field) per block; rows belong to the test field.
BLOCK_FIELD_PAIRS: dict[str, tuple[str, str]] = {
    "AUU": ("u", "u"), "AUP": ("u", "p"), "AUT": ("u", "theta"),
    "APP": ("p", "p"), "ATT": ("theta", "theta"),
    "P_PP": ("p", "p"), "P_PT": ("p", "theta"), "P_PU": ("p", "u"),
    "P_TU": ("theta", "u"), "P_TP": ("theta", "p"), "P_TT": ("theta", "theta"),
    "S_PP": ("p", "p"), "S_TT": ("theta", "theta"),
}


def _congruence(test_modes: np.ndarray, matrix, trial_modes: np.ndarray,
                name: str) -> np.ndarray:
    if (matrix.shape[0] != test_modes.shape[0]
            or matrix.shape[1] != trial_modes.shape[0]):
        raise RomError(
            f"{name}: operator shape {matrix.shape} does not match basis "
            f"sizes {test_modes.shape[0]} x {trial_modes.shape[0]}")
    return test_modes.T @ (matrix @ trial_modes)


def project_block_matrix(basis: ReducedBasis, name: str, matrix) -> np.ndarray:
    """Congruence-project one full-order matrix onto the modes of its block.

    ``name`` selects the (test, trial) field pair from BLOCK_FIELD_PAIRS, so
    the caller can project individual affine terms or replacement operators
    consistently with project_blocks.
    """
    if name not in BLOCK_FIELD_PAIRS:
        raise RomError(f"unknown operator block {name!r}")
    test_field, trial_field = BLOCK_FIELD_PAIRS[name]
    return _congruence(basis.field(test_field).modes, matrix,
                       basis.field(trial_field).modes, name)


def project_blocks(basis: ReducedBasis, hf_ops) -> ReducedBlocks:
    """Congruence-project every assembled operator onto the basis."""
    return ReducedBlocks(**{
        name: project_block_matrix(basis, name, getattr(hf_ops, name))
        for name in BLOCK_NAMES})


def project_loads(basis: ReducedBasis, loads_over_time):
    """Project the (f, g, eta) vectors of every online step onto the basis.

    ``loads_over_time`` is a sequence of full-order load triples for the
    time indices 1..N.  Returns arrays of shape (N, r_field).
    """
    Pu = basis.field("u").modes
    Pp = basis.field("p").modes
    Pt = basis.field("theta").modes
    F, G, H = [], [], []
    for f, g, eta in loads_over_time:
        F.append(Pu.T @ f)
        G.append(Pp.T @ g)
        H.append(Pt.T @ eta)
    return np.array(F), np.array(G), np.array(H)


def _lu(matrix: np.ndarray, name: str):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        factor = scipy.linalg.lu_factor(matrix)
    if np.any(np.diag(factor[0]) == 0.0):
        raise RomError(
            f"{name}: reduced matrix is exactly singular "
            f"(condition number {condition_number_2(matrix):.3e})")
    return factor


class RomOperators:
    """Reduced matrices at a concrete online time step, plus all loads.

    Factorizations are computed eagerly so instances are read-only after
    construction and safe to share across threads.
    """

    def __init__(self, blocks: ReducedBlocks, dt: float, loads):
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.blocks = blocks
        self.dt = dt
        F, G, H = loads
        F, G, H = np.asarray(F), np.asarray(G), np.asarray(H)
        if not (F.shape[0] == G.shape[0] == H.shape[0]):
            raise RomError("load histories disagree on the number of steps")
        if (F.shape[1] != blocks.r_u or G.shape[1] != blocks.r_p
                or H.shape[1] != blocks.r_theta):
            raise RomError("load widths do not match the basis ranks")
        self.F, self.G, self.H = F, G, H

        b = blocks
        self.MPP = b.P_PP / dt
        self.MPT = b.P_PT / dt
        self.MPU = b.P_PU / dt
        self.MTU = b.P_TU / dt
        self.MTP = b.P_TP / dt
        self.MTT = b.P_TT / dt
        self.SPP = b.S_PP / dt
        self.STT = b.S_TT / dt
        self.flow_lhs = self.MPP + b.APP + self.SPP
        self.heat_lhs = self.MTT + b.ATT + self.STT
        self.block_lhs = np.block([
            [b.AUU, b.AUP, b.AUT],
            [self.MPU, self.MPP + b.APP, self.MPT],
            [self.MTU, self.MTP, self.MTT + b.ATT],
        ])
        self._m_factor = _lu(self.block_lhs, "coupled step")
        self._flow_factor = _lu(self.flow_lhs, "flow step")
        self._heat_factor = _lu(self.heat_lhs, "heat step")
        self._mech_factor = _lu(b.AUU, "mechanics step")

    @property
    def n_steps(self) -> int:
        return self.F.shape[0]

    @property
    def r_u(self) -> int:
        return self.blocks.r_u

    @property
    def r_p(self) -> int:
        return self.blocks.r_p

    @property
    def r_theta(self) -> int:
        return self.blocks.r_theta

    def load_at(self, time_index: int):
        """Projected (f, g, eta) for computing the state at t = n*dt."""
        if not 1 <= time_index <= self.n_steps:
            raise ValueError(
                f"time index {time_index} outside 1..{self.n_steps}")
        k = time_index - 1
        return self.F[k], self.G[k], self.H[k]

    def fs_condition_numbers(self) -> dict[str, float]:
        """2-norm condition numbers of the three split left-hand matrices."""
        return {
            "flow": condition_number_2(self.flow_lhs),
            "heat": condition_number_2(self.heat_lhs),
            "mechanics": condition_number_2(self.blocks.AUU),
        }

    def save(self, path: str) -> None:
        arrays = {name: getattr(self.blocks, name) for name in BLOCK_NAMES}
        np.savez(path, dt=np.float64(self.dt), F=self.F, G=self.G, H=self.H,
                 **arrays)

    @classmethod
    def load(cls, path: str) -> "RomOperators":
        with np.load(path) as data:
            blocks = ReducedBlocks(**{name: data[name]
                                      for name in BLOCK_NAMES})
            return cls(blocks, float(data["dt"]),
                       (data["F"], data["G"], data["H"]))


def project_operators(basis: ReducedBasis, hf_ops, loads_over_time,
                      dt: float) -> RomOperators:
    """Full offline pass: project all operators and loads, fix the step."""
    blocks = project_blocks(basis, hf_ops)
    return RomOperators(blocks, dt, project_loads(basis, loads_over_time))


def project_initial_condition(basis: ReducedBasis, state: State,
                              hf_ops) -> RomState:
    """L2-projection of a full-order state onto the basis, per field."""
    out = {}
    for name, mass, vec in (("u", hf_ops.MASS_U, state.u),
                            ("p", hf_ops.MASS_P, state.p),
                            ("theta", hf_ops.MASS_T, state.theta)):
        modes = basis.field(name).modes
        if modes.shape[0] != vec.shape[0]:
            raise RomError(f"{name}: state length {vec.shape[0]} does not "
                           f"match basis size {modes.shape[0]}")
        reduced_mass = modes.T @ (mass @ modes)
        try:
            out[name] = np.linalg.solve(reduced_mass, modes.T @ (mass @ vec))
        except np.linalg.LinAlgError as exc:
            raise RomError(f"{name}: reduced mass matrix is singular; the "
                           "basis has collapsed") from exc
    return RomState(u=out["u"], p=out["p"], theta=out["theta"], t=state.t)


def lift(state: RomState, basis: ReducedBasis) -> State:
    """Expand reduced coordinates into full-order coefficient vectors."""
    return State(u=basis.field("u").modes @ state.u,
                 p=basis.field("p").modes @ state.p,
                 theta=basis.field("theta").modes @ state.theta,
                 t=state.t)


def lift_trajectory(traj: Trajectory, basis: ReducedBasis) -> Trajectory:
    return Trajectory(traj.U @ basis.field("u").modes.T,
                      traj.P @ basis.field("p").modes.T,
                      traj.TH @ basis.field("theta").modes.T, traj.dt)


def solve_m_rom_step(prev: RomState, ops: RomOperators,
                     time_index: int) -> RomState:
    """One coupled reduced step: a single dense block solve."""
    f, g, eta = ops.load_at(time_index)
    rhs = np.concatenate([
        f,
        g + ops.MPU @ prev.u + ops.MPP @ prev.p + ops.MPT @ prev.theta,
        eta + ops.MTU @ prev.u + ops.MTP @ prev.p + ops.MTT @ prev.theta,
    ])
    x = scipy.linalg.lu_solve(ops._m_factor, rhs)
    ru, rp = ops.r_u, ops.r_p
    return RomState(u=x[:ru], p=x[ru:ru + rp], theta=x[ru + rp:],
                    t=time_index * ops.dt)


def fs_rom_step_i(iterate: RomState, prev: RomState, ops: RomOperators,
                  time_index: int) -> np.ndarray:
    """Flow solve of one reduced fixed-stress sweep."""
    _, g, _ = ops.load_at(time_index)
    rhs = (g + ops.MPP @ prev.p + ops.SPP @ iterate.p
           - ops.MPU @ (iterate.u - prev.u)
           - ops.MPT @ (iterate.theta - prev.theta))
    return scipy.linalg.lu_solve(ops._flow_factor, rhs)


def fs_rom_step_ii(iterate: RomState, prev: RomState, ops: RomOperators,
                   time_index: int) -> np.ndarray:
    """Heat solve; reads the pressure iterate, not the fresh pressure."""
    _, _, eta = ops.load_at(time_index)
    rhs = (eta + ops.MTT @ prev.theta + ops.STT @ iterate.theta
           - ops.MTU @ (iterate.u - prev.u)
           - ops.MTP @ (iterate.p - prev.p))
    return scipy.linalg.lu_solve(ops._heat_factor, rhs)


def fs_rom_step_iii(p_new: np.ndarray, theta_new: np.ndarray,
                    ops: RomOperators, time_index: int) -> np.ndarray:
    """Mechanics solve closing one reduced fixed-stress sweep."""
    f, _, _ = ops.load_at(time_index)
    rhs = f - ops.blocks.AUP @ p_new - ops.blocks.AUT @ theta_new
    return scipy.linalg.lu_solve(ops._mech_factor, rhs)


def fs_rom_sweep(iterate: RomState, prev: RomState, ops: RomOperators,
                 time_index: int) -> RomState:
    p_new = fs_rom_step_i(iterate, prev, ops, time_index)
    theta_new = fs_rom_step_ii(iterate, prev, ops, time_index)
    u_new = fs_rom_step_iii(p_new, theta_new, ops, time_index)
    return RomState(u=u_new, p=p_new, theta=theta_new,
                    t=time_index * ops.dt)


def _euclidean(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def _fs_rom_advance(prev: RomState, ops: RomOperators, time_index: int,
                    stopping: StoppingCriterion):
    """Sweep until the relative Euclidean increments of all fields pass."""
    iterate = RomState(u=prev.u, p=prev.p, theta=prev.theta,
                       t=time_index * ops.dt)
    increments = (np.inf, np.inf, np.inf)
    for sweep_count in range(1, stopping.max_iter + 1):
        new = fs_rom_sweep(iterate, prev, ops, time_index)
        inc = (_euclidean(new.u - iterate.u), _euclidean(new.p - iterate.p),
               _euclidean(new.theta - iterate.theta))
        increments = inc
        ok = (inc[0] <= stopping.tol * _euclidean(new.u)
              and inc[1] <= stopping.tol * _euclidean(new.p)
              and inc[2] <= stopping.tol * _euclidean(new.theta))
        iterate = new
        if ok:
            return iterate, sweep_count, True, increments
    return iterate, stopping.max_iter, False, increments


def run_rom(scheme: str, ops: RomOperators, initial: RomState | None = None,
            stopping: StoppingCriterion | None = None
            ) -> tuple[Trajectory, SolverReport]:
    """Advance the reduced system over the stored online time grid."""
    if scheme not in (M_ROM, FS_ROM):
        raise ValueError(f"unknown scheme {scheme!r}")
    t_setup = time.perf_counter()
    stopping = stopping or StoppingCriterion()
    if initial is None:
        state = RomState(u=np.zeros(ops.r_u), p=np.zeros(ops.r_p),
                         theta=np.zeros(ops.r_theta), t=0.0)
    else:
        state = initial
    n_steps = ops.n_steps
    U = np.empty((n_steps + 1, ops.r_u))
    P = np.empty((n_steps + 1, ops.r_p))
    TH = np.empty((n_steps + 1, ops.r_theta))
    U[0], P[0], TH[0] = state.u, state.p, state.theta
    report = SolverReport(scheme=scheme, dt=ops.dt,
                          setup_seconds=time.perf_counter() - t_setup)

    for n in range(1, n_steps + 1):
        t0 = time.perf_counter()
        if scheme == M_ROM:
            state = solve_m_rom_step(state, ops, n)
            iters, conv, incs = 1, True, (0.0, 0.0, 0.0)
        else:
            state, iters, conv, incs = _fs_rom_advance(state, ops, n,
                                                       stopping)
            if not conv:
                logger.warning(
                    "reduced step %d hit the %d-sweep cap "
                    "(increments %.2e %.2e %.2e)",
                    n, stopping.max_iter, *incs)
        report.step_seconds.append(time.perf_counter() - t0)
        report.iterations.append(iters)
        report.converged.append(conv)
        report.increments.append(incs)
        U[n], P[n], TH[n] = state.u, state.p, state.theta
        logger.info("reduced step %4d iterations=%d increment=%.3e",
                    n, iters, max(incs))

    return Trajectory(U, P, TH, ops.dt), report


@dataclass(frozen=True)
class AffineTerm:
    """One parameter-independent matrix with coefficient 10^(a*w1 + b*w2).

    Constant prefactors are baked into the matrix, so the coefficient
    function is a pure power of ten in the two parameter exponents.
    """

    matrix: np.ndarray
    exp1: float = 0.0
    exp2: float = 0.0

    def coefficient(self, omega) -> float:
        return 10.0 ** (self.exp1 * omega[0] + self.exp2 * omega[1])


class AffineOperatorFamily:
    """Projected operators split into parameter-independent affine terms.

    ``constant`` holds blocks without parameter dependence; ``terms`` maps
    the remaining block names to lists of AffineTerm whose weighted sum
    reconstructs the block at a given parameter point.  Loads and the online
    time step are parameter-independent and stored once.
    """

    def __init__(self, constant: dict, terms: dict, dt: float, loads):
        overlap = set(constant) & set(terms)
        if overlap:
            raise RomError(f"blocks defined twice: {sorted(overlap)}")
        missing = set(BLOCK_NAMES) - set(constant) - set(terms)
        if missing:
            raise RomError(f"blocks missing from the family: "
                           f"{sorted(missing)}")
        self.constant = dict(constant)
        self.terms = {name: list(entries) for name, entries in terms.items()}
        self.dt = float(dt)
        self.loads = loads

    def block_at(self, name: str, omega) -> np.ndarray:
        if name in self.constant:
            return self.constant[name]
        entries = self.terms[name]
        total = entries[0].coefficient(omega) * entries[0].matrix
        for term in entries[1:]:
            total = total + term.coefficient(omega) * term.matrix
        return total


def instantiate_affine(family: AffineOperatorFamily, omega) -> RomOperators:
    """Combine the affine terms at a parameter point into online operators."""
    blocks = ReducedBlocks(**{name: family.block_at(name, omega)
                              for name in BLOCK_NAMES})
    return RomOperators(blocks, family.dt, family.loads)
