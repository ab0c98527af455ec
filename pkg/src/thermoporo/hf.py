"""High-fidelity backward-Euler solvers for the coupled system.

Two schemes advance the same P1 discretization in time:

* monolithic: one sparse 3x3 block solve per step;
* fixed-stress: an iterative splitting that solves flow, then heat, then
  mechanics, with mass-type stabilization terms L*alpha^2/K_dr and
  9*L*alpha_T^2*K_dr*theta0 on the diagonal, sweeping until the relative H1
  increments of all three fields drop below tolerance.

Both factorize their time-independent matrices once per run and reuse the
factors for every step.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (
    CoefficientField,
    LoadAssembler,
    OperatorSet,
    PhysicalParams,
    build_operator_set,
)
from .linalg import Factorization, factorize
from .meshing import SpaceSet

__all__ = [
    "State",
    "Trajectory",
    "StoppingCriterion",
    "SolverReport",
    "AssumptionReport",
    "check_assumptions",
    "HfProblem",
    "MonolithicSolver",
    "FixedStressSolver",
    "run_hf",
    "MONOLITHIC",
    "FIXED_STRESS",
]

logger = logging.getLogger("thermoporo.hf")

MONOLITHIC = "monolithic"
FIXED_STRESS = "fixed_stress"

_TRAJ_MAGIC = b"TPORTRAJ"
_TRAJ_VERSION = 1


@dataclass(frozen=True)
class State:
    """Free-dof coefficient vectors of the three fields at one time."""

    u: np.ndarray
    p: np.ndarray
    theta: np.ndarray
    t: float


class Trajectory:
    """Dense time history of all three fields on the free dofs.

    Row n of each array is the state at time n*dt (row 0 is the initial
    condition).
    """

    def __init__(self, U: np.ndarray, P: np.ndarray, TH: np.ndarray, dt: float):
        if not (U.shape[0] == P.shape[0] == TH.shape[0]):
            raise ValueError("field histories disagree on the number of states")
        self.U = U
        self.P = P
        self.TH = TH
        self.dt = float(dt)

    @property
    def n_states(self) -> int:
        return self.U.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_states)

    def state(self, n: int) -> State:
        return State(u=self.U[n], p=self.P[n], theta=self.TH[n], t=n * self.dt)

    def field_history(self, field_name: str) -> np.ndarray:
        return {"u": self.U, "p": self.P, "theta": self.TH}[field_name]

    def save(self, path: str) -> None:
        """Binary layout: magic, version, sizes, state count, dt, payloads."""
        with open(path, "wb") as fh:
            fh.write(_TRAJ_MAGIC)
            fh.write(struct.pack("<IQQQQd", _TRAJ_VERSION,
                                 self.U.shape[1], self.P.shape[1],
                                 self.TH.shape[1], self.n_states, self.dt))
            fh.write(np.ascontiguousarray(self.U).tobytes())
            fh.write(np.ascontiguousarray(self.P).tobytes())
            fh.write(np.ascontiguousarray(self.TH).tobytes())

    @classmethod
    def load(cls, path: str) -> "Trajectory":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _TRAJ_MAGIC:
                raise ValueError(f"{path}: not a trajectory file")
            version, n_u, n_p, n_t, n_states, dt = struct.unpack(
                "<IQQQQd", fh.read(struct.calcsize("<IQQQQd")))
            if version != _TRAJ_VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            def read_block(n_cols):
                data = fh.read(8 * n_states * n_cols)
                return np.frombuffer(data, dtype=np.float64).reshape(n_states, n_cols)
            U = read_block(n_u)
            P = read_block(n_p)
            TH = read_block(n_t)
        return cls(U.copy(), P.copy(), TH.copy(), dt)


@dataclass(frozen=True)
class StoppingCriterion:
    """Relative-increment test applied to all three fields per sweep.

    The iteration stops once ||x^{i+1} - x^i||_1 <= tol * ||x^{i+1}||_1
    holds simultaneously for displacement, pressure and temperature, where
    ||.||_1 is the full H1 norm of the field's space.
    """

    tol: float = 1e-10
    max_iter: int = 20

    def __post_init__(self) -> None:
        if not self.tol > 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class AssumptionReport:
    """Convergence-theory parameter checks; violations warn, never abort."""

    storage_ok: bool          # c0 > 3 alpha_m
    heat_capacity_ok: bool    # C_d > 3 alpha_m theta0
    stabilization_ok: bool    # L >= 1 (= 2*delta at the smallest delta 1/2)
    storage_margin: float
    heat_capacity_margin: float
    stabilization_margin: float

    @property
    def all_ok(self) -> bool:
        return self.storage_ok and self.heat_capacity_ok and self.stabilization_ok


def check_assumptions(params: PhysicalParams, warn: bool = True) -> AssumptionReport:
    """Check the sufficient conditions for fixed-stress contraction."""
    report = AssumptionReport(
        storage_ok=params.c0 > 3.0 * params.alpha_m,
        heat_capacity_ok=params.C_d > 3.0 * params.alpha_m * params.theta0,
        stabilization_ok=params.L >= 1.0,
        storage_margin=params.c0 - 3.0 * params.alpha_m,
        heat_capacity_margin=params.C_d - 3.0 * params.alpha_m * params.theta0,
        stabilization_margin=params.L - 1.0,
    )
    if warn and not report.all_ok:
        logger.warning(
            "fixed-stress contraction assumptions violated: "
            "c0 margin %.3e, C_d margin %.3e, L margin %.3e",
            report.storage_margin, report.heat_capacity_margin,
            report.stabilization_margin)
    return report


@dataclass
class SolverReport:
    """Per-run instrumentation: iteration counts, increments, wall clock."""

    scheme: str
    dt: float
    setup_seconds: float = 0.0
    iterations: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    increments: list = field(default_factory=list)   # (u, p, theta) per step
    step_seconds: list = field(default_factory=list)
    triple_norms: list | None = None  # per step: triple norm per sweep

    @property
    def n_steps(self) -> int:
        return len(self.iterations)

    @property
    def total_seconds(self) -> float:
        return self.setup_seconds + sum(self.step_seconds)

    @property
    def avg_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else 0.0

    @property
    def avg_step_seconds(self) -> float:
        return float(np.mean(self.step_seconds)) if self.step_seconds else 0.0

    @property
    def n_unconverged(self) -> int:
        return int(sum(1 for c in self.converged if not c))

    def contraction_violations(self) -> int:
        """Transitions between computed sweeps where the tracked norm grew.

        The first recorded value of each step is the sweep initializer (the
        previous time-step state), whose displacement is not in equilibrium
        with the new loads; the decay guarantee covers computed iterates
        only, so the initializer transition is excluded.  A roundoff-scale
        slack forgives wiggle at the double-precision floor.
        """
        if self.triple_norms is None:
            raise ValueError("run was not tracked; pass track_contraction=True")
        count = 0
        for seq in self.triple_norms:
            computed = seq[1:]
            slack = 1e-13 * max(seq, default=0.0)
            count += sum(1 for a, b in zip(computed, computed[1:])
                         if b > a + slack)
        return count

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_index", "t", "iterations", "converged",
                        "inc_u", "inc_p", "inc_theta", "solve_seconds"])
            for n in range(self.n_steps):
                inc = self.increments[n]
                w.writerow([
                    n + 1, f"{(n + 1) * self.dt:.17g}", self.iterations[n],
                    int(self.converged[n]),
                    f"{inc[0]:.17g}", f"{inc[1]:.17g}", f"{inc[2]:.17g}",
                    f"{self.step_seconds[n]:.6e}",
                ])


@dataclass
class HfProblem:
    """Everything the time steppers need besides the time grid.

    Load callables are vectorized over point arrays at a scalar time; the
    body force returns a component pair.  ``initial`` holds free-dof vectors
    at t = 0 (zeros when omitted).  Set ``static_loads`` when the sources do
    not depend on time so each load is assembled once per run.
    """

    spaces: SpaceSet
    params: PhysicalParams
    coeffs: CoefficientField
    body_force: object = None
    fluid_source: object = None
    heat_source: object = None
    initial: tuple | None = None
    static_loads: bool = False

    def initial_state(self) -> State:
        if self.initial is None:
            return State(u=np.zeros(self.spaces.u.n_free),
                         p=np.zeros(self.spaces.p.n_free),
                         theta=np.zeros(self.spaces.theta.n_free), t=0.0)
        u0, p0, th0 = self.initial
        return State(u=np.asarray(u0, dtype=np.float64),
                     p=np.asarray(p0, dtype=np.float64),
                     theta=np.asarray(th0, dtype=np.float64), t=0.0)


class _Loads:
    """Assembles (f, g, eta) at a given time, caching static sources."""

    def __init__(self, problem: HfProblem):
        self.problem = problem
        self.assembler = LoadAssembler(problem.spaces, rule="order4")
        self._cache = None

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.problem.static_loads and self._cache is not None:
            return self._cache
        spaces = self.problem.spaces
        pb = self.problem
        f = (self.assembler.vector(pb.body_force, t) if pb.body_force is not None
             else np.zeros(spaces.u.n_free))
        g = (self.assembler.scalar("p", pb.fluid_source, t)
             if pb.fluid_source is not None else np.zeros(spaces.p.n_free))
        eta = (self.assembler.scalar("theta", pb.heat_source, t)
               if pb.heat_source is not None else np.zeros(spaces.theta.n_free))
        out = (f, g, eta)
        if self.problem.static_loads:
            self._cache = out
        return out


def _h1_norm(gram: sp.csr_matrix, v: np.ndarray) -> float:
    return float(np.sqrt(max(v @ (gram @ v), 0.0)))


class MonolithicSolver:
    """One sparse block solve per time step; factorized once."""

    def __init__(self, ops: OperatorSet, dt: float):
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.ops = ops
        self.dt = dt
        self.MPP = ops.P_PP / dt
        self.MPT = ops.P_PT / dt
        self.MPU = ops.P_PU / dt
        self.MTT = ops.P_TT / dt
        self.MTP = ops.P_TP / dt
        self.MTU = ops.P_TU / dt
        block = sp.bmat([
            [ops.AUU, ops.AUP, ops.AUT],
            [self.MPU, self.MPP + ops.APP, self.MPT],
            [self.MTU, self.MTP, self.MTT + ops.ATT],
        ], format="csr")
        self.factor: Factorization = factorize(block)
        self._nu = ops.spaces.u.n_free
        self._np = ops.spaces.p.n_free

    def step(self, prev: State, loads: tuple) -> State:
        f, g, eta = loads
        rhs = np.concatenate([
            f,
            g + self.MPU @ prev.u + self.MPP @ prev.p + self.MPT @ prev.theta,
            eta + self.MTU @ prev.u + self.MTP @ prev.p + self.MTT @ prev.theta,
        ])
        x = self.factor.solve(rhs)
        nu, npp = self._nu, self._np
        return State(u=x[:nu], p=x[nu:nu + npp], theta=x[nu + npp:],
                     t=prev.t + self.dt)


class FixedStressSolver:
    """Flow -> heat -> mechanics sweeps with mass stabilization.

    The flow and heat solves of sweep i+1 read the iterate i of the other
    fields; only the concluding mechanics solve sees the new pressure and
    temperature.  Each left-hand matrix is factorized once.
    """

    def __init__(self, ops: OperatorSet, dt: float):
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.ops = ops
        self.dt = dt
        self.MPP = ops.P_PP / dt
        self.MPT = ops.P_PT / dt
        self.MPU = ops.P_PU / dt
        self.MTT = ops.P_TT / dt
        self.MTP = ops.P_TP / dt
        self.MTU = ops.P_TU / dt
        self.SPP = ops.S_PP / dt
        self.STT = ops.S_TT / dt
        self.flow_factor = factorize(self.MPP + ops.APP + self.SPP)
        self.heat_factor = factorize(self.MTT + ops.ATT + self.STT)
        self.mech_factor = factorize(ops.AUU)

    # The three half-steps, exposed for the fixed-point tests.

    def step_flow(self, iterate: State, prev: State, g: np.ndarray) -> np.ndarray:
        rhs = (g + self.MPP @ prev.p + self.SPP @ iterate.p
               - self.MPU @ (iterate.u - prev.u)
               - self.MPT @ (iterate.theta - prev.theta))
        return self.flow_factor.solve(rhs)

    def step_heat(self, iterate: State, prev: State, eta: np.ndarray) -> np.ndarray:
        rhs = (eta + self.MTT @ prev.theta + self.STT @ iterate.theta
               - self.MTU @ (iterate.u - prev.u)
               - self.MTP @ (iterate.p - prev.p))
        return self.heat_factor.solve(rhs)

    def step_mech(self, p_new: np.ndarray, theta_new: np.ndarray,
                  f: np.ndarray) -> np.ndarray:
        rhs = f - self.ops.AUP @ p_new - self.ops.AUT @ theta_new
        return self.mech_factor.solve(rhs)

    def sweep(self, iterate: State, prev: State, loads: tuple) -> State:
        """One full fixed-stress iteration from the given iterate."""
        f, g, eta = loads
        p_new = self.step_flow(iterate, prev, g)
        theta_new = self.step_heat(iterate, prev, eta)
        u_new = self.step_mech(p_new, theta_new, f)
        return State(u=u_new, p=p_new, theta=theta_new, t=prev.t + self.dt)

    def advance(self, prev: State, loads: tuple, stopping: StoppingCriterion,
                monitor=None) -> tuple[State, int, bool, tuple]:
        """Iterate sweeps until the relative H1 increments pass.

        Returns (state, sweeps, converged, final increments).  ``monitor``
        is an optional callback invoked with each iterate (the initial one
        included) for contraction instrumentation.
        """
        ops = self.ops
        iterate = State(u=prev.u, p=prev.p, theta=prev.theta, t=prev.t + self.dt)
        if monitor is not None:
            monitor(iterate)
        increments = (np.inf, np.inf, np.inf)
        for sweep_count in range(1, stopping.max_iter + 1):
            new = self.sweep(iterate, prev, loads)
            if monitor is not None:
                monitor(new)
            inc_u = _h1_norm(ops.GRAM_U, new.u - iterate.u)
            inc_p = _h1_norm(ops.GRAM_P, new.p - iterate.p)
            inc_t = _h1_norm(ops.GRAM_T, new.theta - iterate.theta)
            increments = (inc_u, inc_p, inc_t)
            ok = (inc_u <= stopping.tol * _h1_norm(ops.GRAM_U, new.u)
                  and inc_p <= stopping.tol * _h1_norm(ops.GRAM_P, new.p)
                  and inc_t <= stopping.tol * _h1_norm(ops.GRAM_T, new.theta))
            iterate = new
            if ok:
                return iterate, sweep_count, True, increments
        return iterate, stopping.max_iter, False, increments


def run_hf(problem: HfProblem, scheme: str, dt: float, T: float,
           stopping: StoppingCriterion | None = None,
           ops: OperatorSet | None = None,
           track_contraction: bool = False) -> tuple[Trajectory, SolverReport]:
    """Advance a problem from t=0 to t=T and record the full history.

    ``track_contraction`` (fixed-stress only) additionally solves the
    monolithic system at every step from the same previous state and records
    the stabilization-weighted L2 error norm of (p, theta) across sweeps.
    """
    if scheme not in (MONOLITHIC, FIXED_STRESS):
        raise ValueError(f"unknown scheme {scheme!r}")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a positive multiple of dt={dt}")

    check_assumptions(problem.params)
    t_setup = time.perf_counter()
    if ops is None:
        ops = build_operator_set(problem.spaces, problem.params, problem.coeffs)
    stopping = stopping or StoppingCriterion()
    if scheme == MONOLITHIC:
        solver = MonolithicSolver(ops, dt)
        reference = None
    else:
        solver = FixedStressSolver(ops, dt)
        reference = MonolithicSolver(ops, dt) if track_contraction else None
    loads = _Loads(problem)
    report = SolverReport(scheme=scheme, dt=dt,
                          setup_seconds=time.perf_counter() - t_setup)
    if track_contraction:
        report.triple_norms = []

    prm = problem.params
    w_p = 3.0 * prm.alpha_m + prm.L * prm.alpha ** 2 / prm.K_dr
    w_t = 3.0 * prm.alpha_m + 9.0 * prm.L * prm.alpha_T ** 2 * prm.K_dr

    state = problem.initial_state()
    spaces = problem.spaces
    U = np.empty((n_steps + 1, spaces.u.n_free))
    P = np.empty((n_steps + 1, spaces.p.n_free))
    TH = np.empty((n_steps + 1, spaces.theta.n_free))
    U[0], P[0], TH[0] = state.u, state.p, state.theta

    for n in range(1, n_steps + 1):
        t_new = n * dt
        t0 = time.perf_counter()
        step_loads = loads.at(t_new)
        if scheme == MONOLITHIC:
            state = solver.step(state, step_loads)
            iters, conv, incs = 1, True, (0.0, 0.0, 0.0)
        else:
            monitor = None
            if reference is not None:
                target = reference.step(state, step_loads)
                seq: list[float] = []

                def monitor(it, _target=target, _seq=seq):
                    ep = it.p - _target.p
                    et = it.theta - _target.theta
                    val = np.sqrt(w_p * (ep @ (ops.MASS_P @ ep))
                                  + w_t * (et @ (ops.MASS_T @ et)))
                    _seq.append(float(val))

            state, iters, conv, incs = solver.advance(
                state, step_loads, stopping, monitor=monitor)
            if reference is not None:
                report.triple_norms.append(seq)
            if not conv:
                logger.warning("step %d: fixed-stress hit the %d-sweep cap "
                               "(increments %.2e %.2e %.2e)",
                               n, stopping.max_iter, *incs)
        report.step_seconds.append(time.perf_counter() - t0)
        report.iterations.append(iters)
        report.converged.append(conv)
        report.increments.append(incs)
        U[n], P[n], TH[n] = state.u, state.p, state.theta
        logger.info("step %4d t=%.6g iterations=%d increment=%.3e",
                    n, t_new, iters, max(incs))

    return Trajectory(U, P, TH, dt), report
