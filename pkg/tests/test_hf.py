"""Time-stepping tests: monolithic oracle, fixed-stress fixed point,
scheme equivalence, contraction monitoring, and trajectory I/O."""

import csv

import numpy as np
import pytest

from thermoporo.assembly import (
    CoefficientField,
    FormId,
    LoadAssembler,
    PhysicalParams,
    build_operator_set,
)
from thermoporo.hf import (
    FIXED_STRESS,
    MONOLITHIC,
    FixedStressSolver,
    HfProblem,
    MonolithicSolver,
    State,
    StoppingCriterion,
    Trajectory,
    check_assumptions,
    run_hf,
)
from thermoporo.manufactured import ManufacturedCase
from thermoporo.meshing import BcSpec, build_spaces, build_unit_square_mesh


def make_case():
    params = PhysicalParams(mu=1e2, lam=1e2, c0=1.0, alpha=1.0, alpha_T=1e-3,
                            alpha_m=1e-5, C_d=1.0, theta0=1.0, L=1.0)
    return ManufacturedCase(params=params, K=1e-5, D=1e-5)


def make_problem(case, n=4):
    mesh = build_unit_square_mesh(n)
    spaces = build_spaces(mesh, BcSpec())
    initial = tuple(case.interpolant(spaces, name, 0.0)
                    for name in ("u", "p", "theta"))
    return HfProblem(spaces=spaces, params=case.params, coeffs=case.coeffs(),
                     body_force=case.body_force,
                     fluid_source=case.fluid_source,
                     heat_source=case.heat_source,
                     initial=initial)


@pytest.fixture(scope="module")
def problem4():
    return make_problem(make_case(), n=4)


@pytest.fixture(scope="module")
def ops4(problem4):
    return build_operator_set(problem4.spaces, problem4.params, problem4.coeffs)


class TestAssumptions:
    def test_satisfied(self):
        params = PhysicalParams(mu=1.0, lam=1.0, c0=1.0, alpha=1.0,
                                alpha_T=1e-3, alpha_m=1e-5, C_d=1.0,
                                theta0=1.0, L=1.0)
        report = check_assumptions(params, warn=False)
        assert report.all_ok
        assert report.storage_margin == pytest.approx(1.0 - 3e-5)

    def test_storage_violated(self):
        params = PhysicalParams(mu=1.0, lam=1.0, c0=1e-6, alpha=1.0,
                                alpha_T=1e-3, alpha_m=1e-5, C_d=1.0,
                                theta0=1.0, L=1.0)
        report = check_assumptions(params, warn=False)
        assert not report.storage_ok
        assert report.heat_capacity_ok

    def test_violation_warns_but_does_not_raise(self, caplog):
        params = PhysicalParams(mu=1.0, lam=1.0, c0=1.0, alpha=1.0,
                                alpha_T=1e-3, alpha_m=1e-5, C_d=1.0,
                                theta0=1.0, L=0.5)
        with caplog.at_level("WARNING", logger="thermoporo.hf"):
            report = check_assumptions(params)
        assert not report.stabilization_ok
        assert any("assumptions" in rec.message for rec in caplog.records)


class TestMonolithic:
    def test_zero_forcing_zero_initial_stays_zero(self, problem4):
        quiet = HfProblem(spaces=problem4.spaces, params=problem4.params,
                          coeffs=problem4.coeffs)
        traj, report = run_hf(quiet, MONOLITHIC, dt=0.1, T=0.3)
        assert traj.n_states == 4
        assert np.all(traj.U == 0.0)
        assert np.all(traj.P == 0.0)
        assert np.all(traj.TH == 0.0)
        assert report.iterations == [1, 1, 1]

    def test_single_step_matches_dense_solve(self):
        case = make_case()
        problem = make_problem(case, n=3)
        spaces = problem.spaces
        ops = build_operator_set(spaces, problem.params, problem.coeffs)
        dt = 0.1
        solver = MonolithicSolver(ops, dt)

        blocks = [[FormId.AUU, FormId.AUP, FormId.AUT],
                  [FormId.MPU, None, FormId.MPT],
                  [FormId.MTU, FormId.MTP, None]]
        dense = np.block([
            [ops.table_matrix(f, dt).toarray() if f is not None else
             np.zeros((spaces.field(r).n_free, spaces.field(c).n_free))
             for c, f in zip(("u", "p", "theta"), row)]
            for r, row in zip(("u", "p", "theta"), blocks)])
        nu, npp = spaces.u.n_free, spaces.p.n_free
        dense[nu:nu + npp, nu:nu + npp] = (
            ops.table_matrix(FormId.MPP, dt) + ops.APP).toarray()
        dense[nu + npp:, nu + npp:] = (
            ops.table_matrix(FormId.MTT, dt) + ops.ATT).toarray()

        prev = problem.initial_state()
        assembler = LoadAssembler(spaces)
        f = assembler.vector(case.body_force, dt)
        g = assembler.scalar("p", case.fluid_source, dt)
        eta = assembler.scalar("theta", case.heat_source, dt)
        rhs = np.concatenate([
            f,
            g + (ops.P_PU / dt) @ prev.u + (ops.P_PP / dt) @ prev.p
            + (ops.P_PT / dt) @ prev.theta,
            eta + (ops.P_TU / dt) @ prev.u + (ops.P_TP / dt) @ prev.p
            + (ops.P_TT / dt) @ prev.theta,
        ])
        expected = np.linalg.solve(dense, rhs)

        state = solver.step(prev, (f, g, eta))
        got = np.concatenate([state.u, state.p, state.theta])
        assert np.allclose(got, expected, rtol=1e-10, atol=1e-13)


@pytest.fixture(scope="module")
def setting():
    case = make_case()
    problem = make_problem(case, n=4)
    ops = build_operator_set(problem.spaces, problem.params, problem.coeffs)
    dt = 0.05
    mono = MonolithicSolver(ops, dt)
    fs = FixedStressSolver(ops, dt)
    prev = problem.initial_state()
    assembler = LoadAssembler(problem.spaces)
    loads = (assembler.vector(case.body_force, dt),
             assembler.scalar("p", case.fluid_source, dt),
             assembler.scalar("theta", case.heat_source, dt))
    target = mono.step(prev, loads)
    return fs, prev, loads, target


class TestFixedStressFixedPoint:
    """A sweep started at the coupled-step solution must reproduce it."""

    def test_flow_solve(self, setting):
        fs, prev, loads, target = setting
        p = fs.step_flow(target, prev, loads[1])
        assert np.allclose(p, target.p, rtol=1e-10, atol=1e-14)

    def test_heat_solve(self, setting):
        fs, prev, loads, target = setting
        theta = fs.step_heat(target, prev, loads[2])
        assert np.allclose(theta, target.theta, rtol=1e-10, atol=1e-14)

    def test_mechanics_solve(self, setting):
        fs, prev, loads, target = setting
        u = fs.step_mech(target.p, target.theta, loads[0])
        assert np.allclose(u, target.u, rtol=1e-10, atol=1e-14)

    def test_full_sweep(self, setting):
        fs, prev, loads, target = setting
        new = fs.sweep(target, prev, loads)
        for got, want in ((new.u, target.u), (new.p, target.p),
                          (new.theta, target.theta)):
            assert np.allclose(got, want, rtol=1e-10, atol=1e-14)


class TestFixedStressRuns:
    def test_matches_monolithic_at_tight_tolerance(self, problem4, ops4):
        dt, T = 0.05, 0.25
        traj_m, _ = run_hf(problem4, MONOLITHIC, dt, T, ops=ops4)
        traj_f, report = run_hf(problem4, FIXED_STRESS, dt, T, ops=ops4,
                                stopping=StoppingCriterion(tol=1e-12))
        assert all(report.converged)
        for a, b in ((traj_f.U, traj_m.U), (traj_f.P, traj_m.P),
                     (traj_f.TH, traj_m.TH)):
            scale = np.abs(b).max()
            assert np.abs(a - b).max() <= 1e-8 * scale

    def test_contraction_sequences_non_increasing(self, problem4, ops4):
        _, report = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.15, ops=ops4,
                           track_contraction=True)
        assert report.triple_norms is not None
        assert len(report.triple_norms) == 3
        assert report.contraction_violations() == 0
        for seq in report.triple_norms:
            # Initializer plus at least two computed sweeps, decaying hard.
            assert len(seq) >= 3
            computed = seq[1:]
            for a, b in zip(computed, computed[1:]):
                assert b <= 0.5 * a

    def test_contraction_requires_tracking(self, problem4, ops4):
        _, report = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.05, ops=ops4)
        with pytest.raises(ValueError, match="track"):
            report.contraction_violations()

    def test_looser_tolerance_needs_fewer_sweeps(self, problem4, ops4):
        _, loose = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.15, ops=ops4,
                          stopping=StoppingCriterion(tol=1e-4))
        _, tight = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.15, ops=ops4,
                          stopping=StoppingCriterion(tol=1e-10))
        assert loose.avg_iterations < tight.avg_iterations

    def test_deterministic_reruns(self, problem4, ops4):
        kw = dict(dt=0.05, T=0.15, ops=ops4)
        t1, _ = run_hf(problem4, FIXED_STRESS, **kw)
        t2, _ = run_hf(problem4, FIXED_STRESS, **kw)
        assert np.array_equal(t1.U, t2.U)
        assert np.array_equal(t1.P, t2.P)
        assert np.array_equal(t1.TH, t2.TH)

    def test_sweep_cap_reported_not_fatal(self, problem4, ops4):
        _, report = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.05, ops=ops4,
                           stopping=StoppingCriterion(tol=1e-16, max_iter=3))
        assert report.iterations == [3]
        assert report.n_unconverged == 1


class TestRunHarness:
    def test_rejects_unknown_scheme(self, problem4):
        with pytest.raises(ValueError, match="scheme"):
            run_hf(problem4, "explicit", dt=0.1, T=0.2)

    def test_rejects_incommensurate_horizon(self, problem4):
        with pytest.raises(ValueError, match="multiple"):
            run_hf(problem4, MONOLITHIC, dt=0.01, T=0.013)

    def test_static_load_caching_matches_fresh_assembly(self):
        case = make_case()
        mesh = build_unit_square_mesh(3)
        spaces = build_spaces(mesh, BcSpec())
        source = lambda x, y, t: np.exp(-x) * (1.0 + y)
        base = dict(spaces=spaces, params=case.params, coeffs=case.coeffs(),
                    fluid_source=source)
        t1, _ = run_hf(HfProblem(**base, static_loads=True),
                       MONOLITHIC, dt=0.1, T=0.3)
        t2, _ = run_hf(HfProblem(**base), MONOLITHIC, dt=0.1, T=0.3)
        assert np.array_equal(t1.P, t2.P)
        assert np.array_equal(t1.U, t2.U)

    def test_invalid_stopping(self):
        with pytest.raises(ValueError):
            StoppingCriterion(tol=0.0)
        with pytest.raises(ValueError):
            StoppingCriterion(tol=1e-8, max_iter=0)


class TestTrajectory:
    def test_shape_and_times(self, problem4, ops4):
        traj, report = run_hf(problem4, MONOLITHIC, dt=0.01, T=0.05, ops=ops4)
        assert traj.n_states == 6
        assert report.n_steps == 5
        assert np.allclose(traj.times, 0.01 * np.arange(6))
        state = traj.state(2)
        assert state.t == pytest.approx(0.02)
        assert np.array_equal(state.p, traj.P[2])
        assert traj.field_history("theta") is traj.TH

    def test_save_load_round_trip(self, problem4, ops4, tmp_path):
        traj, _ = run_hf(problem4, MONOLITHIC, dt=0.05, T=0.15, ops=ops4)
        path = str(tmp_path / "run.traj")
        traj.save(path)
        back = Trajectory.load(path)
        assert back.dt == traj.dt
        assert np.array_equal(back.U, traj.U)
        assert np.array_equal(back.P, traj.P)
        assert np.array_equal(back.TH, traj.TH)

    def test_load_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.traj"
        path.write_bytes(b"not a trajectory at all")
        with pytest.raises(ValueError, match="not a trajectory"):
            Trajectory.load(str(path))

    def test_mismatched_histories_rejected(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((3, 4)), np.zeros((2, 2)), np.zeros((3, 2)), 0.1)


class TestReport:
    def test_csv_export(self, problem4, ops4, tmp_path):
        _, report = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.15, ops=ops4)
        path = tmp_path / "report.csv"
        report.to_csv(str(path))
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["time_index", "t", "iterations", "converged",
                           "inc_u", "inc_p", "inc_theta", "solve_seconds"]
        assert len(rows) == 1 + report.n_steps
        assert [int(r[2]) for r in rows[1:]] == report.iterations
        assert all(r[3] == "1" for r in rows[1:])

    def test_aggregates(self, problem4, ops4):
        _, report = run_hf(problem4, FIXED_STRESS, dt=0.05, T=0.15, ops=ops4)
        assert report.avg_iterations == pytest.approx(
            sum(report.iterations) / 3.0)
        assert report.total_seconds >= sum(report.step_seconds)
        assert report.n_unconverged == 0
