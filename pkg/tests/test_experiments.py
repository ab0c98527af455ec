"""Tests for the experiment drivers at miniature scale.

The ready-made studies are exercised with tiny meshes and a handful of time
steps so the whole file runs in seconds; the full-size configurations are
covered by the acceptance suite.
"""

import os

import numpy as np
import pytest

from thermoporo.assembly import build_operator_set
from thermoporo.experiments import (
    ExperimentConfig,
    GaussianDipole,
    ParamGrid,
    affine_blocks_at,
    assemble_loads,
    basis_from_trajectory,
    blocks_relative_difference,
    build_manufactured_problem,
    default_config,
    example1_case,
    example2_affine_family,
    example2_coeffs,
    example2_direct_blocks,
    example2_full_order_terms,
    example2_params,
    example2_spaces,
    exact_histories,
    history_norms,
    integral_steps,
    manufactured_errors,
    run_convergence_study,
    run_example,
    trajectory_distance,
    write_bundle,
)
from thermoporo.experiments import _snapshot_rows
from thermoporo.hf import (
    FIXED_STRESS,
    HfProblem,
    StoppingCriterion,
    Trajectory,
    run_hf,
)
from thermoporo.rom import BLOCK_NAMES, instantiate_affine


TINY_1A = dict(n=4, dt_train=0.05, dt_online=0.05, T_train=0.2,
               T_online=0.2, cycles=2, r_values=(1, 2))


@pytest.fixture(scope="module")
def study_1a():
    return run_convergence_study(default_config("1a", **TINY_1A))


@pytest.fixture(scope="module")
def bundle_1a(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    return run_example("1a", overrides=TINY_1A, out_dir=str(out))


@pytest.fixture(scope="module")
def result_1b():
    return run_example("1b", overrides=dict(
        n=4, dt_train=0.05, dt_online=0.05, T_train=0.2, T_online=0.2,
        r_values=(1, 2, 3)))


@pytest.fixture(scope="module")
def result_1c():
    return run_example("1c", overrides=dict(
        n=4, dt_train=0.05, dt_online=0.05, T_train=0.1, T_online=0.2,
        r_values=(1, 2)))


@pytest.fixture(scope="module")
def result_1d():
    return run_example("1d", overrides=dict(
        n=4, dt_train=0.025, dt_online=0.05, T_train=0.2, T_online=0.2,
        r_values=(1, 2)))


@pytest.fixture(scope="module")
def ex2_affine():
    """Spaces, a two-mode basis, and the affine family built from it."""
    spaces = example2_spaces(20)
    omega = (-1.0, 0.0)
    params = example2_params(omega)
    coeffs = example2_coeffs(omega)
    ops = build_operator_set(spaces, params, coeffs)
    dipole = GaussianDipole()
    problem = HfProblem(spaces=spaces, params=params, coeffs=coeffs,
                        fluid_source=dipole, heat_source=dipole,
                        static_loads=True)
    traj, _ = run_hf(problem, FIXED_STRESS, 0.5, 1.0, ops=ops)
    basis = basis_from_trajectory(traj, ops, r_max=2)
    loads = assemble_loads(spaces, None, dipole, dipole, 0.5, 2)
    family = example2_affine_family(basis, spaces, 0.5, loads)
    return spaces, basis, family


@pytest.fixture(scope="module")
def result_2(tmp_path_factory):
    out = tmp_path_factory.mktemp("ex2")
    return run_example("2", overrides=dict(
        dt_train=0.5, dt_online=0.5, T_train=1.0, T_online=1.0,
        r_values=(1, 2), grid=ParamGrid(n_train=2, n_test=2)),
        out_dir=str(out))


class TestConfig:
    def test_integral_steps(self):
        assert integral_steps(1.0, 0.001) == 1000
        assert integral_steps(0.2, 0.05) == 4

    def test_non_integral_horizon_rejected(self):
        with pytest.raises(ValueError, match="integer multiple"):
            integral_steps(1.0, 0.0003)

    def test_defaults_exist_for_every_experiment(self):
        for exp in ("1a", "1b", "1c", "1d", "2"):
            config = default_config(exp)
            assert config.experiment == exp

    def test_unknown_experiment(self):
        with pytest.raises(ValueError, match="unknown experiment"):
            default_config("3z")

    def test_unknown_override_key(self):
        with pytest.raises(TypeError):
            default_config("1a", bogus_key=1)

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError, match="integer multiple"):
            default_config("1a", dt_train=0.3)

    def test_bad_r_values(self):
        with pytest.raises(ValueError, match="positive ints"):
            default_config("1a", r_values=(0, 1))
        with pytest.raises(ValueError, match="increasing"):
            default_config("1a", r_values=(3, 2))

    def test_bad_mesh_and_workers(self):
        with pytest.raises(ValueError, match="n must be"):
            default_config("1a", n=1)
        with pytest.raises(ValueError, match="workers"):
            default_config("1a", workers=0)

    def test_stopping_reflects_tolerances(self):
        config = default_config("1a", tol=1e-8, max_iter=7)
        assert config.stopping == StoppingCriterion(tol=1e-8, max_iter=7)


class TestParamGrid:
    def test_counts(self):
        grid = ParamGrid(n_train=3, n_test=4)
        assert len(grid.train_points()) == 9
        assert len(grid.case_ii_points()) == 12
        assert len(grid.case_iii_points()) == 12

    def test_case_ii_inside_training_box_and_fresh(self):
        grid = ParamGrid(n_train=3, n_test=4)
        train = set(grid.train_points())
        for pt in grid.case_ii_points():
            assert grid._in_train_box(pt)
            assert pt not in train

    def test_case_iii_outside_training_box(self):
        grid = ParamGrid(n_train=3, n_test=4)
        for pt in grid.case_iii_points():
            assert not grid._in_train_box(pt)
            assert -4.0 <= pt[0] <= 1.0 and -2.0 <= pt[1] <= 2.0

    def test_corners(self):
        grid = ParamGrid()
        assert set(grid.corners()) == {(-4.0, -2.0), (-4.0, 2.0),
                                       (1.0, -2.0), (1.0, 2.0)}

    def test_train_box_must_nest(self):
        with pytest.raises(ValueError, match="inside the test box"):
            ParamGrid(train_box=((-5.0, 0.0), (-1.0, 1.0)))

    def test_degenerate_interval(self):
        with pytest.raises(ValueError, match="empty parameter interval"):
            ParamGrid(train_box=((0.0, 0.0), (-1.0, 1.0)))


class TestNormHelpers:
    def test_history_norms_match_loop(self):
        rng = np.random.default_rng(7)
        import scipy.sparse as sp
        raw = rng.standard_normal((6, 6))
        matrix = sp.csr_matrix(raw.T @ raw + 6.0 * np.eye(6))
        rows = rng.standard_normal((4, 6))
        got = history_norms(rows, matrix)
        want = [np.sqrt(v @ (matrix @ v)) for v in rows]
        assert np.allclose(got, want, rtol=1e-13)

    def test_exact_trajectory_has_zero_error(self):
        case = example1_case()
        problem, spaces, ops = build_manufactured_problem(case, 3)
        times = 0.1 * np.arange(4)
        exact = exact_histories(case, spaces, times)
        traj = Trajectory(exact["u"], exact["p"], exact["theta"], 0.1)
        errors = manufactured_errors(traj, case, spaces, ops)
        for name in ("u", "p", "theta"):
            assert errors[name]["l2"] == 0.0
            assert errors[name]["h1_rel"] == 0.0

    def test_zero_trajectory_has_unit_relative_error(self):
        case = example1_case()
        problem, spaces, ops = build_manufactured_problem(case, 3)
        times = 0.1 * np.arange(4)
        exact = exact_histories(case, spaces, times)
        zeros = Trajectory(np.zeros_like(exact["u"]),
                           np.zeros_like(exact["p"]),
                           np.zeros_like(exact["theta"]), 0.1)
        errors = manufactured_errors(zeros, case, spaces, ops, exact=exact)
        for name in ("u", "p", "theta"):
            assert errors[name]["h1_rel"] == pytest.approx(1.0)
            assert errors[name]["l2_rel"] == pytest.approx(1.0)

    def test_distance_of_identical_trajectories_is_zero(self):
        case = example1_case()
        problem, spaces, ops = build_manufactured_problem(case, 3)
        times = 0.1 * np.arange(3)
        exact = exact_histories(case, spaces, times)
        traj = Trajectory(exact["u"], exact["p"], exact["theta"], 0.1)
        dist = trajectory_distance(traj, traj, ops, "h1")
        assert all(v == 0.0 for v in dist.values())

    def test_distance_rejects_mismatched_shapes(self):
        case = example1_case()
        problem, spaces, ops = build_manufactured_problem(case, 3)
        times = 0.1 * np.arange(3)
        exact = exact_histories(case, spaces, times)
        a = Trajectory(exact["u"], exact["p"], exact["theta"], 0.1)
        b = Trajectory(exact["u"][:2], exact["p"][:2], exact["theta"][:2], 0.1)
        with pytest.raises(ValueError, match="shapes"):
            trajectory_distance(a, b, ops)


class TestSnapshotDecimation:
    def test_no_decimation_below_cap(self):
        assert _snapshot_rows(5, 10).tolist() == [0, 1, 2, 3, 4]

    def test_endpoints_survive_decimation(self):
        rows = _snapshot_rows(1001, 80)
        assert rows[0] == 0 and rows[-1] == 1000
        assert len(rows) <= 80
        assert np.all(np.diff(rows) > 0)

    def test_basis_from_decimated_trajectory(self):
        case = example1_case()
        problem, spaces, ops = build_manufactured_problem(case, 3)
        traj, _ = run_hf(problem, FIXED_STRESS, 0.05, 0.3, ops=ops)
        basis = basis_from_trajectory(traj, ops, r_max=2, max_snapshots=4)
        assert basis.r("p") <= 2
        assert basis.field("p").modes.shape[0] == spaces.p.n_free


class TestConvergenceStudy:
    def test_cycle_geometry(self, study_1a):
        assert [c.n for c in study_1a.cycles] == [4, 8]
        assert study_1a.cycles[1].dt == pytest.approx(0.0125)

    def test_rates_cover_all_schemes(self, study_1a):
        for scheme in ("m_hf", "fs_hf", "m_rom_r2", "fs_rom_r1"):
            assert "c0c1" in study_1a.rates[scheme]["u"]["l2"]
            assert "fit" in study_1a.rates[scheme]["theta"]["h1"]

    def test_contraction_tracked_on_first_cycle_only(self, study_1a):
        assert study_1a.cycles[0].contraction_violations == 0
        assert study_1a.cycles[1].contraction_violations is None

    def test_schemes_agree_to_tolerance_scale(self, study_1a):
        for c in study_1a.cycles:
            for value in c.scheme_distance.values():
                assert value < 1e-6

    def test_rom_iteration_lists_recorded(self, study_1a):
        c = study_1a.cycles[0]
        steps = integral_steps(0.2, c.dt)
        for r, its in c.rom_iterations.items():
            assert len(its) == steps

    def test_fs_condition_numbers_finite(self, study_1a):
        for conds in study_1a.cycles[0].fs_condition.values():
            assert set(conds) == {"flow", "heat", "mechanics"}
            assert all(np.isfinite(v) and v >= 1.0 for v in conds.values())


class TestBundleWriting:
    def test_core_files_written(self, bundle_1a):
        for name in ("errors", "rates", "iterations", "timings",
                     "eigenvalues", "condition_numbers", "summary"):
            path = os.path.join(bundle_1a.out_dir, f"{name}.csv")
            assert os.path.exists(path)

    def test_manifest_written_last_and_complete(self, bundle_1a):
        manifest = os.path.join(bundle_1a.out_dir, "manifest.txt")
        listed = open(manifest).read().split()
        assert sorted(listed) == sorted(f for f in bundle_1a.files
                                        if f != "manifest.txt")

    def test_headers(self, bundle_1a):
        first = open(os.path.join(bundle_1a.out_dir, "errors.csv")).readline()
        assert first.strip() == "experiment,scheme,field,norm,cycle_or_r,value"

    def test_rewrite_is_byte_identical(self, bundle_1a):
        path = os.path.join(bundle_1a.out_dir, "errors.csv")
        before = open(path, "rb").read()
        write_bundle(bundle_1a)
        assert open(path, "rb").read() == before

    def test_write_requires_out_dir(self):
        orphan = run_example("1a", overrides=TINY_1A)
        assert orphan.out_dir is None
        with pytest.raises(ValueError, match="output directory"):
            write_bundle(orphan)

    def test_parallel_cycles_match_serial(self, bundle_1a):
        parallel = run_example("1a", overrides=TINY_1A, workers=2)
        serial_study = bundle_1a.data["study"]
        parallel_study = parallel.data["study"]
        for cs, cp in zip(serial_study.cycles, parallel_study.cycles):
            assert cs.hf_errors == cp.hf_errors


class TestTrainedModelStudy:
    def test_orthonormality_certificates(self, result_1b):
        for per_field in result_1b.data["defects"].values():
            for defect in per_field.values():
                assert defect < 1e-8

    def test_full_rank_reproduction(self, result_1b):
        for per_norm in result_1b.data["reproduction"].values():
            for per_field in per_norm.values():
                for value in per_field.values():
                    assert value < 1e-8

    def test_rom_error_decreases_with_r(self, result_1b):
        dist = result_1b.data["rom_vs_hf"]["fs_rom"]
        assert dist[3]["h1"]["u"] < dist[1]["h1"]["u"]

    def test_ranks_recorded(self, result_1b):
        for per_field in result_1b.data["ranks"].values():
            assert set(per_field) == {"u", "p", "theta"}
            assert all(r >= 1 for r in per_field.values())


class TestExtrapolationStudy:
    def test_variants_present(self, result_1c):
        assert set(result_1c.data["variants"]) == {"default", "no_floor"}

    def test_training_window_shorter_than_horizon(self, result_1c):
        variants = result_1c.data["variants"]
        for variant in variants.values():
            assert set(variant["errors"]) == {1, 2}
            for conds in variant["conds"].values():
                assert set(conds) == {"flow", "heat", "mechanics"}

    def test_unconverged_counts_are_ints(self, result_1c):
        for variant in result_1c.data["variants"].values():
            for count in variant["unconverged"].values():
                assert isinstance(count, int)

    def test_horizon_must_contain_training_window(self):
        with pytest.raises(ValueError, match="online horizon"):
            run_example("1c", overrides=dict(
                n=4, dt_train=0.05, dt_online=0.05, T_train=0.2,
                T_online=0.1, r_values=(1,)))


class TestCoarseOnlineStepStudy:
    def test_rom_runs_on_coarser_grid(self, result_1d):
        report = result_1d.data["rom_reports"]["fs_rom"][2]
        assert report.n_steps == 4
        assert result_1d.data["hf_reports"]["fs_hf"].n_steps == 8

    def test_distance_to_subsampled_reference_finite(self, result_1d):
        for per_r in result_1d.data["rom_vs_hf"].values():
            for per_field in per_r.values():
                assert all(np.isfinite(v) for v in per_field.values())


class TestExample2Pieces:
    def test_band_requires_aligned_mesh(self):
        with pytest.raises(ValueError):
            example2_spaces(4)

    def test_spaces_have_neumann_scalars(self):
        spaces = example2_spaces(20)
        assert spaces.p.n_free == spaces.p.n_dofs
        assert spaces.theta.n_free == spaces.theta.n_dofs
        assert spaces.u.n_free < spaces.u.n_dofs

    def test_params_scale_with_second_parameter(self):
        params = example2_params((-2.0, 1.0))
        assert params.mu == params.lam == pytest.approx(10.0)
        assert params.c0 == pytest.approx(1e-2)

    def test_coeffs_scale_with_first_parameter(self):
        coeffs = example2_coeffs((-2.0, 1.0))
        assert coeffs.K == {1: 1e-1, 2: pytest.approx(1e-3)}
        assert coeffs.D == {1: 1.0, 2: pytest.approx(1e-2)}

    def test_dipole_antisymmetry(self):
        dipole = GaussianDipole()
        x = np.array([0.25, 0.75, 0.5])
        y = np.array([0.5, 0.5, 0.5])
        values = dipole(x, y, 0.0)
        assert values[0] == pytest.approx(-values[1])
        assert values[2] == pytest.approx(0.0, abs=1e-18)
        assert values[0] == pytest.approx(1e-2, rel=1e-9)

    def test_full_order_terms_cover_all_blocks(self):
        spaces = example2_spaces(20)
        constant, terms = example2_full_order_terms(spaces)
        assert set(constant) | set(terms) == set(BLOCK_NAMES)
        assert not set(constant) & set(terms)


class TestExample2Affine:
    @pytest.mark.parametrize("omega", [(-1.0, 0.0), (-3.0, -1.0), (0.0, 1.0),
                                       (-4.0, -2.0), (1.0, 2.0), (-2.2, 0.7)])
    def test_affine_matches_direct_projection(self, ex2_affine, omega):
        spaces, basis, family = ex2_affine
        direct = example2_direct_blocks(basis, spaces, omega)
        combined = affine_blocks_at(family, omega)
        assert blocks_relative_difference(combined, direct) < 1e-12

    def test_instantiation_is_runnable(self, ex2_affine):
        spaces, basis, family = ex2_affine
        ops = instantiate_affine(family, (0.5, -1.5))
        assert ops.n_steps == 2
        assert ops.r_p == basis.r("p")

    def test_difference_of_identical_blocks_is_zero(self, ex2_affine):
        spaces, basis, family = ex2_affine
        combined = affine_blocks_at(family, (0.0, 0.0))
        assert blocks_relative_difference(combined, combined) == 0.0


class TestExample2Driver:
    def test_all_cases_evaluated(self, result_2):
        cases = result_2.data["case_errors"]
        assert len(cases["i"]["fs_rom"]) == 4
        assert len(cases["ii"]["fs_rom"]) == 0
        assert len(cases["iii"]["fs_rom"]) == 4

    def test_more_modes_replay_training_points_better(self, result_2):
        trend = result_2.data["trend"]["fs_rom"]
        assert trend[2]["p"] < trend[1]["p"]
        for per_field in trend.values():
            assert all(np.isfinite(v) and v >= 0.0
                       for v in per_field.values())

    def test_trend_recorded_per_r(self, result_2):
        trend = result_2.data["trend"]["fs_rom"]
        assert set(trend) == {1, 2}

    def test_param_errors_table_written(self, result_2):
        path = os.path.join(result_2.out_dir, "param_errors.csv")
        lines = open(path).read().splitlines()
        assert lines[0] == ("experiment,scheme,case,omega1,omega2,"
                            "r,field,norm,value")
        assert len(lines) > 1

    def test_iteration_ratios_bounded(self, result_2):
        # A rank-2 surrogate may legitimately need fewer sweeps than the
        # full-order solver; the ratio only needs to stay of order one.
        for ratio in result_2.data["iter_ratio"]["i"].values():
            assert 0.2 < ratio < 3.0
