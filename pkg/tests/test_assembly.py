import numpy as np
import pytest

from thermoporo.assembly import (
    CoefficientField,
    FORM_SPACES,
    FormId,
    LoadAssembler,
    P1Kernels,
    PhysicalParams,
    QUAD_ORDER4,
    QUAD_ORDER7,
    assemble_form,
    assemble_load,
    build_operator_set,
)
from thermoporo.meshing import BcSpec, RegionSpec, build_spaces, build_unit_square_mesh

from conftest import make_reference_triangle_spaces

UNIT_COEFFS = CoefficientField.constant(K=1.0, D=1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        PhysicalParams(mu=0.0, lam=1.0, c0=1.0, alpha=1.0, alpha_T=0.0,
                       alpha_m=0.0, C_d=1.0, theta0=1.0)
    with pytest.raises(ValueError):
        PhysicalParams(mu=1.0, lam=1.0, c0=1.0, alpha=-1.0, alpha_T=0.0,
                       alpha_m=0.0, C_d=1.0, theta0=1.0)
    p = PhysicalParams(mu=2.0, lam=3.0, c0=1.0, alpha=0.0, alpha_T=0.0,
                       alpha_m=0.0, C_d=1.0, theta0=1.0)
    assert p.K_dr == 5.0


def test_coefficients_validation():
    with pytest.raises(ValueError):
        CoefficientField.constant(K=0.0, D=1.0)
    coeffs = CoefficientField(K={1: 0.1, 2: 1.0}, D={1: 1.0, 2: 0.01})
    mesh = build_unit_square_mesh(10, region=RegionSpec(0.4, 0.6))
    k = coeffs.k_per_cell(mesh)
    assert set(np.unique(k)) == {0.1, 1.0}
    incomplete = CoefficientField(K={2: 1.0}, D={2: 1.0})
    with pytest.raises(KeyError):
        incomplete.k_per_cell(mesh)


def test_quadrature_weights_normalized():
    for pts, w in (QUAD_ORDER4, QUAD_ORDER7):
        assert np.isclose(w.sum(), 1.0, atol=1e-12)
        assert np.allclose(pts.sum(axis=1), 1.0, atol=1e-12)


def test_reference_triangle_stiffness():
    spaces = make_reference_triangle_spaces()
    params = PhysicalParams(mu=1.0, lam=0.0, c0=1.0, alpha=1.0, alpha_T=0.0,
                            alpha_m=0.0, C_d=1.0, theta0=1.0)
    app = assemble_form(FormId.APP, spaces, params, UNIT_COEFFS).toarray()
    expect = np.array([
        [1.0, -0.5, -0.5],
        [-0.5, 0.5, 0.0],
        [-0.5, 0.0, 0.5],
    ])
    assert np.allclose(app, expect, atol=1e-14)


def test_reference_triangle_mass():
    spaces = make_reference_triangle_spaces()
    params = PhysicalParams(mu=1.0, lam=0.0, c0=1.0, alpha=1.0, alpha_T=0.0,
                            alpha_m=0.0, C_d=1.0, theta0=1.0)
    mass = assemble_form(FormId.MPP, spaces, params, UNIT_COEFFS, dt=1.0).toarray()
    expect = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
    assert np.allclose(mass, expect, atol=1e-15)


def test_mass_row_sums_equal_area_thirds():
    # P1 mass row sums are the lumped vertex measures sum(area)/3.
    mesh = build_unit_square_mesh(3)
    spaces = build_spaces(mesh, BcSpec(p="neumann", u="neumann", theta="neumann"))
    ops = build_operator_set(
        spaces,
        PhysicalParams(mu=1.0, lam=0.0, c0=1.0, alpha=1.0, alpha_T=0.0,
                       alpha_m=0.0, C_d=1.0, theta0=1.0),
        UNIT_COEFFS,
    )
    row_sums = np.asarray(ops.MASS_P.sum(axis=1)).ravel()
    oracle = np.zeros(mesh.n_vertices)
    areas = mesh.cell_areas()
    for cell, area in zip(mesh.cells, areas):
        oracle[cell] += area / 3.0
    assert np.allclose(row_sums, oracle, atol=1e-15)
    assert np.isclose(row_sums.sum(), 1.0, atol=1e-14)


def test_auu_spd_and_symmetric(params1, coeffs1, spaces4):
    auu = assemble_form(FormId.AUU, spaces4, params1, coeffs1)
    dense = auu.toarray()
    assert np.allclose(dense, dense.T, atol=1e-12)
    np.linalg.cholesky(dense)  # raises if not positive definite


def test_gram_and_mass_spd(params1, coeffs1, spaces4):
    ops = build_operator_set(spaces4, params1, coeffs1)
    for mat in (ops.GRAM_U, ops.GRAM_P, ops.GRAM_T, ops.MASS_U, ops.MASS_P, ops.MASS_T):
        np.linalg.cholesky(mat.toarray())


def test_bulk_modulus_coercivity(params1, coeffs1, spaces4):
    # K_dr ||div v||^2 <= 2 mu ||eps(v)||^2 + lam ||div v||^2 for any v.
    kern = P1Kernels(spaces4.mesh)
    div_div = kern.assemble(kern.div_div(), 2, 2, spaces4, "u", "u")
    auu = assemble_form(FormId.AUU, spaces4, params1, coeffs1)
    rng = np.random.default_rng(42)
    for _ in range(20):
        v = rng.standard_normal(spaces4.u.n_free)
        lhs = params1.K_dr * (v @ (div_div @ v))
        rhs = v @ (auu @ v)
        assert lhs <= rhs * (1.0 + 1e-12)


def test_pressure_divergence_duality(params1, coeffs1, spaces4):
    # (p, div v) assembled on the u-rows equals the transpose of
    # (div u, w) assembled on the p-rows.
    aup = assemble_form(FormId.AUP, spaces4, params1, coeffs1)
    mpu = assemble_form(FormId.MPU, spaces4, params1, coeffs1, dt=1.0)
    # alpha = 1, dt = 1: AUP = -(p, div v), MPU = (div u, w).
    diff = (aup.T + mpu).toarray()
    assert np.max(np.abs(diff)) <= 1e-12


def test_coefficient_scaling_linearity(params1, spaces4):
    base = assemble_form(FormId.APP, spaces4, params1,
                         CoefficientField.constant(K=1e-5, D=1e-5))
    scaled = assemble_form(FormId.APP, spaces4, params1,
                           CoefficientField.constant(K=1e-4, D=1e-5))
    assert np.allclose(scaled.toarray(), 10.0 * base.toarray(), rtol=1e-14)


def test_gram_is_mass_plus_unit_stiffness(params1, coeffs1, spaces4):
    ops = build_operator_set(spaces4, params1, coeffs1)
    unit_app = assemble_form(FormId.APP, spaces4, params1, UNIT_COEFFS)
    assert np.allclose(ops.GRAM_P.toarray(),
                       (ops.MASS_P + unit_app).toarray(), atol=1e-14)


def test_time_scaled_forms_require_dt(params1, coeffs1, spaces4):
    with pytest.raises(ValueError):
        assemble_form(FormId.MPP, spaces4, params1, coeffs1)
    with pytest.raises(ValueError):
        assemble_form(FormId.SPP, spaces4, params1, coeffs1, dt=0.0)


@pytest.mark.parametrize("form", list(FormId))
def test_operator_set_matches_assemble_form(form, params1):
    # Two assembly paths, one kernel contract: the prebuilt operator set and
    # the one-off assembler must agree entry for entry.
    mesh = build_unit_square_mesh(4, region=RegionSpec(0.25, 0.75))
    spaces = build_spaces(mesh, BcSpec(u="dirichlet", p="neumann", theta="dirichlet"))
    coeffs = CoefficientField(K={1: 0.1, 2: 1e-3}, D={1: 1.0, 2: 1e-2})
    ops = build_operator_set(spaces, params1, coeffs)
    dt = 0.05
    a = ops.table_matrix(form, dt=dt)
    b = assemble_form(form, spaces, params1, coeffs, dt=dt)
    assert a.shape == b.shape
    assert np.allclose(a.toarray(), b.toarray(), rtol=1e-14, atol=0.0)
    test_field, trial_field = FORM_SPACES[form]
    assert a.shape[0] == spaces.field(test_field).n_free
    assert a.shape[1] == spaces.field(trial_field).n_free


def test_zero_load_is_zero(params1, spaces4):
    out = assemble_load("p", lambda x, y, t: np.zeros_like(x), 0.0, spaces4)
    assert out.shape == (spaces4.p.n_free,)
    assert np.all(out == 0.0)


def test_constant_scalar_load_oracle(spaces4):
    mesh = spaces4.mesh
    out = assemble_load("p", lambda x, y, t: np.ones_like(x), 0.0, spaces4)
    oracle = np.zeros(mesh.n_vertices)
    for cell, area in zip(mesh.cells, mesh.cell_areas()):
        oracle[cell] += area / 3.0
    assert np.allclose(out, oracle[spaces4.p.free], atol=1e-15)


def test_constant_vector_load_interleaving(spaces4):
    mesh = spaces4.mesh
    fn = lambda x, y, t: (np.full_like(x, 1.0), np.full_like(x, 2.0))
    out = assemble_load("u", fn, 0.0, spaces4)
    oracle_scalar = np.zeros(mesh.n_vertices)
    for cell, area in zip(mesh.cells, mesh.cell_areas()):
        oracle_scalar[cell] += area / 3.0
    full = np.empty(2 * mesh.n_vertices)
    full[0::2] = oracle_scalar
    full[1::2] = 2.0 * oracle_scalar
    assert np.allclose(out, full[spaces4.u.free], atol=1e-14)


def test_load_rule_exact_for_low_degree(spaces4):
    fn = lambda x, y, t: x * x * y + t * y
    a = assemble_load("p", fn, 0.7, spaces4, rule="order4")
    b = assemble_load("p", fn, 0.7, spaces4, rule="order7")
    assert np.allclose(a, b, atol=1e-15)


def test_gaussian_source_against_higher_order_rule():
    # Sharp dipole source resolved on the fine production mesh: the 6-point
    # rule must agree with the 13-point oracle to 1e-8 per entry.
    mesh = build_unit_square_mesh(100, region=RegionSpec(0.35, 0.65))
    spaces = build_spaces(mesh, BcSpec(u="dirichlet", p="neumann", theta="neumann"))

    def source(x, y, t):
        return 1e-2 * (np.exp(-1000.0 * ((x - 0.25) ** 2 + (y - 0.5) ** 2))
                       - np.exp(-1000.0 * ((x - 0.75) ** 2 + (y - 0.5) ** 2)))

    a = LoadAssembler(spaces, rule="order4").scalar("p", source, 0.0)
    b = LoadAssembler(spaces, rule="order7").scalar("p", source, 0.0)
    assert np.max(np.abs(a - b)) <= 1e-8


def test_unknown_rule_rejected(spaces4):
    with pytest.raises(ValueError):
        LoadAssembler(spaces4, rule="order99")
