import numpy as np
import pytest

from thermoporo.assembly import CoefficientField, PhysicalParams
from thermoporo.meshing import BcSpec, Mesh, build_spaces, build_unit_square_mesh


@pytest.fixture
def params1():
    """Material parameters of the homogeneous manufactured-solution setup."""
    return PhysicalParams(mu=1e2, lam=1e2, c0=1.0, alpha=1.0, alpha_T=1e-3,
                          alpha_m=1e-5, C_d=1.0, theta0=1.0, L=1.0)


@pytest.fixture
def coeffs1():
    return CoefficientField.constant(K=1e-5, D=1e-5)


@pytest.fixture
def spaces4(params1):
    mesh = build_unit_square_mesh(4)
    return build_spaces(mesh, BcSpec())


def make_reference_triangle_spaces():
    """A one-cell mesh on the unit right triangle, no constrained dofs."""
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cells = np.array([[0, 1, 2]], dtype=np.int64)
    labels = np.array([2], dtype=np.int64)
    for arr in (vertices, cells, labels):
        arr.setflags(write=False)
    mesh = Mesh(n=1, vertices=vertices, cells=cells, cell_labels=labels,
                h=float(np.sqrt(2.0)))
    return build_spaces(mesh, BcSpec(u="neumann", p="neumann", theta="neumann"))
