"""Finite-element solvers and POD reduced-order models for linear
thermo-poroelasticity on the unit square.

The package provides a monolithic and a fixed-stress iterative backward-Euler
solver for the coupled displacement/pressure/temperature system, a
method-of-snapshots POD in the full H1 inner product, Galerkin reduced-order
counterparts of both solvers (including affine-parametric operator families),
and experiment drivers with CSV reporting behind a command line interface.
"""

__version__ = "0.1.0"

from .meshing import (  # noqa: F401
    BcSpec,
    DIRICHLET,
    FIELDS,
    Mesh,
    NEUMANN,
    RegionSpec,
    SpaceSet,
    build_spaces,
    build_unit_square_mesh,
)
from .linalg import (  # noqa: F401
    AsymmetricMatrixError,
    Factorization,
    LinalgError,
    SingularMatrixError,
    condition_number_2,
    factorize,
    finalize_csr,
    solve,
    sym_eig,
)
from .assembly import (  # noqa: F401
    CoefficientField,
    FormId,
    LoadAssembler,
    OperatorSet,
    PhysicalParams,
    assemble_form,
    assemble_load,
    build_operator_set,
)
