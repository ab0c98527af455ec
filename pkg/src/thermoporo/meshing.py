"""Structured triangulations of the unit square and P1 function spaces.

The solvers in this package operate on a fixed family of meshes: the unit
square divided into n x n congruent squares, each split into two triangles
along the bottom-left to top-right diagonal.  Vertices and cells are numbered
row-major, bottom row first, so the layout is reproducible across runs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

FIELDS = ("u", "p", "theta")

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


@dataclass(frozen=True)
class RegionSpec:
    """Horizontal band ``y_lo < y < y_hi`` labeled as subdomain 1.

    Cells outside the band are labeled 2.  Both bounds must be integer
    multiples of the grid spacing 1/n so the band is resolved exactly.
    """

    y_lo: float
    y_hi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.y_lo < self.y_hi <= 1.0:
            raise ValueError(f"band ({self.y_lo}, {self.y_hi}) not inside (0, 1)")


@dataclass(frozen=True)
class Mesh:
    """Immutable triangulation of the unit square.

    Attributes
    ----------
    n : squares per side.
    vertices : (nv, 2) float64, row-major grid coordinates.
    cells : (nc, 3) int, counterclockwise vertex triples.
    cell_labels : (nc,) int, subdomain label 1 or 2 per cell.
    h : mesh size, the maximum edge length sqrt(2)/n.
    """

    n: int
    vertices: np.ndarray
    cells: np.ndarray
    cell_labels: np.ndarray
    h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def cell_areas(self) -> np.ndarray:
        """Signed areas of all cells; positive for counterclockwise cells."""
        p0 = self.vertices[self.cells[:, 0]]
        p1 = self.vertices[self.cells[:, 1]]
        p2 = self.vertices[self.cells[:, 2]]
        return 0.5 * (
            (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
            - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        )

    def boundary_vertices(self) -> np.ndarray:
        """Indices of vertices on the boundary of the unit square."""
        x = self.vertices[:, 0]
        y = self.vertices[:, 1]
        on = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
        return np.nonzero(on)[0]

    def export_csv(self, directory: str) -> None:
        """Write vertices.csv (id,x,y) and cells.csv (id,v0,v1,v2,label)."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "vertices.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y"])
            for i, (x, y) in enumerate(self.vertices):
                w.writerow([i, f"{x:.17g}", f"{y:.17g}"])
        with open(os.path.join(directory, "cells.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "v0", "v1", "v2", "label"])
            for i, (c, lab) in enumerate(zip(self.cells, self.cell_labels)):
                w.writerow([i, c[0], c[1], c[2], lab])


def build_unit_square_mesh(n: int, region: RegionSpec | None = None) -> Mesh:
    """Triangulate the unit square into 2*n^2 cells.

    Parameters
    ----------
    n : number of squares per side, n >= 1.
    region : optional horizontal band labeled as subdomain 1; its bounds
        must be integer multiples of 1/n.

    Returns
    -------
    Mesh with (n+1)^2 vertices and 2*n^2 counterclockwise cells.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if region is not None:
        for bound in (region.y_lo, region.y_hi):
            k = bound * n
            if abs(k - round(k)) > 1e-9:
                raise ValueError(
                    f"band bound {bound} is not a multiple of 1/{n}; "
                    "the band must align with mesh lines"
                )

    # Row-major vertex grid: vertex (ix, iy) -> iy*(n+1) + ix.
    coords_1d = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords_1d, coords_1d)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    # Each square (ix, iy) splits along its bl->tr diagonal into
    # (bl, br, tr) and (bl, tr, tl); both are counterclockwise.
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    ix = ix.ravel()
    iy = iy.ravel()
    bl = iy * (n + 1) + ix
    br = bl + 1
    tl = bl + (n + 1)
    tr = tl + 1
    lower = np.column_stack([bl, br, tr])
    upper = np.column_stack([bl, tr, tl])
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    if region is None:
        labels = np.full(cells.shape[0], 2, dtype=np.int64)
    else:
        centroids_y = vertices[cells, 1].mean(axis=1)
        in_band = (centroids_y > region.y_lo) & (centroids_y < region.y_hi)
        labels = np.where(in_band, 1, 2).astype(np.int64)

    for arr in (vertices, cells, labels):
        arr.setflags(write=False)
    return Mesh(n=n, vertices=vertices, cells=cells, cell_labels=labels,
                h=float(np.sqrt(2.0) / n))


@dataclass(frozen=True)
class BcSpec:
    """Boundary condition kind per field: "dirichlet" or "neumann".

    Dirichlet means the homogeneous essential condition on the whole
    boundary, imposed by restricting the system to interior dofs.
    """

    u: str = DIRICHLET
    p: str = DIRICHLET
    theta: str = DIRICHLET

    def __post_init__(self) -> None:
        for field in FIELDS:
            kind = getattr(self, field)
            if kind not in (DIRICHLET, NEUMANN):
                raise ValueError(f"bc for {field} must be dirichlet|neumann, got {kind!r}")


@dataclass(frozen=True)
class FieldSpace:
    """Dof bookkeeping for one P1 field on a mesh.

    ``free`` lists global dofs kept in the linear systems (ascending),
    ``constrained`` the Dirichlet dofs eliminated by restriction, and
    ``free_index`` maps a global dof to its position in ``free`` (-1 if
    constrained).
    """

    name: str
    components: int
    n_dofs: int
    free: np.ndarray
    constrained: np.ndarray
    free_index: np.ndarray

    @property
    def n_free(self) -> int:
        return self.free.shape[0]


@dataclass(frozen=True)
class SpaceSet:
    """P1 spaces for displacement (vector) and pressure/temperature (scalar)."""

    mesh: Mesh
    bc: BcSpec
    u: FieldSpace
    p: FieldSpace
    theta: FieldSpace

    def field(self, name: str) -> FieldSpace:
        if name not in FIELDS:
            raise KeyError(f"unknown field {name!r}")
        return getattr(self, name)


def _build_field_space(mesh: Mesh, name: str, components: int, kind: str) -> FieldSpace:
    nv = mesh.n_vertices
    n_dofs = components * nv
    if kind == NEUMANN:
        constrained = np.empty(0, dtype=np.int64)
    else:
        bnd = mesh.boundary_vertices()
        if components == 1:
            constrained = bnd.astype(np.int64)
        else:
            # Vector dofs interleave components: dof(v, c) = components*v + c.
            constrained = np.sort(
                np.concatenate([components * bnd + c for c in range(components)])
            )
    mask = np.ones(n_dofs, dtype=bool)
    mask[constrained] = False
    free = np.nonzero(mask)[0].astype(np.int64)
    free_index = np.full(n_dofs, -1, dtype=np.int64)
    free_index[free] = np.arange(free.shape[0])
    for arr in (free, constrained, free_index):
        arr.setflags(write=False)
    return FieldSpace(name=name, components=components, n_dofs=n_dofs,
                      free=free, constrained=constrained, free_index=free_index)


def build_spaces(mesh: Mesh, bc: BcSpec) -> SpaceSet:
    """Construct the three P1 field spaces with the given boundary conditions."""
    return SpaceSet(
        mesh=mesh,
        bc=bc,
        u=_build_field_space(mesh, "u", 2, bc.u),
        p=_build_field_space(mesh, "p", 1, bc.p),
        theta=_build_field_space(mesh, "theta", 1, bc.theta),
    )
