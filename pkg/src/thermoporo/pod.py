"""Proper orthogonal decomposition by the method of snapshots.

Snapshots are free-dof coefficient vectors of one field; closeness is
measured in the full H1 inner product, so the correlation matrix is built
through the field's Gram matrix and the resulting modes come out
Gram-orthonormal.  Modes live on the free dofs only, hence they vanish on
Dirichlet-constrained dofs by construction.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import mpmath as mp
import numpy as np
import scipy.sparse as sp

from .linalg import sym_eig
from .meshing import FIELDS

__all__ = [
    "PodError",
    "EmptyBasisError",
    "SnapshotSet",
    "FieldBasis",
    "ReducedBasis",
    "build_correlation",
    "compute_modes",
    "build_basis",
    "pod_spectrum_report",
    "export_spectrum_csv",
    "orthonormality_defect",
    "rank_floor",
    "DEFAULT_EIG_FLOOR",
]

DEFAULT_EIG_FLOOR = 1e-12

# Eigenvalue ratio below which double-precision eigenpairs are polished in
# extended precision before mode formation (see _refine_tail).
_REFINE_BELOW = 1e-6
_REFINE_DPS = 30

_BASIS_MAGIC = b"TPORPODB"
_BASIS_VERSION = 1


class PodError(Exception):
    """Base class for snapshot-compression failures."""


class EmptyBasisError(PodError):
    """Raised when no eigenvalue survives the relative floor."""


@dataclass(frozen=True)
class SnapshotSet:
    """Snapshot rows of one field plus the Gram matrix that scores them."""

    field_name: str
    snapshots: np.ndarray   # (n_snapshots, n_free)
    gram: sp.csr_matrix

    def __post_init__(self) -> None:
        if self.field_name not in FIELDS:
            raise ValueError(f"unknown field {self.field_name!r}")
        snaps = np.asarray(self.snapshots, dtype=np.float64)
        if snaps.ndim != 2 or snaps.shape[0] < 1:
            raise ValueError("snapshots must be a nonempty 2d array")
        if snaps.shape[1] != self.gram.shape[0]:
            raise ValueError(
                f"snapshot length {snaps.shape[1]} does not match the "
                f"Gram matrix size {self.gram.shape[0]}")
        snaps = snaps.copy()
        snaps.setflags(write=False)
        object.__setattr__(self, "snapshots", snaps)

    @property
    def n_snapshots(self) -> int:
        return self.snapshots.shape[0]

    @property
    def n_free(self) -> int:
        return self.snapshots.shape[1]


def build_correlation(snaps: SnapshotSet) -> np.ndarray:
    """Matrix of pairwise H1 inner products of the snapshots.

    Entry (n, m) is snapshot_n . Gram . snapshot_m.  The product is left
    unsymmetrized so callers can verify the roundoff asymmetry themselves;
    it sits many orders below the eigensolver's symmetry guard.
    """
    S = snaps.snapshots
    return S @ (snaps.gram @ S.T)


@dataclass(frozen=True)
class FieldBasis:
    """Retained modes and the full eigenvalue list for one field.

    ``modes`` columns are Gram-orthonormal; ``eigenvalues`` keeps the whole
    descending spectrum (clipped at zero) so spectra can be reported past
    the truncation point.
    """

    field_name: str
    modes: np.ndarray        # (n_free, r)
    eigenvalues: np.ndarray  # full spectrum, descending, >= 0

    def __post_init__(self) -> None:
        for name in ("modes", "eigenvalues"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    @property
    def n_free(self) -> int:
        return self.modes.shape[0]

    def truncated(self, r: int) -> "FieldBasis":
        if not 1 <= r <= self.r:
            raise ValueError(f"cannot truncate a rank-{self.r} basis to r={r}")
        return FieldBasis(self.field_name, self.modes[:, :r], self.eigenvalues)


def _mpf_from_longdouble(x) -> mp.mpf:
    hi = float(x)
    lo = float(x - np.longdouble(hi))
    return mp.mpf(hi) + mp.mpf(lo)


def _refine_tail(snaps: SnapshotSet, vectors: np.ndarray,
                 tail_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rayleigh-Ritz polish of small-eigenvalue pairs in extended precision.

    Dense symmetric eigensolvers carry an absolute eigenvalue error of order
    machine epsilon times the largest eigenvalue.  For eigenvalues many
    orders below the top that wrecks their relative accuracy, and with it
    the Gram-orthonormality of the corresponding modes.  Re-projecting the
    correlation form onto the span of the affected eigenvectors with 80-bit
    products, solving the small eigenproblem in software arithmetic, and
    forming the modes before dropping back to double precision restores the
    orthonormality certificate.  Returns the polished eigenvalues and the
    finished (unsigned) mode columns for ``tail_idx``.
    """
    V = vectors[:, tail_idx].astype(np.longdouble)
    S = snaps.snapshots.astype(np.longdouble)
    Y = S.T @ V
    H = Y.T @ (snaps.gram.astype(np.longdouble) @ Y)
    H = 0.5 * (H + H.T)
    k = H.shape[0]
    with mp.workdps(_REFINE_DPS):
        A = mp.matrix(k, k)
        for i in range(k):
            for j in range(k):
                A[i, j] = _mpf_from_longdouble(H[i, j])
        E, Q = mp.eigsy(A)
        order = sorted(range(k), key=lambda m: float(E[m]), reverse=True)
        nus = np.array([float(E[m]) for m in order])
        rot = np.array([[float(Q[i, m]) for m in order] for i in range(k)])
    good = nus > 0.0
    modes = np.empty((snaps.n_free, k))
    scale = np.where(good, np.abs(nus), 1.0) ** -0.5
    polished = Y @ (rot.astype(np.longdouble) * scale)
    modes[:, good] = polished[:, good].astype(np.float64)
    if not good.all():
        # A polished eigenvalue collapsed to the noise level; keep the plain
        # double-precision construction for those columns.
        raw_vals, raw_modes = _plain_modes(snaps, vectors, tail_idx[~good])
        nus[~good] = raw_vals
        modes[:, ~good] = raw_modes
    return nus, modes


def _plain_modes(snaps: SnapshotSet, vectors: np.ndarray, idx: np.ndarray):
    """Double-precision construction with Rayleigh-quotient eigenvalues."""
    Y = snaps.snapshots.T @ vectors[:, idx]
    vals = np.einsum("ij,ij->j", Y, snaps.gram @ Y)
    return vals, Y * np.abs(np.where(vals == 0.0, 1.0, vals)) ** -0.5


def compute_modes(snaps: SnapshotSet, C: np.ndarray,
                  r_max: int | None = None,
                  eig_floor: float = DEFAULT_EIG_FLOOR) -> FieldBasis:
    """Eigendecompose the correlation matrix and assemble the modes.

    Mode n is nu_n^{-1/2} * sum_beta [v_n]_beta * snapshot_beta.  Modes whose
    eigenvalue falls at or below eig_floor relative to the largest are
    dropped before r_max applies; each retained mode's sign is fixed so its
    largest-magnitude coefficient is positive.  ``C`` must be the correlation
    matrix of ``snaps``: eigenpairs whose eigenvalue sits far below the top
    of the spectrum (yet above the default floor) are re-derived from the
    snapshots in extended precision, which keeps their modes orthonormal.
    """
    if eig_floor < 0.0:
        raise ValueError(f"eig_floor must be >= 0, got {eig_floor}")
    values, vectors = sym_eig(C)
    nu0 = values[0]
    if not nu0 > 0.0:
        raise EmptyBasisError(
            f"{snaps.field_name}: largest snapshot eigenvalue is {nu0:.3e}; "
            "nothing to retain")
    keep = np.flatnonzero(values / nu0 > eig_floor)
    if keep.size == 0:
        raise EmptyBasisError(
            f"{snaps.field_name}: no eigenvalue above the relative floor "
            f"{eig_floor:.3e}")
    r = keep.size if r_max is None else min(r_max, keep.size)
    idx = keep[:r]
    ratios = values[idx] / nu0
    head = idx[ratios > _REFINE_BELOW]
    tail = idx[(ratios <= _REFINE_BELOW) & (ratios > DEFAULT_EIG_FLOOR)]
    noise = idx[ratios <= DEFAULT_EIG_FLOOR]

    spectrum = values.copy()
    columns = [snaps.snapshots.T @ (vectors[:, head] * values[head] ** -0.5)]
    if tail.size:
        tail_vals, tail_modes = _refine_tail(snaps, vectors, tail)
        spectrum[tail] = tail_vals
        columns.append(tail_modes)
    if noise.size:
        # Below the floor the double-precision eigenvalues are rounding
        # noise; polishing cannot rescue them, so when a caller disables the
        # floor these columns keep the classic construction, defects and all.
        columns.append(snaps.snapshots.T
                       @ (vectors[:, noise] * values[noise] ** -0.5))
    modes = np.hstack(columns)
    flip = np.sign(modes[np.argmax(np.abs(modes), axis=0),
                         np.arange(modes.shape[1])])
    flip[flip == 0.0] = 1.0
    modes *= flip
    return FieldBasis(snaps.field_name, modes, np.maximum(spectrum, 0.0))


class ReducedBasis:
    """Per-field mode matrices bundled for the reduced-order solvers."""

    def __init__(self, bases):
        by_name: dict[str, FieldBasis] = {}
        for basis in bases:
            if basis.field_name in by_name:
                raise ValueError(f"duplicate basis for {basis.field_name!r}")
            by_name[basis.field_name] = basis
        if not by_name:
            raise ValueError("a reduced basis needs at least one field")
        self._bases = by_name

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(self._bases)

    def field(self, name: str) -> FieldBasis:
        return self._bases[name]

    def r(self, name: str) -> int:
        return self._bases[name].r

    def truncated(self, r) -> "ReducedBasis":
        """Same basis with each field cut to r modes (int or per-field dict)."""
        def cut(name):
            return r[name] if isinstance(r, dict) else r
        return ReducedBasis([self._bases[name].truncated(cut(name))
                             for name in self._bases])

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(_BASIS_MAGIC)
            fh.write(struct.pack("<II", _BASIS_VERSION, len(self._bases)))
            for basis in self._bases.values():
                name = basis.field_name.encode()
                fh.write(struct.pack("<I", len(name)))
                fh.write(name)
                fh.write(struct.pack("<QQQ", basis.n_free, basis.r,
                                     basis.eigenvalues.size))
                fh.write(np.ascontiguousarray(basis.modes).tobytes())
                fh.write(np.ascontiguousarray(basis.eigenvalues).tobytes())

    @classmethod
    def load(cls, path: str) -> "ReducedBasis":
        with open(path, "rb") as fh:
            if fh.read(8) != _BASIS_MAGIC:
                raise ValueError(f"{path}: not a reduced-basis file")
            version, n_fields = struct.unpack("<II", fh.read(8))
            if version != _BASIS_VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            bases = []
            for _ in range(n_fields):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode()
                n_free, r, n_eigs = struct.unpack("<QQQ", fh.read(24))
                modes = np.frombuffer(fh.read(8 * n_free * r),
                                      dtype=np.float64).reshape(n_free, r)
                eigs = np.frombuffer(fh.read(8 * n_eigs), dtype=np.float64)
                bases.append(FieldBasis(name, modes.copy(), eigs.copy()))
        return cls(bases)


def build_basis(snapshot_sets, r_max=None,
                eig_floor: float = DEFAULT_EIG_FLOOR) -> ReducedBasis:
    """Run the full compression for several fields at once.

    ``r_max`` may be a single cap or a per-field dict; None keeps every mode
    that clears the floor.
    """
    bases = []
    for snaps in snapshot_sets:
        cap = r_max.get(snaps.field_name) if isinstance(r_max, dict) else r_max
        C = build_correlation(snaps)
        bases.append(compute_modes(snaps, C, r_max=cap, eig_floor=eig_floor))
    return ReducedBasis(bases)


def pod_spectrum_report(basis: ReducedBasis) -> dict[str, np.ndarray]:
    """Normalized eigenvalues nu_k / nu_0 per field, full spectrum."""
    out = {}
    for name in basis.field_names:
        eigs = basis.field(name).eigenvalues
        out[name] = eigs / eigs[0]
    return out


def export_spectrum_csv(basis: ReducedBasis, path: str) -> None:
    spectra = pod_spectrum_report(basis)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "k", "nu_normalized"])
        for name, values in spectra.items():
            for k, value in enumerate(values):
                w.writerow([name, k, f"{value:.17g}"])


def rank_floor(n_snapshots: int) -> float:
    """Relative eigenvalue threshold for the numerical rank of a snapshot
    set.

    The usual dense-rank tolerance is N times machine epsilon on singular
    values; Gram eigenvalues are squared singular values of snapshots
    already normalized by nu_0, so the same N*eps cutoff applied to
    nu_k/nu_0 counts exactly the directions that stand above round-off.
    """
    if n_snapshots < 1:
        raise ValueError(f"need at least one snapshot, got {n_snapshots}")
    return n_snapshots * float(np.finfo(np.float64).eps)


def orthonormality_defect(modes: np.ndarray, gram: sp.csr_matrix) -> float:
    """Max absolute deviation of modes^T . Gram . modes from the identity."""
    product = modes.T @ (gram @ modes)
    return float(np.abs(product - np.eye(modes.shape[1])).max())
