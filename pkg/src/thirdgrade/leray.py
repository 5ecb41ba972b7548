"""Discrete Leray projection, Stokes operator and Stokes eigenbasis."""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Grid, VelocityField, as_data, grid_operators, inner

DENSE_EIG_LIMIT = 3000


@functools.lru_cache(maxsize=16)
def _poisson_factor(grid: Grid):
    """LU factor of D D^T with the first cell pinned (Neumann problem)."""
    ops = grid_operators(grid)
    lap = (ops.div @ ops.div.T).tocsc()
    return spla.splu(lap[1:, 1:].tocsc())


def pressure_potential(w, grid: Grid | None = None) -> np.ndarray:
    """phi with D G phi = D w, phi = 0 in the first cell."""
    g = w.grid if isinstance(w, VelocityField) else grid
    ops = grid_operators(g)
    rhs = ops.div @ as_data(w)
    phi = np.zeros(g.n_cells)
    phi[1:] = -_poisson_factor(g).solve(rhs[1:])
    return phi


def project(w, grid: Grid | None = None) -> VelocityField:
    """Divergence-free part of ``w``: w - G phi."""
    g = w.grid if isinstance(w, VelocityField) else grid
    ops = grid_operators(g)
    phi = pressure_potential(w, g)
    out = as_data(w) - ops.grad @ phi
    res = np.linalg.norm(ops.div @ out)
    scale = np.linalg.norm(ops.div @ as_data(w)) + np.linalg.norm(as_data(w)) / min(g.hx, g.hy)
    if not np.isfinite(res) or res > 1e-8 * max(scale, 1e-300):
        raise RuntimeError(f"Poisson solve inaccurate: divergence residual {res:.3e}")
    return VelocityField(g, out)


def gradient_field(grid: Grid, phi: np.ndarray) -> VelocityField:
    """Discrete gradient of a cell-centred scalar onto interior faces."""
    return VelocityField(grid, grid_operators(grid).grad @ np.asarray(phi, dtype=float).ravel())


def laplacian(v: VelocityField) -> VelocityField:
    return VelocityField(v.grid, grid_operators(v.grid).lap @ v.data)


def stokes_apply(v: VelocityField) -> VelocityField:
    """Stokes operator -P(L v)."""
    return project(-laplacian(v))


@functools.lru_cache(maxsize=16)
def _stokes_factor(grid: Grid):
    ops = grid_operators(grid)
    C = ops.curl_psi
    return spla.splu((C.T @ (-ops.lap) @ C).tocsc())


def stokes_solve(r: VelocityField) -> VelocityField:
    """x divergence-free with A x = P r."""
    C = grid_operators(r.grid).curl_psi
    psi = _stokes_factor(r.grid).solve(C.T @ r.data)
    return VelocityField(r.grid, C @ psi)


def dual_norm(r: VelocityField) -> float:
    """sup over divergence-free w of (r, w) / ||grad w||_2."""
    return float(np.sqrt(max(inner(stokes_solve(r), r), 0.0)))


@dataclass(frozen=True, eq=False)
class StokesEigenbasis:
    """Lowest ``m`` eigenpairs of the discrete Stokes operator.

    ``matrix`` holds the eigenfields row-wise (m x n_dof), orthonormal in the
    discrete inner product.
    """

    grid: Grid
    m: int
    eigenvalues: np.ndarray
    matrix: np.ndarray

    @property
    def eigenfields(self) -> list[VelocityField]:
        return [VelocityField(self.grid, row) for row in self.matrix]

    def field(self, i: int) -> VelocityField:
        return VelocityField(self.grid, self.matrix[i])

    @property
    def lam_hat(self) -> float:
        return float(self.eigenvalues[0])

    def truncate(self, m: int) -> "StokesEigenbasis":
        if m > self.m:
            raise ValueError(f"basis holds only {self.m} modes")
        return StokesEigenbasis(self.grid, m, self.eigenvalues[:m].copy(), self.matrix[:m].copy())


def divfree_dimension(grid: Grid) -> int:
    return (grid.nx - 1) * (grid.ny - 1)


def stokes_eigs(grid: Grid, m: int) -> StokesEigenbasis:
    """Solve the Stokes eigenproblem in streamfunction coordinates.

    The velocity is written v = C psi with C the discrete curl; C spans the
    discrete divergence-free space exactly, so the projected Laplacian becomes
    the pencil (C^T (-L) C, C^T C).
    """
    dim = divfree_dimension(grid)
    if m < 1:
        raise ValueError("need at least one mode")
    if m > 0.2 * dim:
        raise ValueError(f"m={m} exceeds 0.2 * dim(divergence-free space) = {0.2 * dim:.1f}")
    ops = grid_operators(grid)
    C = ops.curl_psi
    stiff = (C.T @ (-ops.lap) @ C).tocsc()
    mass = (C.T @ C).tocsc()
    if dim <= DENSE_EIG_LIMIT:
        vals, vecs = sla.eigh(stiff.toarray(), mass.toarray(), subset_by_index=[0, m - 1])
    else:
        v0 = np.ones(dim)
        vals, vecs = spla.eigsh(stiff, k=m, M=mass, sigma=0.0, which="LM", v0=v0, tol=0.0, maxiter=10000)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    fields = (C @ vecs).T
    area = grid.cell_area
    for i in range(m):
        fields[i] /= np.sqrt(area * fields[i] @ fields[i])
        j = int(np.argmax(np.abs(fields[i])))
        if fields[i, j] < 0:
            fields[i] = -fields[i]
    return StokesEigenbasis(grid, m, np.asarray(vals, dtype=float), fields)


def galerkin_project(v: VelocityField, basis: StokesEigenbasis) -> np.ndarray:
    """Coefficients c_i = (v, e_i)."""
    if v.grid != basis.grid:
        raise ValueError("field and basis are on different grids")
    return basis.grid.cell_area * (basis.matrix @ v.data)


def reconstruct(coeffs: np.ndarray, basis: StokesEigenbasis) -> VelocityField:
    coeffs = np.asarray(coeffs, dtype=float)
    return VelocityField(basis.grid, coeffs @ basis.matrix[: coeffs.shape[-1]])


def eigen_residual(basis: StokesEigenbasis) -> np.ndarray:
    """||A e_i - mu_i e_i|| / (mu_i ||e_i||) for every mode."""
    out = []
    for i, mu in enumerate(basis.eigenvalues):
        e = basis.field(i)
        r = stokes_apply(e) - mu * e
        out.append(np.sqrt(inner(r, r)) / mu)
    return np.array(out)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

def basis_key(grid: Grid, m: int) -> str:
    return hashlib.sha256(f"{grid.key()}|m={m}".encode()).hexdigest()[:16]


def save_basis(directory: str | Path, basis: StokesEigenbasis) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"stokes_{basis_key(basis.grid, basis.m)}"
    header = {"grid": basis.grid.to_dict(), "m": basis.m,
              "eigenvalues": basis.eigenvalues.tolist(), "dtype": "<f8"}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    basis.matrix.astype("<f8").tofile(stem.with_suffix(".bin"))
    return stem


def load_or_compute_basis(grid: Grid, m: int, directory: str | Path | None = None) -> StokesEigenbasis:
    if directory is None:
        return stokes_eigs(grid, m)
    stem = Path(directory) / f"stokes_{basis_key(grid, m)}"
    if stem.with_suffix(".json").exists() and stem.with_suffix(".bin").exists():
        header = json.loads(stem.with_suffix(".json").read_text())
        mat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape(m, grid.n_dof)
        return StokesEigenbasis(grid, m, np.array(header["eigenvalues"]), mat)
    basis = stokes_eigs(grid, m)
    save_basis(directory, basis)
    return basis


def divfree_matrix(grid: Grid) -> sp.csr_matrix:
    """The discrete curl matrix C: interior corners -> state."""
    return grid_operators(grid).curl_psi
