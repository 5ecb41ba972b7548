"""Staggered (MAC) grid geometry, discrete norms and the symmetric gradient.

The velocity state is stored as a flat vector of interior face values,
``[u_int, v_int]``.  ``u`` lives on x-faces (shape ``(nx+1, ny)``), ``v`` on
y-faces (shape ``(nx, ny+1)``).  Normal boundary values are zero and the
tangential no-slip condition is imposed by ghost reflection (ghost = -interior).
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

ArrayLike = Union[np.ndarray, "VelocityField"]


@dataclass(frozen=True)
class Grid:
    """Rectangle [0, Lx] x [0, Ly] split into nx x ny cells."""

    Lx: float
    Ly: float
    nx: int
    ny: int
    bc: str = "no-slip"

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def n_u(self) -> int:
        return (self.nx - 1) * self.ny

    @property
    def n_v(self) -> int:
        return self.nx * (self.ny - 1)

    @property
    def n_dof(self) -> int:
        return self.n_u + self.n_v

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @functools.cached_property
    def x_faces(self) -> np.ndarray:
        return np.arange(self.nx + 1) * self.hx

    @functools.cached_property
    def y_faces(self) -> np.ndarray:
        return np.arange(self.ny + 1) * self.hy

    @functools.cached_property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.hx

    @functools.cached_property
    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.hy

    def key(self) -> str:
        return f"{self.Lx!r}x{self.Ly!r}:{self.nx}x{self.ny}:{self.bc}"

    def to_dict(self) -> dict:
        return {"Lx": self.Lx, "Ly": self.Ly, "nx": self.nx, "ny": self.ny,
                "hx": self.hx, "hy": self.hy, "bc": self.bc}


def build_grid(Lx: float, Ly: float, nx: int, ny: int) -> Grid:
    if not (Lx > 0 and Ly > 0):
        raise ValueError(f"domain sizes must be positive, got Lx={Lx}, Ly={Ly}")
    if int(nx) != nx or int(ny) != ny:
        raise ValueError("cell counts must be integers")
    if nx < 4 or ny < 4:
        raise ValueError(f"grid too coarse: nx={nx}, ny={ny} (need >= 4)")
    return Grid(float(Lx), float(Ly), int(nx), int(ny))


# ---------------------------------------------------------------------------
# 1D building blocks
# ---------------------------------------------------------------------------

def _embed(n_full: int) -> sp.csr_matrix:
    """Interior (n_full - 2) -> full n_full, zero at both ends."""
    rows = np.arange(1, n_full - 1)
    return sp.csr_matrix((np.ones(n_full - 2), (rows, rows - 1)), shape=(n_full, n_full - 2))


def _forward_diff(n: int, h: float) -> sp.csr_matrix:
    """(n) x (n+1): face values to cell differences."""
    return sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="csr") / h


def _average(n: int) -> sp.csr_matrix:
    """(n) x (n+1): mean of neighbouring nodes."""
    return sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n)], [0, 1], shape=(n, n + 1), format="csr")


def _ghost_diff(n: int, h: float) -> sp.csr_matrix:
    """(n+1) x n: cell-centred values to node differences with odd ghosts."""
    m = sp.lil_matrix((n + 1, n))
    for j in range(1, n):
        m[j, j] = 1.0
        m[j, j - 1] = -1.0
    m[0, 0] = 2.0
    m[n, n - 1] = -2.0
    return m.tocsr() / h


def _second_diff(n: int, h: float, ghost: bool) -> sp.csr_matrix:
    main = -2.0 * np.ones(n)
    if ghost:
        main[0] = main[-1] = -3.0
    return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


def _centered(n: int, h: float, ghost: bool) -> sp.csr_matrix:
    m = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], format="lil")
    if ghost:
        m[0, 0] = 1.0
        m[n - 1, n - 1] = -1.0
    return m.tocsr() / (2.0 * h)


# ---------------------------------------------------------------------------
# Per-grid operator bundle
# ---------------------------------------------------------------------------

@dataclass
class GridOperators:
    grid: Grid
    ext_u: sp.csr_matrix          # state -> full u, flat (nx+1)*ny
    ext_v: sp.csr_matrix          # state -> full v, flat nx*(ny+1)
    div: sp.csr_matrix            # state -> cells
    grad: sp.csr_matrix           # cells -> state, equals -div.T
    lap: sp.csr_matrix            # state -> state, 5-point with ghosts
    a11: sp.csr_matrix            # state -> cells
    a12: sp.csr_matrix
    a22: sp.csr_matrix
    du_dx: sp.csr_matrix          # state -> cells (centre gradient)
    du_dy: sp.csr_matrix
    dv_dx: sp.csr_matrix
    dv_dy: sp.csr_matrix
    u_center: sp.csr_matrix       # state -> cells
    v_center: sp.csr_matrix
    curl_psi: sp.csr_matrix       # interior corners -> state
    vorticity: sp.csr_matrix      # state -> interior corners
    adv_ax: sp.csr_matrix         # state -> state, x-advecting velocity at each dof
    adv_ay: sp.csr_matrix
    adv_dx: sp.csr_matrix         # state -> state, centred x-derivative at each dof
    adv_dy: sp.csr_matrix
    extra: dict = field(default_factory=dict)


@functools.lru_cache(maxsize=16)
def grid_operators(grid: Grid) -> GridOperators:
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    n_u, n_v = grid.n_u, grid.n_v
    I = sp.identity

    # state splitting
    pick_u = sp.hstack([I(n_u), sp.csr_matrix((n_u, n_v))]).tocsr()
    pick_v = sp.hstack([sp.csr_matrix((n_v, n_u)), I(n_v)]).tocsr()

    ext_u = (sp.kron(_embed(nx + 1), I(ny)) @ pick_u).tocsr()
    ext_v = (sp.kron(I(nx), _embed(ny + 1)) @ pick_v).tocsr()

    dx_cells = sp.kron(_forward_diff(nx, hx), I(ny))
    dy_cells = sp.kron(I(nx), _forward_diff(ny, hy))
    du_dx = (dx_cells @ ext_u).tocsr()
    dv_dy = (dy_cells @ ext_v).tocsr()
    div = (du_dx + dv_dy).tocsr()
    grad = (-div.T).tocsr()

    lap_u = sp.kron(_second_diff(nx - 1, hx, False), I(ny)) + sp.kron(I(nx - 1), _second_diff(ny, hy, True))
    lap_v = sp.kron(_second_diff(nx, hx, True), I(ny - 1)) + sp.kron(I(nx), _second_diff(ny - 1, hy, False))
    lap = sp.block_diag([lap_u, lap_v], format="csr")

    # corner derivatives, (nx+1)*(ny+1) nodes
    du_dy_corner = sp.kron(I(nx + 1), _ghost_diff(ny, hy)) @ ext_u
    dv_dx_corner = sp.kron(_ghost_diff(nx, hx), I(ny + 1)) @ ext_v
    corner_to_center = sp.kron(_average(nx), _average(ny))
    du_dy = (corner_to_center @ du_dy_corner).tocsr()
    dv_dx = (corner_to_center @ dv_dx_corner).tocsr()

    a11 = (2.0 * du_dx).tocsr()
    a22 = (2.0 * dv_dy).tocsr()
    a12 = (du_dy + dv_dx).tocsr()

    u_center = (sp.kron(_average(nx), I(ny)) @ ext_u).tocsr()
    v_center = (sp.kron(I(nx), _average(ny)) @ ext_v).tocsr()

    # streamfunction on interior corners
    psi_full = sp.kron(_embed(nx + 1), _embed(ny + 1))
    u_from_psi = sp.kron(I(nx + 1), _forward_diff(ny, hy)) @ psi_full
    v_from_psi = -sp.kron(_forward_diff(nx, hx), I(ny + 1)) @ psi_full
    restrict_u = sp.kron(_embed(nx + 1), I(ny)).T
    restrict_v = sp.kron(I(nx), _embed(ny + 1)).T
    curl_psi = sp.vstack([restrict_u @ u_from_psi, restrict_v @ v_from_psi]).tocsr()
    vorticity = (psi_full.T @ (dv_dx_corner - du_dy_corner)).tocsr()

    # advection stencils (skew-symmetrised in operators)
    face_avg_x = sp.diags([0.5 * np.ones(nx - 1), 0.5 * np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx))
    face_avg_y = sp.diags([0.5 * np.ones(ny - 1), 0.5 * np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny))
    v_at_u = sp.kron(face_avg_x, _average(ny)) @ ext_v
    u_at_v = sp.kron(_average(nx), face_avg_y) @ ext_u
    adv_ax = sp.vstack([pick_u, u_at_v]).tocsr()
    adv_ay = sp.vstack([v_at_u, pick_v]).tocsr()
    adv_dx = sp.block_diag([sp.kron(_centered(nx - 1, hx, False), I(ny)),
                            sp.kron(_centered(nx, hx, True), I(ny - 1))], format="csr")
    adv_dy = sp.block_diag([sp.kron(I(nx - 1), _centered(ny, hy, True)),
                            sp.kron(I(nx), _centered(ny - 1, hy, False))], format="csr")

    return GridOperators(
        grid=grid, ext_u=ext_u, ext_v=ext_v, div=div, grad=grad, lap=lap,
        a11=a11, a12=a12, a22=a22, du_dx=du_dx, du_dy=du_dy, dv_dx=dv_dx, dv_dy=dv_dy,
        u_center=u_center, v_center=v_center, curl_psi=curl_psi, vorticity=vorticity,
        adv_ax=adv_ax, adv_ay=adv_ay, adv_dx=adv_dx, adv_dy=adv_dy,
    )


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VelocityField:
    """Interior face values of a velocity field on ``grid``.

    The type does not enforce incompressibility; use ``leray.project`` to
    obtain a divergence-free field.
    """

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.shape != (self.grid.n_dof,):
            raise ValueError(f"expected {self.grid.n_dof} dofs, got shape {arr.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(grid, np.zeros(grid.n_dof))

    @classmethod
    def from_interior(cls, grid: Grid, u_int: np.ndarray, v_int: np.ndarray) -> "VelocityField":
        u_int = np.asarray(u_int, dtype=float).reshape(grid.nx - 1, grid.ny)
        v_int = np.asarray(v_int, dtype=float).reshape(grid.nx, grid.ny - 1)
        return cls(grid, np.concatenate([u_int.ravel(), v_int.ravel()]))

    @classmethod
    def from_functions(cls, grid: Grid, fu, fv) -> "VelocityField":
        """Sample callables ``fu(x, y)``, ``fv(x, y)`` at interior face midpoints."""
        xu, yu = np.meshgrid(grid.x_faces[1:-1], grid.y_centers, indexing="ij")
        xv, yv = np.meshgrid(grid.x_centers, grid.y_faces[1:-1], indexing="ij")
        return cls.from_interior(grid, fu(xu, yu), fv(xv, yv))

    @property
    def u(self) -> np.ndarray:
        """x-velocity on all x-faces, shape (nx+1, ny)."""
        return (grid_operators(self.grid).ext_u @ self.data).reshape(self.grid.nx + 1, self.grid.ny)

    @property
    def v(self) -> np.ndarray:
        """y-velocity on all y-faces, shape (nx, ny+1)."""
        return (grid_operators(self.grid).ext_v @ self.data).reshape(self.grid.nx, self.grid.ny + 1)

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, VelocityField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.data
        return np.asarray(other)

    def __add__(self, other) -> "VelocityField":
        return VelocityField(self.grid, self.data + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other) -> "VelocityField":
        return VelocityField(self.grid, self.data - self._coerce(other))

    def __rsub__(self, other) -> "VelocityField":
        return VelocityField(self.grid, self._coerce(other) - self.data)

    def __mul__(self, c: float) -> "VelocityField":
        return VelocityField(self.grid, self.data * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "VelocityField":
        return VelocityField(self.grid, self.data / float(c))

    def __neg__(self) -> "VelocityField":
        return VelocityField(self.grid, -self.data)

    def __repr__(self) -> str:
        return f"VelocityField(nx={self.grid.nx}, ny={self.grid.ny}, L2={l2_norm(self):.6g})"


@dataclass(frozen=True)
class TensorField:
    """Cell-centred symmetric tensor (a11, a12, a22), each of shape (nx, ny)."""

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray

    def frob_sq(self) -> np.ndarray:
        return self.a11**2 + 2.0 * self.a12**2 + self.a22**2

    def __add__(self, other: "TensorField") -> "TensorField":
        return TensorField(self.a11 + other.a11, self.a12 + other.a12, self.a22 + other.a22)

    def __sub__(self, other: "TensorField") -> "TensorField":
        return TensorField(self.a11 - other.a11, self.a12 - other.a12, self.a22 - other.a22)


def as_data(w: ArrayLike) -> np.ndarray:
    return w.data if isinstance(w, VelocityField) else np.asarray(w, dtype=float)


def sym_gradient(v: VelocityField) -> TensorField:
    """A(v) = grad v + grad v^T at cell centres.

    Diagonal entries use the face differences bracketing each cell; the
    off-diagonal entry is the mean of its four corner values.
    """
    ops = grid_operators(v.grid)
    shape = (v.grid.nx, v.grid.ny)
    return TensorField((ops.a11 @ v.data).reshape(shape),
                       (ops.a12 @ v.data).reshape(shape),
                       (ops.a22 @ v.data).reshape(shape))


def inner(a: VelocityField, b: VelocityField) -> float:
    """Discrete L2 inner product, h_x h_y times the dof-wise dot product."""
    return a.grid.cell_area * float(np.dot(a.data, b.data))


def l2_norm(v: VelocityField) -> float:
    return float(np.sqrt(inner(v, v)))


def sym_gradient_norm(v: VelocityField, p: float = 2) -> float:
    """||A(v)||_p with the Frobenius norm pointwise."""
    frob = sym_gradient(v).frob_sq()
    return float((v.grid.cell_area * np.sum(frob ** (p / 2.0))) ** (1.0 / p))


def center_gradient(v: VelocityField) -> np.ndarray:
    """Cell-centred velocity gradient, shape (4, nx*ny): du/dx, du/dy, dv/dx, dv/dy."""
    ops = grid_operators(v.grid)
    return np.vstack([ops.du_dx @ v.data, ops.du_dy @ v.data, ops.dv_dx @ v.data, ops.dv_dy @ v.data])


def center_values(v: VelocityField) -> np.ndarray:
    ops = grid_operators(v.grid)
    return np.vstack([ops.u_center @ v.data, ops.v_center @ v.data])


def dirichlet_energy(v: VelocityField) -> float:
    """(-L v, v): the squared discrete H1 seminorm."""
    ops = grid_operators(v.grid)
    return v.grid.cell_area * float(-v.data @ (ops.lap @ v.data))


def norms(v: VelocityField) -> dict:
    """L2, L4, W14, gradL2, gradL4 by midpoint quadrature."""
    area = v.grid.cell_area
    vals = center_values(v)
    grads = center_gradient(v)
    l4 = (area * np.sum(np.sum(vals**2, axis=0) ** 2)) ** 0.25
    g4 = (area * np.sum(np.sum(grads**2, axis=0) ** 2)) ** 0.25
    return {
        "L2": l2_norm(v),
        "L4": float(l4),
        "W14": float((l4**4 + g4**4) ** 0.25),
        "gradL2": float(np.sqrt(max(dirichlet_energy(v), 0.0))),
        "gradL4": float(g4),
    }


def sup_norm(v: VelocityField) -> float:
    return float(np.max(np.abs(v.data))) if v.data.size else 0.0


def divergence(v: ArrayLike, grid: Grid | None = None) -> np.ndarray:
    g = v.grid if isinstance(v, VelocityField) else grid
    return (grid_operators(g).div @ as_data(v)).reshape(g.nx, g.ny)


def curl(v: VelocityField) -> np.ndarray:
    """Discrete vorticity dv/dx - du/dy at interior corners."""
    return grid_operators(v.grid).vorticity @ v.data


def from_streamfunction(grid: Grid, psi: np.ndarray) -> VelocityField:
    """Velocity = discrete curl of psi given at interior corners; exactly divergence-free."""
    psi = np.asarray(psi, dtype=float).ravel()
    return VelocityField(grid, grid_operators(grid).curl_psi @ psi)


# ---------------------------------------------------------------------------
# Random test fields
# ---------------------------------------------------------------------------

def _bump_modes(x: np.ndarray, L: float, k: int) -> np.ndarray:
    """sin(pi x/L) sin(k pi x/L): vanishes with its first derivative at both ends."""
    return np.sin(np.pi * x / L) * np.sin(k * np.pi * x / L)


def random_streamfunction_field(grid: Grid, rng: np.random.Generator, kmax: int = 4,
                                decay: float = 1.0) -> VelocityField:
    """Smooth random divergence-free field from a random streamfunction.

    The law of the continuous streamfunction does not depend on resolution.
    The result is normalised to unit L2 norm.
    """
    xc, yc = np.meshgrid(grid.x_faces[1:-1], grid.y_faces[1:-1], indexing="ij")
    psi = np.zeros_like(xc)
    for k in range(1, kmax + 1):
        bx = _bump_modes(xc, grid.Lx, k)
        for l in range(1, kmax + 1):
            psi += rng.standard_normal() / (k * k + l * l) ** decay * bx * _bump_modes(yc, grid.Ly, l)
    v = from_streamfunction(grid, psi)
    n = l2_norm(v)
    return v / n if n > 0 else v


def bump_field(grid: Grid, width: float, center: tuple[float, float] | None = None) -> VelocityField:
    """Unit-L2 swirl from the streamfunction exp(-|x - c|^2/width^2) sin^2(pi y/Ly)."""
    cx, cy = center if center is not None else (0.5 * grid.Lx, 0.5 * grid.Ly)
    xc, yc = np.meshgrid(grid.x_faces[1:-1], grid.y_faces[1:-1], indexing="ij")
    psi = np.exp(-((xc - cx) ** 2 + (yc - cy) ** 2) / width**2) * np.sin(np.pi * yc / grid.Ly) ** 2
    v = from_streamfunction(grid, psi)
    return v / l2_norm(v)


def random_raw_field(grid: Grid, rng: np.random.Generator, kmax: int = 4) -> VelocityField:
    """Smooth random zero-boundary field, not divergence-free, unit L2 norm."""
    def sample(x, y):
        out = np.zeros_like(x)
        for k in range(1, kmax + 1):
            for l in range(1, kmax + 1):
                out += rng.standard_normal() / (k * k + l * l) * _bump_modes(x, grid.Lx, k) * _bump_modes(y, grid.Ly, l)
        return out
    v = VelocityField.from_functions(grid, sample, sample)
    n = l2_norm(v)
    return v / n if n > 0 else v


# ---------------------------------------------------------------------------
# Cutoff weight
# ---------------------------------------------------------------------------

def cutoff_profile(xi: np.ndarray) -> np.ndarray:
    """Lambda(xi): 0 for xi <= 1, 1 for xi >= 2, cubic smoothstep in between."""
    s = np.clip(np.asarray(xi, dtype=float) - 1.0, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def distance_from_center(grid: Grid) -> np.ndarray:
    xc, yc = np.meshgrid(grid.x_centers - 0.5 * grid.Lx, grid.y_centers - 0.5 * grid.Ly, indexing="ij")
    return np.hypot(xc, yc)


def cutoff_weight(grid: Grid, k: float) -> np.ndarray:
    """Lambda^2(|x|^2 / k^2) at cell centres, |x| measured from the domain centre."""
    if not k > 0:
        raise ValueError("cutoff radius k must be positive")
    r = distance_from_center(grid)
    return cutoff_profile(r**2 / k**2) ** 2


# ---------------------------------------------------------------------------
# Field IO
# ---------------------------------------------------------------------------

def save_field(path: str | Path, v: VelocityField, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (float64, u-block then v-block)."""
    path = Path(path)
    header = {"grid": v.grid.to_dict(), "n_u": v.grid.n_u, "n_v": v.grid.n_v,
              "layout": "row-major interior u (nx-1, ny) then v (nx, ny-1)", "dtype": "<f8"}
    if meta:
        header["meta"] = meta
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    v.data.astype("<f8").tofile(path.with_suffix(".bin"))


def load_field(path: str | Path) -> VelocityField:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    g = header["grid"]
    grid = Grid(g["Lx"], g["Ly"], g["nx"], g["ny"], g.get("bc", "no-slip"))
    return VelocityField(grid, np.fromfile(path.with_suffix(".bin"), dtype="<f8"))
