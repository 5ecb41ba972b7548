"""Semi-implicit integration of the transformed system y = v - z and its diagnostics."""

from __future__ import annotations

import csv
import functools
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .leray import StokesEigenbasis, galerkin_project, pressure_potential, project, reconstruct
from .mesh import Grid, VelocityField, grid_operators, l2_norm, load_field, save_field, sym_gradient
from .noise import OUPath, ou_path
from .operators import OperatorConstants, advect_raw, epsilon0, op_J_raw, op_K_raw

LEDGER_COLUMNS = ("kinetic", "viscous", "viscous_A", "beta_term", "alpha_term",
                  "pairing", "chi_term", "forcing", "A4")


class SolverError(RuntimeError):
    """Linear-solve failure or blow-up, with diagnostics attached."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True, eq=False)
class PhysParams:
    nu: float
    alpha: float
    beta: float
    chi: float = 0.0
    f: VelocityField | None = None

    def __post_init__(self):
        errors = []
        if not self.nu > 0:
            errors.append(f"nu must be positive (got {self.nu})")
        if not self.beta > 0:
            errors.append(f"beta must be positive (got {self.beta})")
        if self.chi < 0:
            errors.append(f"chi must be nonnegative (got {self.chi})")
        if not errors and not abs(self.alpha) < math.sqrt(2.0 * self.nu * self.beta):
            errors.append(f"parameter regime |alpha| < sqrt(2 nu beta) violated: |alpha|={abs(self.alpha):.6g}, "
                          f"sqrt(2 nu beta)={math.sqrt(2.0 * self.nu * self.beta):.6g}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def eps0(self) -> float:
        return epsilon0(self.nu, self.alpha, self.beta)

    def with_chi(self, chi: float) -> "PhysParams":
        return replace(self, chi=float(chi))

    def forcing_data(self, grid: Grid) -> np.ndarray:
        return np.zeros(grid.n_dof) if self.f is None else self.f.data

    def to_dict(self) -> dict:
        return {"nu": self.nu, "alpha": self.alpha, "beta": self.beta, "chi": self.chi,
                "eps0": self.eps0, "f_L2": 0.0 if self.f is None else l2_norm(self.f)}


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Kernel:
    """Stacked sparse operators so one step costs a handful of matvecs."""

    nc: int
    nd: int
    forward: object      # dof -> [a11, a12, a22, adv_ax, adv_ay, adv_dx, adv_dy]
    adjoint: object      # [-ax w/2, -ay w/2, s11, s12, s22] -> dof
    sym: object          # dof -> [a11, a12, a22]
    lap: object
    curl: object
    curl_t: object


@functools.lru_cache(maxsize=16)
def _kernel(grid: Grid) -> _Kernel:
    ops = grid_operators(grid)
    fwd = sp.vstack([ops.a11, ops.a12, ops.a22, ops.adv_ax, ops.adv_ay, ops.adv_dx, ops.adv_dy]).tocsr()
    adj = sp.hstack([ops.adv_dx.T, ops.adv_dy.T, ops.a11.T, 2.0 * ops.a12.T, ops.a22.T]).tocsr()
    sym = sp.vstack([ops.a11, ops.a12, ops.a22]).tocsr()
    return _Kernel(grid.n_cells, grid.n_dof, fwd, adj, sym, ops.lap.tocsr(), ops.curl_psi.tocsr(),
                   ops.curl_psi.T.tocsr())


@functools.lru_cache(maxsize=32)
def _cn_factor(grid: Grid, kappa: float):
    """LU of C^T (I - kappa L) C in streamfunction coordinates, and C^T (I + kappa L)."""
    ops = grid_operators(grid)
    C = ops.curl_psi
    mat = (C.T @ C + kappa * (C.T @ (-ops.lap) @ C)).tocsc()
    explicit = (C.T @ (sp.identity(grid.n_dof) + kappa * ops.lap)).tocsr()
    return spla.splu(mat), explicit


def _nonlinear_data(w: np.ndarray, grid: Grid, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """(N(w) w + alpha J(w) + beta K(w), stacked A(w)) from raw dof data."""
    K = _kernel(grid)
    nc, nd = K.nc, K.nd
    f = K.forward @ w
    a11, a12, a22 = f[:nc], f[nc:2 * nc], f[2 * nc:3 * nc]
    o = 3 * nc
    ax, ay, dxw, dyw = f[o:o + nd], f[o + nd:o + 2 * nd], f[o + 2 * nd:o + 3 * nd], f[o + 3 * nd:]
    s = 0.5 * beta * (a11 * a11 + 2.0 * a12 * a12 + a22 * a22)
    s11, s12, s22 = s * a11, s * a12, s * a22
    if alpha != 0.0:
        h = 0.5 * alpha
        s11 = s11 + h * (a11 * a11 + a12 * a12)
        s12 = s12 + h * a12 * (a11 + a22)
        s22 = s22 + h * (a12 * a12 + a22 * a22)
    rhs = np.concatenate([-0.5 * ax * w, -0.5 * ay * w, s11, s12, s22])
    return 0.5 * (ax * dxw + ay * dyw) + K.adjoint @ rhs, f[:o]


def nonlinear_raw(w: VelocityField, params: PhysParams) -> np.ndarray:
    """N(w) w + alpha J(w) + beta K(w) before projection."""
    return _nonlinear_data(w.data, w.grid, params.alpha, params.beta)[0]


def stability_limit(w: VelocityField, params: PhysParams, c_stab: float) -> float:
    h = min(w.grid.hx, w.grid.hy)
    amax = float(np.max(sym_gradient(w).frob_sq()))
    return c_stab * h * h / (1.0 + params.beta * amax)


def _cn_data(y: np.ndarray, extra: np.ndarray, grid: Grid, nu: float, dt: float) -> np.ndarray:
    lu, explicit = _cn_factor(grid, 0.5 * nu * dt)
    K = _kernel(grid)
    psi = lu.solve(explicit @ y + K.curl_t @ extra)
    if not np.all(np.isfinite(psi)):
        raise SolverError("linear solve produced non-finite values", dt=dt)
    return K.curl @ psi


def step(y: VelocityField, z_now: VelocityField, z_next: VelocityField, params: PhysParams, dt: float,
         z_mid: VelocityField | None = None) -> VelocityField:
    """One Crank-Nicolson / explicit step of the transformed system.

    The result lies in the range of the discrete curl, hence is exactly
    divergence-free.
    """
    if z_mid is None:
        z_mid = 0.5 * (z_now + z_next)
    nl, _ = _nonlinear_data(y.data + z_mid.data, y.grid, params.alpha, params.beta)
    extra = dt * (-nl + params.chi * z_mid.data + params.forcing_data(y.grid))
    return VelocityField(y.grid, _cn_data(y.data, extra, y.grid, params.nu, dt))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """States at ``times`` plus one ledger row per step (terms at the step start)."""

    grid: Grid
    times: np.ndarray
    states: np.ndarray
    step_times: np.ndarray
    ledger: dict
    dt: float
    stats: dict = field(default_factory=dict)

    def state(self, i: int) -> VelocityField:
        return VelocityField(self.grid, self.states[i])

    @property
    def final(self) -> VelocityField:
        return self.state(-1)

    @property
    def step_sizes(self) -> np.ndarray:
        return np.diff(self.step_times)


def _ledger_row(y: np.ndarray, z: np.ndarray, A: np.ndarray, nl: np.ndarray, f: np.ndarray,
                params: PhysParams, grid: Grid) -> tuple:
    K = _kernel(grid)
    nc = K.nc
    area = grid.cell_area
    a11, a12, a22 = A[:nc], A[nc:2 * nc], A[2 * nc:]
    frob = a11 * a11 + 2.0 * a12 * a12 + a22 * a22
    q4 = area * float(np.sum(frob * frob))
    Ay = K.sym @ y
    ay_sq = area * float(Ay[:nc] @ Ay[:nc] + 2.0 * Ay[nc:2 * nc] @ Ay[nc:2 * nc] + Ay[2 * nc:] @ Ay[2 * nc:])
    tr3 = 0.0
    if params.alpha != 0.0:
        tr3 = params.alpha * area * float(np.sum(a11**3 + a22**3 + 3.0 * a12 * a12 * (a11 + a22)))
    return (area * float(y @ y),
            -2.0 * params.nu * area * float(y @ (K.lap @ y)),
            params.nu * ay_sq,
            params.beta * q4,
            tr3,
            2.0 * area * float(nl @ z),
            2.0 * params.chi * area * float(z @ y),
            2.0 * area * float(f @ y),
            q4 ** 0.25)


def _advance(y: np.ndarray, z: np.ndarray, params: PhysParams, dt: float, rows, c_stab: float,
             proj, f: np.ndarray, grid: Grid) -> tuple[np.ndarray, bool]:
    """One step unless the stability limit is violated (then returns (y, False))."""
    w = y + z
    nl, A = _nonlinear_data(w, grid, params.alpha, params.beta)
    nc = grid.n_cells
    amax = float(np.max(A[:nc] ** 2 + 2.0 * A[nc:2 * nc] ** 2 + A[2 * nc:] ** 2))
    h = min(grid.hx, grid.hy)
    if dt > c_stab * h * h / (1.0 + params.beta * amax):
        return y, False
    if rows is not None:
        rows.append(_ledger_row(y, z, A, nl, f, params, grid))
    extra = dt * (-nl + params.chi * z + f)
    return proj(_cn_data(y, extra, grid, params.nu, dt)), True


def integrate(y0: VelocityField, path: OUPath | None, t0: float, t1: float, params: PhysParams, dt: float,
              *, restrict: StokesEigenbasis | None = None, store_every: int = 1, c_stab: float = 0.25,
              blowup: float = 1e6, ledger: bool = True) -> Trajectory:
    """Step from t0 to t1 with macro step ``dt``.

    ``dt`` must be a multiple of the path step; z at a macro step is sampled
    at path nodes and its mean over the step window drives the source.  If
    the stability limit is violated the step is split into 2^k equal substeps.
    ``restrict`` projects after every step onto the span of that basis.
    """
    grid = y0.grid
    n_steps = int(round((t1 - t0) / dt))
    if n_steps < 0 or abs(n_steps * dt - (t1 - t0)) > 1e-9 * max(1.0, abs(t1 - t0)):
        raise ValueError("t1 - t0 must be a nonnegative multiple of dt")
    zero = np.zeros(grid.n_dof)
    if path is not None:
        ratio = int(round(dt / path.dt))
        if ratio < 1 or abs(ratio * path.dt - dt) > 1e-9 * dt:
            raise ValueError(f"dt={dt} must be an integer multiple of the path step {path.dt}")
        k_start = path.index_of(t0)
        if k_start + n_steps * ratio >= path.n_times:
            raise ValueError("integration window exceeds the path window")
        if path.spec.basis is None or path.spec.basis.grid != grid:
            raise ValueError("path modes live on a different grid")
        E = path.spec.basis.matrix[: path.spec.n_modes]
    if restrict is None:
        proj = lambda v: v
    else:
        R = restrict.matrix
        proj = lambda v: (grid.cell_area * (R @ v)) @ R
    f = params.forcing_data(grid)

    y = proj(y0.data.copy())
    ref = max(l2_norm(y0), 1.0, 0.0 if params.f is None else l2_norm(params.f))
    states = [y.copy()]
    times = [t0]
    step_times = [t0]
    rows = [] if ledger else None
    substeps_total = 0
    wall = time.perf_counter()
    for n in range(n_steps):
        ta = t0 + n * dt
        if path is None:
            z_mid = zero
        else:
            a = k_start + n * ratio
            z_mid = path.window_mean(a, a + ratio) @ E
        sub_times = []
        y_new, ok = _advance(y, z_mid, params, dt, rows, c_stab, proj, f, grid)
        if not ok:
            need = dt / stability_limit(VelocityField(grid, y + z_mid), params, c_stab)
            n_sub = 1 << max(1, math.ceil(math.log2(need)))
            while True:
                h = dt / n_sub
                mark = len(rows) if rows is not None else 0
                y_new, sub_times = y, []
                for s in range(n_sub):
                    sa, sb = ta + s * h, ta + (s + 1) * h
                    zs = zero if path is None else path.interval_mean(sa, sb) @ E
                    y_new, ok = _advance(y_new, zs, params, h, rows, c_stab, proj, f, grid)
                    if not ok:
                        break
                    if s < n_sub - 1:
                        sub_times.append(sb)
                if ok:
                    break
                if rows is not None:
                    del rows[mark:]
                n_sub *= 2
                if n_sub > 4096:
                    raise SolverError(f"stability limit unreachable at t={ta:.6g}", step=n)
            substeps_total += n_sub
        nrm = math.sqrt(grid.cell_area * float(y_new @ y_new))
        if not np.isfinite(nrm) or nrm > blowup * ref:
            raise SolverError(f"blow-up at t={ta + dt:.6g}: ||y||={nrm:.3e}", step=n, norm=nrm, dt=dt)
        y = y_new
        step_times.extend(sub_times)
        step_times.append(t0 + (n + 1) * dt)
        if (n + 1) % store_every == 0 or n + 1 == n_steps:
            states.append(y.copy())
            times.append(t0 + (n + 1) * dt)
    if ledger:
        cols = np.array(rows).reshape(-1, len(LEDGER_COLUMNS))
        led = {name: cols[:, i] for i, name in enumerate(LEDGER_COLUMNS)}
        led["kinetic_end"] = grid.cell_area * float(y @ y)
    else:
        led = {}
    stats = {"wall_time": time.perf_counter() - wall, "n_steps": n_steps, "substeps": substeps_total,
             "c_stab": c_stab}
    return Trajectory(grid, np.array(times), np.array(states), np.array(step_times), led, dt, stats)


@dataclass(frozen=True)
class EnergyResidual:
    per_step: np.ndarray
    max: float
    mean: float
    scale: float


def energy_residual(traj: Trajectory, params: PhysParams | None = None) -> EnergyResidual:
    """Per-step rate residual of the discrete energy balance.

    r_n = (|y_{n+1}|^2 - |y_n|^2)/dt_n + dissipation_n - work_n, with all
    terms evaluated at the start of the step.  It vanishes as dt -> 0 at
    first order.
    """
    L = traj.ledger
    kin = np.append(L["kinetic"], L["kinetic_end"])
    h = traj.step_sizes
    if len(h) == 0:
        return EnergyResidual(np.zeros(0), 0.0, 0.0, 0.0)
    dissipation = L["viscous"] + L["beta_term"] + L["alpha_term"]
    work = L["pairing"] + L["chi_term"] + L["forcing"]
    r = np.diff(kin) / h + dissipation - work
    scale = float(np.max(np.abs(dissipation) + np.abs(work))) if len(r) else 0.0
    return EnergyResidual(r, float(np.max(np.abs(r))), float(np.mean(np.abs(r))), scale)


@dataclass
class PhysicalTrajectory:
    grid: Grid
    times: np.ndarray
    states: np.ndarray

    def state(self, i: int) -> VelocityField:
        return VelocityField(self.grid, self.states[i])


def noise_states(path: OUPath, times: np.ndarray) -> np.ndarray:
    E = path.spec.basis.matrix[: path.spec.n_modes]
    idx = [path.index_of(t) for t in times]
    return path.coeffs[idx] @ E


def recompose(traj: Trajectory, path: OUPath | None) -> PhysicalTrajectory:
    """v(t) = y(t) + z(t) at every stored time."""
    if path is None:
        return PhysicalTrajectory(traj.grid, traj.times.copy(), traj.states.copy())
    if path.spec.basis is None or path.spec.basis.grid != traj.grid:
        raise ValueError("path and trajectory live on different grids")
    return PhysicalTrajectory(traj.grid, traj.times.copy(), traj.states + noise_states(path, traj.times))


# ---------------------------------------------------------------------------
# Galerkin reference
# ---------------------------------------------------------------------------

@dataclass
class GalerkinTensors:
    mu: np.ndarray
    b: np.ndarray           # b[i, j, k] = (N(e_i) e_j, e_k)
    A: np.ndarray           # (m, 3, n_cells) symmetric gradients of the basis
    area: float


def galerkin_tensors(basis: StokesEigenbasis, m: int) -> GalerkinTensors:
    fields = [basis.field(i) for i in range(m)]
    area = basis.grid.cell_area
    E = basis.matrix[:m]
    b = np.empty((m, m, m))
    for i in range(m):
        for j in range(m):
            b[i, j] = area * (E @ advect_raw(fields[i], fields[j]))
    A = np.empty((m, 3, basis.grid.n_cells))
    for i, e in enumerate(fields):
        t = sym_gradient(e)
        A[i] = [t.a11.ravel(), t.a12.ravel(), t.a22.ravel()]
    return GalerkinTensors(basis.eigenvalues[:m].copy(), b, A, area)


def _galerkin_nonlinear(w: np.ndarray, T: GalerkinTensors, alpha: float, beta: float) -> tuple:
    Aw = np.tensordot(w, T.A, axes=1)                   # (3, cells)
    a11, a12, a22 = Aw
    frob = a11**2 + 2 * a12**2 + a22**2
    s = 0.5 * frob
    ks = np.array([s * a11, s * a12, s * a22])
    js = 0.5 * np.array([a11**2 + a12**2, a12 * (a11 + a22), a12**2 + a22**2])
    weights = np.array([1.0, 2.0, 1.0])[:, None]
    Kc = T.area * np.einsum("kcx,cx->k", T.A, weights * ks)
    Jc = T.area * np.einsum("kcx,cx->k", T.A, weights * js)
    Bc = np.einsum("i,j,ijk->k", w, w, T.b)
    return Bc, Jc, Kc, frob


@dataclass
class OracleTrajectory:
    times: np.ndarray
    coeffs: np.ndarray
    basis: StokesEigenbasis
    energy_residual: float = float("nan")
    stats: dict = field(default_factory=dict)

    def field(self, i: int) -> VelocityField:
        return reconstruct(self.coeffs[i], self.basis.truncate(self.coeffs.shape[1]))


def galerkin_oracle(y0: VelocityField, path: OUPath | None, t0: float, t1: float, params: PhysParams,
                    basis: StokesEigenbasis, m: int, rtol: float = 1e-10, atol: float = 1e-13,
                    interval: float | None = None) -> OracleTrajectory:
    """m-mode Galerkin system integrated with DOP853, restarting at every path node.

    Convection uses the precomputed tensor (N(e_i) e_j, e_k); the stress terms
    are assembled by quadrature of A(sum w_i e_i) against A(e_k).
    """
    if m > 16:
        raise ValueError("oracle limited to m <= 16 modes")
    Bm = basis.truncate(m)
    T = galerkin_tensors(basis, m)
    c0 = galerkin_project(y0, Bm)
    fc = np.zeros(m) if params.f is None else galerkin_project(params.f, Bm)
    if path is not None:
        En = path.spec.basis.matrix[: path.spec.n_modes]
        Q = Bm.grid.cell_area * (Bm.matrix @ En.T)          # noise coords -> Galerkin coords
        k0, k1 = path.index_of(t0), path.index_of(t1)
        nodes = path.t_grid[k0:k1 + 1]
        zc = path.coeffs[k0:k1 + 1] @ Q.T
    else:
        step_len = interval or (t1 - t0)
        n = max(1, int(round((t1 - t0) / step_len)))
        nodes = t0 + (t1 - t0) * np.arange(n + 1) / n
        zc = np.zeros((n + 1, m))
    nu, alpha, beta, chi = params.nu, params.alpha, params.beta, params.chi

    def rhs_factory(ta, za, zb, h):
        def rhs(t, c):
            zeta = za + (t - ta) / h * (zb - za)
            w = c + zeta
            Bc, Jc, Kc, _ = _galerkin_nonlinear(w, T, alpha, beta)
            return -nu * T.mu * c - Bc - alpha * Jc - beta * Kc + chi * zeta + fc
        return rhs

    gl_x, gl_w = np.polynomial.legendre.leggauss(8)
    c = c0.copy()
    out = [c.copy()]
    balance = 0.0
    n_eval = 0
    for k in range(len(nodes) - 1):
        ta, tb = nodes[k], nodes[k + 1]
        h = tb - ta
        sol = solve_ivp(rhs_factory(ta, zc[k], zc[k + 1], h), (ta, tb), c, method="DOP853",
                        rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise SolverError(f"oracle integration failed: {sol.message}", t=ta)
        n_eval += sol.nfev
        ts = ta + 0.5 * h * (gl_x + 1.0)
        for tq, wq in zip(ts, gl_w):
            cq = sol.sol(tq)
            zeta = zc[k] + (tq - ta) / h * (zc[k + 1] - zc[k])
            w = cq + zeta
            Bc, Jc, Kc, frob = _galerkin_nonlinear(w, T, alpha, beta)
            q4 = T.area * np.sum(frob**2)
            tr3 = 0.0
            if alpha != 0.0:
                Aw = np.tensordot(w, T.A, axes=1)
                tr3 = T.area * np.sum(Aw[0] ** 3 + Aw[2] ** 3 + 3 * Aw[1] ** 2 * (Aw[0] + Aw[2]))
            rate = (-2 * nu * np.sum(T.mu * cq**2) - beta * q4 - alpha * tr3
                    + 2 * zeta @ (Bc + alpha * Jc + beta * Kc) + 2 * chi * zeta @ cq + 2 * fc @ cq)
            balance += 0.5 * h * wq * rate
        c = sol.y[:, -1]
        out.append(c.copy())
    coeffs = np.array(out)
    e_change = coeffs[-1] @ coeffs[-1] - coeffs[0] @ coeffs[0]
    scale = max(abs(coeffs[-1] @ coeffs[-1]), abs(coeffs[0] @ coeffs[0]), 1e-300)
    return OracleTrajectory(np.array(nodes), coeffs, basis, abs(e_change - balance) / scale,
                            {"nfev": n_eval, "rtol": rtol})


# ---------------------------------------------------------------------------
# Continuity and chi-independence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuityResult:
    observed: float
    bound: float
    exponent: float
    bound_curve: np.ndarray

    @property
    def holds(self) -> bool:
        return self.observed <= self.bound


def continuity_check(run_a: Trajectory, run_b: Trajectory, params: PhysParams,
                     consts: OperatorConstants) -> ContinuityResult:
    """sup_t |y_a - y_b|^2 against |y_a(0) - y_b(0)|^2 exp(safety (C_S3 C_K)^2/(nu eps0) int |A(y_b+z)|_4^2)."""
    if run_a.states.shape != run_b.states.shape or not np.allclose(run_a.times, run_b.times):
        raise ValueError("runs must share their time grid")
    area = run_a.grid.cell_area
    diff = run_a.states - run_b.states
    d2 = area * np.sum(diff**2, axis=1)
    rate = consts.safety * (consts.C_S3 * consts.C_K) ** 2 / (params.nu * params.eps0)
    h = run_b.step_sizes
    cum = np.concatenate([[0.0], np.cumsum(run_b.ledger["A4"] ** 2 * h)])
    # bound at stored times
    cum_at = np.interp(run_b.times, run_b.step_times, cum)
    curve = d2[0] * np.exp(rate * cum_at)
    return ContinuityResult(float(np.max(d2)), float(curve[-1]), float(rate * cum[-1]), curve)


@dataclass(frozen=True)
class ChiIndependence:
    discrepancy: float
    relative: float
    y_discrepancy: float
    v_scale: float


def chi_independence_check(x0: VelocityField, seed, chis: tuple[float, float], horizon: float,
                           params: PhysParams, spec, dt: float, path_dt: float | None = None,
                           t0: float = 0.0, c_stab: float = 0.25) -> ChiIndependence:
    """sup_t |v^{chi_1}(t) - v^{chi_2}(t)| with both OU paths driven by the same increments."""
    path_dt = dt if path_dt is None else path_dt
    runs = []
    for chi in chis:
        p = ou_path(spec, chi, params.nu, t0, t0 + horizon, path_dt, seed)
        z0 = p.field(t0)
        prm = params.with_chi(chi)
        tr = integrate(x0 - z0, p, t0, t0 + horizon, prm, dt, c_stab=c_stab, ledger=False)
        runs.append((tr, recompose(tr, p)))
    (ya, va), (yb, vb) = runs
    area = x0.grid.cell_area
    dv = np.sqrt(area * np.sum((va.states - vb.states) ** 2, axis=1))
    dy = np.sqrt(area * np.sum((ya.states - yb.states) ** 2, axis=1))
    scale = float(np.sqrt(area * np.max(np.sum(va.states**2, axis=1))))
    disc = float(np.max(dv))
    return ChiIndependence(disc, disc / scale if scale > 0 else 0.0, float(np.max(dy)), scale)


# ---------------------------------------------------------------------------
# Pressure
# ---------------------------------------------------------------------------

def momentum_residual(y: VelocityField, z: VelocityField, dydt: VelocityField, params: PhysParams) -> np.ndarray:
    """Unprojected dy/dt - nu L y + (w.grad)w - alpha div A^2 - beta div |A|^2 A - chi z - f."""
    ops = grid_operators(y.grid)
    w = y + z
    return (dydt.data - params.nu * (ops.lap @ y.data) + advect_raw(w, w)
            + params.alpha * op_J_raw(w).data + params.beta * op_K_raw(w).data
            - params.chi * z.data - params.forcing_data(y.grid))


def pressure_gradient(y: VelocityField, z: VelocityField, dydt: VelocityField, params: PhysParams) -> VelocityField:
    """grad P = -(I - P) residual, a discrete gradient field on interior faces."""
    res = momentum_residual(y, z, dydt, params)
    phi = pressure_potential(res, y.grid)
    return VelocityField(y.grid, -(grid_operators(y.grid).grad @ phi))


def gradient_defects(g: VelocityField) -> tuple[float, float]:
    """(|P g| / |g|, |curl g| / |curl| |g|) : both vanish for a discrete gradient.

    The curl is measured against the same stencil applied to |g|, the scale
    at which cancellation happens.
    """
    ops = grid_operators(g.grid)
    n = l2_norm(g)
    if n == 0.0:
        return 0.0, 0.0
    proj = l2_norm(project(g)) / n
    scale = np.linalg.norm(abs(ops.vorticity) @ np.abs(g.data))
    return proj, float(np.linalg.norm(ops.vorticity @ g.data) / scale)


def trajectory_pressure(traj: Trajectory, path: OUPath | None, params: PhysParams) -> list[VelocityField]:
    """Pressure gradients at the stored times; dy/dt by centred differences (one-sided at the ends)."""
    S, t = traj.states, traj.times
    n = len(t)
    if n < 2:
        raise ValueError("need at least two stored states")
    out = []
    for i in range(n):
        if i == 0:
            d = (S[1] - S[0]) / (t[1] - t[0])
        elif i == n - 1:
            d = (S[-1] - S[-2]) / (t[-1] - t[-2])
        else:
            d = (S[i + 1] - S[i - 1]) / (t[i + 1] - t[i - 1])
        z = VelocityField.zeros(traj.grid) if path is None else path.field(t[i])
        out.append(pressure_gradient(traj.state(i), z, VelocityField(traj.grid, d), params))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory: str | Path, traj: Trajectory, params: PhysParams, seed, step_index: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"checkpoint_{step_index:08d}"
    save_field(stem, traj.final, meta={"time": float(traj.times[-1])})
    if traj.ledger:
        with open(stem.with_name(stem.name + "_ledger.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("t",) + LEDGER_COLUMNS)
            for i in range(len(traj.ledger["kinetic"])):
                row = [traj.step_times[i]] + [traj.ledger[c][i] for c in LEDGER_COLUMNS]
                wr.writerow([repr(float(x)) for x in row])
    meta = {"params": params.to_dict(), "seed": seed if isinstance(seed, (int, type(None))) else list(seed),
            "dt": traj.dt, "step_index": step_index, "time": float(traj.times[-1])}
    stem.with_name(stem.name + "_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem


def load_checkpoint(stem: str | Path) -> tuple[VelocityField, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + "_meta.json").read_text())
    return load_field(stem), meta
