"""Stokes-mode Ornstein-Uhlenbeck paths, the path shift and the radius functions."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .leray import StokesEigenbasis
from .mesh import VelocityField, grid_operators

_STREAM_START, _STREAM_DW, _STREAM_ETA = 0, 1, 2
_TIME_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Driven Stokes modes with amplitudes sigma_j = amplitude * mu_j^-(s_exp + 1 + r_exp/2)."""

    n_modes: int
    s_exp: float
    r_exp: float
    mu: np.ndarray
    sigma: np.ndarray
    amplitude: float = 1.0
    basis: StokesEigenbasis | None = field(default=None, repr=False)

    def scaled(self, gamma: float) -> "NoiseSpec":
        return replace(self, sigma=self.sigma * gamma, amplitude=self.amplitude * gamma)

    def to_dict(self) -> dict:
        return {"n_modes": self.n_modes, "s_exp": self.s_exp, "r_exp": self.r_exp,
                "amplitude": self.amplitude, "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


def noise_amplitudes(mu: np.ndarray, s_exp: float, r_exp: float) -> np.ndarray:
    return np.asarray(mu, dtype=float) ** (-(s_exp + 1.0 + 0.5 * r_exp))


def make_noise_spec(basis: StokesEigenbasis | None, n_modes: int, s_exp: float, r_exp: float,
                    amplitude: float = 1.0, mu: np.ndarray | None = None) -> NoiseSpec:
    """Noise on the first ``n_modes`` Stokes modes.

    ``mu`` may be given explicitly when no basis is needed (scalar studies).
    """
    if s_exp <= 0.5:
        raise ValueError(f"s_exp={s_exp} too small: need s_exp > d/4 = 0.5")
    if mu is None:
        if basis is None:
            raise ValueError("need a basis or explicit eigenvalues")
        if n_modes > basis.m:
            raise ValueError(f"n_modes={n_modes} exceeds basis size {basis.m}")
        mu = basis.eigenvalues[:n_modes]
    mu = np.asarray(mu, dtype=float)[:n_modes]
    if len(mu) != n_modes:
        raise ValueError("not enough eigenvalues for n_modes")
    return NoiseSpec(n_modes, float(s_exp), float(r_exp), mu.copy(),
                     amplitude * noise_amplitudes(mu, s_exp, r_exp), float(amplitude), basis)


def _rng(seed, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    return np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (stream,)))


def seed_entropy(seed) -> int | list:
    return seed if isinstance(seed, (int, np.integer)) else list(seed)


@dataclass(frozen=True, eq=False)
class OUPath:
    """Per-mode OU values on the time grid t_k = (start_index + k) * dt.

    ``coeffs`` has shape (n_times, n_modes).  ``dW`` and ``eta`` hold the
    Gaussian draws used for each transition, ``zeta`` the stationary start.
    """

    spec: NoiseSpec
    chi: float
    nu: float
    dt: float
    start_index: int
    coeffs: np.ndarray
    seed: object
    dW: np.ndarray = field(repr=False, default=None)
    eta: np.ndarray = field(repr=False, default=None)
    rng_state: dict | None = field(repr=False, default=None)

    @property
    def rates(self) -> np.ndarray:
        return self.nu * self.spec.mu + self.chi

    @property
    def n_times(self) -> int:
        return self.coeffs.shape[0]

    @property
    def t_grid(self) -> np.ndarray:
        return (self.start_index + np.arange(self.n_times)) * self.dt

    @property
    def t_min(self) -> float:
        return self.start_index * self.dt

    @property
    def t_max(self) -> float:
        return (self.start_index + self.n_times - 1) * self.dt

    def index_of(self, t: float) -> int:
        """Position of the node at time ``t``; ``t`` must be a node."""
        k = int(round(t / self.dt)) - self.start_index
        if abs((k + self.start_index) * self.dt - t) > _TIME_TOL * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not on the path grid (dt={self.dt})")
        if not 0 <= k < self.n_times:
            raise ValueError(f"t={t} outside path window [{self.t_min}, {self.t_max}]")
        return k

    def at(self, t: float) -> np.ndarray:
        """Coefficients at time ``t`` (piecewise-linear between nodes)."""
        s = t / self.dt - self.start_index
        if s < -_TIME_TOL or s > self.n_times - 1 + _TIME_TOL:
            raise ValueError(f"t={t} outside path window [{self.t_min}, {self.t_max}]")
        k = int(np.clip(np.floor(s + _TIME_TOL), 0, self.n_times - 1))
        if k == self.n_times - 1 or abs(s - k) <= _TIME_TOL:
            return self.coeffs[k].copy()
        th = s - k
        return (1.0 - th) * self.coeffs[k] + th * self.coeffs[k + 1]

    def window_mean(self, k0: int, k1: int) -> np.ndarray:
        """Mean of the piecewise-linear path over nodes k0..k1 (trapezoid rule)."""
        if k1 <= k0:
            return self.coeffs[k0].copy()
        c = self.coeffs
        inner_sum = c[k0 + 1:k1].sum(axis=0) if k1 > k0 + 1 else 0.0
        return (0.5 * (c[k0] + c[k1]) + inner_sum) / (k1 - k0)

    def interval_mean(self, ta: float, tb: float) -> np.ndarray:
        """Mean of the piecewise-linear path over [ta, tb] (arbitrary endpoints)."""
        if tb <= ta:
            return self.at(ta)
        ka = int(np.floor(ta / self.dt - self.start_index + _TIME_TOL)) + 1
        kb = int(np.ceil(tb / self.dt - self.start_index - _TIME_TOL)) - 1
        idx = np.arange(max(ka, 0), min(kb, self.n_times - 1) + 1)
        pts = np.concatenate([[ta], (self.start_index + idx) * self.dt, [tb]])
        vals = np.vstack([self.at(ta)[None, :], self.coeffs[idx], self.at(tb)[None, :]])
        w = np.diff(pts)
        return (0.5 * (vals[:-1] + vals[1:]) * w[:, None]).sum(axis=0) / (tb - ta)

    def field(self, t: float) -> VelocityField:
        return reconstruct_noise(self.at(t), self.spec)

    def l2_sq(self) -> np.ndarray:
        """||z(t_k)||_2^2 at every node (orthonormal modes)."""
        return np.sum(self.coeffs**2, axis=1)

    def subsample(self, factor: int) -> "OUPath":
        """Every ``factor``-th node; exact because OU transitions compose."""
        if self.start_index % factor:
            raise ValueError("start index not divisible by the subsampling factor")
        return OUPath(self.spec, self.chi, self.nu, self.dt * factor, self.start_index // factor,
                      self.coeffs[::factor].copy(), self.seed)


def reconstruct_noise(coeffs: np.ndarray, spec: NoiseSpec) -> VelocityField:
    if spec.basis is None:
        raise ValueError("noise spec carries no basis; cannot build fields")
    return VelocityField(spec.basis.grid, np.asarray(coeffs) @ spec.basis.matrix[: spec.n_modes])


def ou_transition(a: np.ndarray, sigma: np.ndarray, dt: float):
    """Coefficients of the exact transition split into a Wiener part and a residual.

    z' = decay z + sigma (gain dW + resid eta), with dW ~ N(0, dt), eta ~ N(0, 1).
    The conditional split keeps the Wiener increment explicit, so paths with
    different damping share the same driving noise.
    """
    a = np.asarray(a, dtype=float)
    x = a * dt
    decay = np.exp(-x)
    one_m = -np.expm1(-x)
    gain = np.where(x > 1e-12, one_m / np.where(x > 0, x, 1.0), 1.0 - 0.5 * x)
    total = np.where(x > 1e-12, -np.expm1(-2.0 * x) / (2.0 * np.where(a > 0, a, 1.0)), dt * (1.0 - x))
    resid_sq = total - gain**2 * dt
    # series for small a dt: dt^3 a^2 / 12
    resid_sq = np.where(x > 1e-3, resid_sq, dt * x**2 / 12.0 * (1.0 - x))
    return decay, gain, np.sqrt(np.maximum(resid_sq, 0.0))


def ou_path(spec: NoiseSpec, chi: float, nu: float, t_min: float, t_max: float, dt: float,
            seed, dW: np.ndarray | None = None) -> OUPath:
    """Stationary OU path on [t_min, t_max] with exact transitions.

    Same ``seed`` gives the same stationary draw and Wiener increments for
    every ``chi``.  ``dW`` may be supplied (shape (n_steps, n_modes)) to share
    increments with a finer path.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_min < t_max:
        raise ValueError("need t_min < t_max")
    if chi < 0:
        raise ValueError("chi must be nonnegative")
    i0 = int(round(t_min / dt))
    i1 = int(round(t_max / dt))
    if (abs(i0 * dt - t_min) > _TIME_TOL * max(1.0, abs(t_min))
            or abs(i1 * dt - t_max) > _TIME_TOL * max(1.0, abs(t_max))):
        raise ValueError("t_min and t_max must be integer multiples of dt")
    n_steps = i1 - i0
    m = spec.n_modes
    a = nu * spec.mu + chi
    if np.any(a <= 0):
        raise ValueError("OU rates must be positive")
    sigma = spec.sigma
    zeta = _rng(seed, _STREAM_START).standard_normal(m)
    rng_dw = _rng(seed, _STREAM_DW)
    rng_eta = _rng(seed, _STREAM_ETA)
    if dW is None:
        dW = np.sqrt(dt) * rng_dw.standard_normal((n_steps, m))
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (n_steps, m):
            raise ValueError(f"dW must have shape {(n_steps, m)}")
    eta = rng_eta.standard_normal((n_steps, m))
    decay, gain, resid = ou_transition(a, sigma, dt)
    coeffs = np.empty((n_steps + 1, m))
    coeffs[0] = sigma / np.sqrt(2.0 * a) * zeta
    kick = sigma * (gain * dW + resid * eta)
    for k in range(n_steps):
        coeffs[k + 1] = decay * coeffs[k] + kick[k]
    state = {"dw": rng_dw.bit_generator.state, "eta": rng_eta.bit_generator.state}
    return OUPath(spec, float(chi), float(nu), float(dt), i0, coeffs, seed, dW, eta, state)


def extend_path(path: OUPath, new_t_max: float) -> OUPath:
    """Continue the path forward with fresh increments from the stored streams."""
    if path.rng_state is None:
        raise ValueError("path carries no generator state; cannot extend")
    i1 = int(round(new_t_max / path.dt))
    extra = i1 - (path.start_index + path.n_times - 1)
    if extra <= 0:
        return path
    m = path.spec.n_modes
    rng_dw = np.random.default_rng()
    rng_dw.bit_generator.state = copy.deepcopy(path.rng_state["dw"])
    rng_eta = np.random.default_rng()
    rng_eta.bit_generator.state = copy.deepcopy(path.rng_state["eta"])
    dW = np.sqrt(path.dt) * rng_dw.standard_normal((extra, m))
    eta = rng_eta.standard_normal((extra, m))
    decay, gain, resid = ou_transition(path.rates, path.spec.sigma, path.dt)
    new = np.empty((extra, m))
    prev = path.coeffs[-1]
    kick = path.spec.sigma * (gain * dW + resid * eta)
    for k in range(extra):
        prev = decay * prev + kick[k]
        new[k] = prev
    state = {"dw": rng_dw.bit_generator.state, "eta": rng_eta.bit_generator.state}
    return OUPath(path.spec, path.chi, path.nu, path.dt, path.start_index,
                  np.vstack([path.coeffs, new]), path.seed,
                  None if path.dW is None else np.vstack([path.dW, dW]),
                  None if path.eta is None else np.vstack([path.eta, eta]), state)


def shift_path(path: OUPath, s: float, extend: bool = False, window: tuple[float, float] | None = None) -> OUPath:
    """Path of theta_s omega: z'(t) = z(t + s); a pure relabelling of the time grid.

    ``window`` (in the new time labels) is checked against the sampled range;
    with ``extend=True`` a forward shortfall is filled with fresh increments.
    """
    k = int(round(s / path.dt))
    if abs(k * path.dt - s) > _TIME_TOL * max(1.0, abs(s)):
        raise ValueError(f"shift {s} is not a multiple of dt={path.dt}")
    out = replace(path, start_index=path.start_index - k)
    if window is not None:
        lo, hi = window
        if lo < out.t_min - _TIME_TOL:
            raise ValueError("window exhausted: backward extension is not available")
        if hi > out.t_max + _TIME_TOL:
            if not extend:
                raise ValueError("window exhausted and extension disabled")
            out = extend_path(out, hi)
    return out


# ---------------------------------------------------------------------------
# Radius functions
# ---------------------------------------------------------------------------

def w14_fourth(path: OUPath, chunk: int = 2048) -> np.ndarray:
    """||z(t_k)||_{W^{1,4}}^4 at every node."""
    spec = path.spec
    if spec.basis is None:
        raise ValueError("noise spec carries no basis")
    E = spec.basis.matrix[: spec.n_modes]
    grid = spec.basis.grid
    ops = grid_operators(grid)
    vals = np.vstack([ops.u_center @ E.T, ops.v_center @ E.T])       # (2 cells, m)
    grads = np.vstack([ops.du_dx @ E.T, ops.du_dy @ E.T, ops.dv_dx @ E.T, ops.dv_dy @ E.T])
    nc = grid.n_cells
    out = np.empty(path.n_times)
    for s in range(0, path.n_times, chunk):
        Z = path.coeffs[s:s + chunk].T                                # (m, T)
        v = (vals @ Z).reshape(2, nc, -1)
        g = (grads @ Z).reshape(4, nc, -1)
        l4 = np.sum(np.sum(v**2, axis=0) ** 2, axis=0)
        g4 = np.sum(np.sum(g**2, axis=0) ** 2, axis=0)
        out[s:s + chunk] = grid.cell_area * (l4 + g4)
    return out


def _trapezoid(y: np.ndarray, dt: float) -> float:
    if len(y) < 2:
        return 0.0
    return float(dt * (y.sum() - 0.5 * (y[0] + y[-1])))


@dataclass(frozen=True)
class RadiusKappas:
    k1: float
    k2: float
    k3: float
    k4: float

    def squares(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4]) ** 2


def radius_kappas(path: OUPath, c: float, window: tuple[float, float] | None = None,
                  w14: np.ndarray | None = None) -> RadiusKappas:
    """kappa_1..4 over ``window`` = [t_start, t_end] (default: whole path up to 0).

    kappa_1 uses z(t_end); the weights e^{c t} use the path's time labels.
    """
    lo, hi = window if window is not None else (path.t_min, min(0.0, path.t_max))
    k0, k1 = path.index_of(lo), path.index_of(hi)
    if k1 < k0:
        raise ValueError("empty window")
    t = path.t_grid[k0:k1 + 1]
    z2 = path.l2_sq()[k0:k1 + 1]
    weight = np.exp(c * t)
    if w14 is None:
        w4 = w14_fourth(path)[k0:k1 + 1] if path.spec.basis is not None else np.zeros_like(z2)
    else:
        w4 = np.asarray(w14)[k0:k1 + 1]
    return RadiusKappas(
        k1=float(np.sqrt(z2[-1])),
        k2=float(np.sqrt(np.max(z2 * weight))),
        k3=float(np.sqrt(_trapezoid(weight * z2, path.dt))),
        k4=float(np.sqrt(_trapezoid(weight * w4, path.dt))),
    )


def tempered_decay(path: OUPath, c: float, shifts, memory: float) -> np.ndarray:
    """e^{-c t} kappa_i(theta_{-t} omega)^2 for each t in ``shifts``, shape (len(shifts), 4).

    Each radius looks back ``memory`` time units from the shifted origin, so
    the path must cover [-(max shift + memory), 0].
    """
    w4 = w14_fourth(path) if path.spec.basis is not None else None
    out = []
    for t in shifts:
        shifted = shift_path(path, -float(t))
        k = radius_kappas(shifted, c, window=(-memory, 0.0), w14=w4)
        out.append(math.exp(-c * float(t)) * k.squares())
    return np.array(out)


@dataclass(frozen=True)
class OUStatistics:
    variance: np.ndarray
    variance_theory: np.ndarray
    autocorr: np.ndarray
    autocorr_theory: np.ndarray
    lag: float

    def max_rel_errors(self) -> tuple[float, float]:
        v = np.max(np.abs(self.variance / self.variance_theory - 1.0))
        a = np.max(np.abs(self.autocorr / self.autocorr_theory - 1.0))
        return float(v), float(a)


def ou_statistics(path: OUPath, lag_steps: int) -> OUStatistics:
    """Per-mode sample variance and lag autocorrelation against the stationary law."""
    c = path.coeffs
    a = path.rates
    var = np.mean(c**2, axis=0)
    x, y = c[:-lag_steps], c[lag_steps:]
    rho = np.mean(x * y, axis=0) / np.sqrt(np.mean(x**2, axis=0) * np.mean(y**2, axis=0))
    tau = lag_steps * path.dt
    return OUStatistics(var, path.spec.sigma**2 / (2.0 * a), rho, np.exp(-a * tau), tau)


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def save_path(stem: str | Path, path: OUPath) -> None:
    stem = Path(stem)
    header = {"spec": path.spec.to_dict(), "chi": path.chi, "nu": path.nu, "dt": path.dt,
              "start_index": path.start_index, "window": [path.t_min, path.t_max],
              "shape": list(path.coeffs.shape), "seed": seed_entropy(path.seed), "dtype": "<f8"}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    path.coeffs.astype("<f8").tofile(stem.with_suffix(".bin"))


def load_path(stem: str | Path, basis: StokesEigenbasis | None = None) -> OUPath:
    stem = Path(stem)
    h = json.loads(stem.with_suffix(".json").read_text())
    s = h["spec"]
    spec = NoiseSpec(s["n_modes"], s["s_exp"], s["r_exp"], np.array(s["mu"]), np.array(s["sigma"]),
                     s["amplitude"], basis)
    coeffs = np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape(h["shape"])
    seed = h["seed"] if isinstance(h["seed"], int) else tuple(h["seed"])
    return OUPath(spec, h["chi"], h["nu"], h["dt"], h["start_index"], coeffs, seed)

