"""Pullback ensembles: absorbing radii, endpoint clouds, tails and invariant-measure probes."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mesh import Grid, VelocityField, center_values, cutoff_weight, l2_norm, random_streamfunction_field
from .noise import NoiseSpec, OUPath, ou_path, radius_kappas
from .operators import OperatorConstants
from .solver import PhysParams, SolverError, integrate


def _map(fn, jobs, threads: int | None):
    if threads is not None and threads <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


def member_rng(master_seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, index)]))


def member_seed(master_seed: int, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), *map(int, index)])


def dissipation_rate(params: PhysParams, lam_hat: float) -> float:
    """c = nu lam_hat (1 + eps0/2)."""
    return params.nu * lam_hat * (1.0 + 0.5 * params.eps0)


# ---------------------------------------------------------------------------
# Absorbing radius
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AbsorbingRadius:
    kappa11: float
    kappa12: float
    kappa13: float
    rate: float
    coefficients: dict
    tail_change: float

    def absorption_time(self, init_radius: float) -> float:
        """Time after which e^{-c t} 2 R^2 <= 2, the additive constant of kappa11^2."""
        return max(0.0, math.log(max(init_radius, 1e-300) ** 2) / self.rate)

    def to_dict(self) -> dict:
        return {"kappa11": self.kappa11, "kappa12": self.kappa12, "kappa13": self.kappa13,
                "rate": self.rate, "coefficients": self.coefficients, "tail_change": self.tail_change}


def _kappa11_sq(path: OUPath, params: PhysParams, consts: OperatorConstants, rate: float,
                window: tuple[float, float]) -> tuple[float, dict]:
    lam = consts.lam_hat
    nu, beta = params.nu, params.beta
    a1 = consts.safety * (4.0 / beta) * consts.c_b**2 * (consts.C_P4 * consts.C_K) ** 4
    a2 = 27.0 * beta / 4.0
    mu_top = float(path.spec.mu[-1]) if path.spec.n_modes else 0.0
    coef = {"C3": 4.0 * params.chi**2 / (nu * lam) + a1 * mu_top,
            "C4": 16.0 * a2,
            "Cf": 4.0 / (nu * lam)}
    k = radius_kappas(path, rate, window=window)
    f_sq = 0.0 if params.f is None else l2_norm(params.f) ** 2
    f_int = (1.0 - math.exp(rate * window[0])) / rate
    val = 2.0 + 2.0 * k.k2**2 + coef["C3"] * k.k3**2 + coef["C4"] * k.k4**2 + coef["Cf"] * f_sq * f_int
    return val, coef


def absorbing_radius_estimate(path: OUPath, params: PhysParams, consts: OperatorConstants,
                              tail_tol: float = 0.01) -> AbsorbingRadius:
    """Radius kappa13 = kappa11 + kappa12 of the absorbing ball at time 0.

    kappa11^2 = 2 + 2 kappa2^2 + C3 kappa3^2 + C4 kappa4^2 + Cf |f|^2 int e^{cs} ds
    with the calibrated constants; kappa12 = |z(0)|.  The path must reach back
    far enough that dropping its oldest tenth changes kappa11 by < tail_tol.
    """
    if not np.isfinite(consts.lam_hat):
        raise ValueError("constants carry no lam_hat")
    rate = dissipation_rate(params, consts.lam_hat)
    t0, t1 = path.t_min, 0.0
    if t0 >= t1:
        raise ValueError("path window must reach back before time 0")
    full, coef = _kappa11_sq(path, params, consts, rate, (t0, t1))
    cut = path.t_grid[path.index_of(t0) + max(1, int(0.1 * (path.index_of(t1) - path.index_of(t0))))]
    short, _ = _kappa11_sq(path, params, consts, rate, (cut, t1))
    change = abs(math.sqrt(full) - math.sqrt(short)) / math.sqrt(full)
    if change > tail_tol:
        raise ValueError(f"window too short: dropping the oldest tenth changes kappa11 by {change:.2%}")
    k11 = math.sqrt(full)
    k12 = math.sqrt(float(path.l2_sq()[path.index_of(t1)]))
    return AbsorbingRadius(k11, k12, k11 + k12, rate, coef, change)


# ---------------------------------------------------------------------------
# Pullback ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitBall:
    """Initial data on the sphere of ``radius`` in L2 (the worst case of the ball)."""

    radius: float
    kmax: int = 4
    seed: int = 0

    def sample(self, grid: Grid, i: int) -> VelocityField:
        return self.radius * random_streamfunction_field(grid, member_rng(self.seed, i), kmax=self.kmax)


@dataclass
class PullbackResult:
    grid: Grid
    horizons: np.ndarray
    clouds: list
    radii: np.ndarray
    semidistances: np.ndarray
    errors: list = field(default_factory=list)
    tail_ks: np.ndarray | None = None
    tail_masses: np.ndarray | None = None

    def cloud_fields(self, n: int) -> list[VelocityField]:
        return [VelocityField(self.grid, row) for row in self.clouds[n]]


def cloud_radius(cloud: np.ndarray, grid: Grid) -> float:
    if len(cloud) == 0:
        return float("nan")
    return float(np.sqrt(grid.cell_area * np.max(np.sum(cloud**2, axis=1))))


def _as_cloud(c, grid: Grid | None) -> tuple[np.ndarray, Grid | None]:
    if len(c) and isinstance(c[0], VelocityField):
        return np.array([v.data for v in c]), c[0].grid
    return np.asarray(c, dtype=float), grid


def hausdorff_semidistance(cloud_a, cloud_b, grid: Grid | None = None) -> float:
    """max over a of min over b of |a - b|_2."""
    A, ga = _as_cloud(cloud_a, grid)
    B, gb = _as_cloud(cloud_b, grid)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty cloud")
    g = ga or gb
    if g is None:
        raise ValueError("grid required for raw arrays")
    if ga is not None and gb is not None and ga != gb:
        raise ValueError("clouds live on different grids")
    d2 = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T
    # exact recomputation for the minimisers avoids cancellation
    j = np.argmin(d2, axis=1)
    exact = np.sum((A - B[j]) ** 2, axis=1)
    return float(np.sqrt(g.cell_area * np.max(exact)))


def tail_mass(v: VelocityField, k: float) -> float:
    """Integral of Lambda^2(|x|^2/k^2) |v|^2 (cell-centre quadrature)."""
    w = cutoff_weight(v.grid, k)
    c = center_values(v)
    return float(v.grid.cell_area * np.sum(w.ravel() * np.sum(c**2, axis=0)))


def pullback_ensemble(seed, params: PhysParams, spec: NoiseSpec, horizons, init_set: InitBall, n_members: int,
                      dt: float, *, path: OUPath | None = None, c_stab: float = 0.25, threads: int | None = 1,
                      tail_ks=None) -> PullbackResult:
    """Time-0 endpoint clouds of the pullback dynamics for each horizon on one noise path.

    Member i starts at s = -t from x_i - z(-t); the recorded state is y(0) + z(0).
    """
    horizons = np.asarray(horizons, dtype=float)
    if len(horizons) == 0 or np.any(np.diff(horizons) < 0) or horizons[0] <= 0:
        raise ValueError("horizons must be positive and nondecreasing")
    if n_members < 1:
        raise ValueError("need at least one member")
    grid = spec.basis.grid
    if path is None:
        path = ou_path(spec, params.chi, params.nu, -float(horizons[-1]), 0.0, dt, seed)
    inits = [init_set.sample(grid, i) for i in range(n_members)]
    z_end = path.field(0.0)

    def run(job):
        n, i = job
        t = float(horizons[n])
        try:
            tr = integrate(inits[i] - path.field(-t), path, -t, 0.0, params, dt, c_stab=c_stab,
                           store_every=10**9, ledger=False)
        except SolverError as exc:
            return n, i, None, str(exc)
        return n, i, (tr.final + z_end).data, None

    jobs = [(n, i) for n in range(len(horizons)) for i in range(n_members)]
    out = sorted(_map(run, jobs, threads), key=lambda r: (r[0], r[1]))
    clouds, errors = [], []
    for n in range(len(horizons)):
        rows = [r[2] for r in out if r[0] == n and r[2] is not None]
        errors += [{"horizon": float(horizons[n]), "member": r[1], "error": r[3]} for r in out
                   if r[0] == n and r[3] is not None]
        clouds.append(np.array(rows).reshape(len(rows), grid.n_dof))
    radii = np.array([cloud_radius(c, grid) for c in clouds])
    semis = np.array([hausdorff_semidistance(clouds[n + 1], clouds[n], grid) if len(clouds[n]) and len(clouds[n + 1])
                      else float("nan") for n in range(len(horizons) - 1)])
    res = PullbackResult(grid, horizons, clouds, radii, semis, errors)
    if tail_ks is not None:
        res.tail_ks = np.asarray(tail_ks, dtype=float)
        res.tail_masses = cloud_tail_masses(res, res.tail_ks)
    return res


def cloud_tail_masses(result: PullbackResult, ks) -> np.ndarray:
    """(horizon, k) table of the max over the cloud of tail_mass."""
    ks = np.asarray(ks, dtype=float)
    out = np.zeros((len(result.horizons), len(ks)))
    for n in range(len(result.horizons)):
        fields = result.cloud_fields(n)
        for j, k in enumerate(ks):
            out[n, j] = max((tail_mass(v, k) for v in fields), default=float("nan"))
    return out


def semidistance_nonincreasing(semis, n_last: int = 3, atol: float = 1e-12) -> bool:
    """Consecutive semidistances nonincreasing over the last ``n_last`` entries.

    ``atol`` absorbs differences at the roundoff floor once the clouds have
    collapsed onto each other.
    """
    s = np.asarray(semis, dtype=float)[-n_last:]
    return bool(np.all(np.diff(s) <= atol))


@dataclass(frozen=True)
class TailStudy:
    eps: np.ndarray
    ks: np.ndarray
    horizons: np.ndarray
    k0: np.ndarray          # (eps, horizon); inf when no k reaches eps
    drift_cells: np.ndarray  # per eps, |k0(last) - k0(second last)| / hx
    stable: np.ndarray

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "ks": self.ks.tolist(), "horizons": self.horizons.tolist(),
                "k0": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.k0],
                "drift_cells": [None if not np.isfinite(v) else float(v) for v in self.drift_cells],
                "stable": [bool(s) for s in self.stable]}


def tail_decay_study(result: PullbackResult, ks, eps_list, max_drift_cells: float = 2.0) -> TailStudy:
    """Smallest k with max-over-cloud tail mass <= eps, per horizon."""
    ks = np.sort(np.asarray(ks, dtype=float))
    eps = np.asarray(eps_list, dtype=float)
    masses = cloud_tail_masses(result, ks)
    k0 = np.full((len(eps), len(result.horizons)), np.inf)
    for a, e in enumerate(eps):
        for n in range(len(result.horizons)):
            ok = np.nonzero(masses[n] <= e)[0]
            if len(ok):
                k0[a, n] = ks[ok[0]]
    if len(result.horizons) >= 2:
        drift = np.abs(k0[:, -1] - k0[:, -2]) / result.grid.hx
        drift = np.where(np.isfinite(k0[:, -1]) & np.isfinite(k0[:, -2]), drift, np.inf)
    else:
        drift = np.full(len(eps), np.inf)
    stable = np.isfinite(k0[:, -1]) & (drift <= max_drift_cells)
    return TailStudy(eps, ks, result.horizons.copy(), k0, drift, stable)


def noise_scaling_study(seed, params: PhysParams, spec: NoiseSpec, horizon: float, init_set: InitBall,
                        n_members: int, dt: float, gammas=(1.0, 0.5, 0.25), c_stab: float = 0.25,
                        threads: int | None = 1) -> dict:
    """Semidistance from the gamma-scaled cloud to the gamma = 0 cloud for each gamma."""
    ref = pullback_ensemble(seed, params, spec.scaled(0.0), [horizon], init_set, n_members, dt,
                            c_stab=c_stab, threads=threads)
    out = {}
    for g in gammas:
        r = pullback_ensemble(seed, params, spec.scaled(g), [horizon], init_set, n_members, dt,
                              c_stab=c_stab, threads=threads)
        out[float(g)] = hausdorff_semidistance(r.clouds[0], ref.clouds[0], r.grid)
    return out


# ---------------------------------------------------------------------------
# Transition semigroup and invariant measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    mean: float
    se: float
    values: np.ndarray

    @classmethod
    def of(cls, values) -> "MCEstimate":
        v = np.asarray(values, dtype=float)
        se = float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
        return cls(float(np.mean(v)), se, v)


def evolve(x: VelocityField, t: float, params: PhysParams, spec: NoiseSpec, seed, dt: float,
           c_stab: float = 0.25) -> VelocityField:
    """Psi(t, omega, x) for the path drawn from ``seed`` on [0, t]."""
    if t == 0:
        return x
    path = ou_path(spec, params.chi, params.nu, 0.0, t, dt, seed)
    tr = integrate(x - path.field(0.0), path, 0.0, t, params, dt, c_stab=c_stab, store_every=10**9, ledger=False)
    return tr.final + path.field(t)


def transition_average(observable, t: float, n_omega: int, init: VelocityField, params: PhysParams,
                       spec: NoiseSpec, master_seed: int, dt: float, c_stab: float = 0.25,
                       threads: int | None = 1, tag: tuple = ()) -> MCEstimate:
    """Monte Carlo estimate of T_t f(x) = E f(Psi(t, ., x)) over ``n_omega`` independent paths."""
    if t == 0:
        return MCEstimate.of([observable(init)] * n_omega)
    vals = _map(lambda i: observable(evolve(init, t, params, spec, member_seed(master_seed, *tag, i), dt, c_stab)),
                range(n_omega), threads)
    return MCEstimate.of(vals)


@dataclass(frozen=True)
class MarkovProbe:
    direct: MCEstimate
    nested: MCEstimate
    z_score: float

    @property
    def passes(self) -> bool:
        return abs(self.z_score) <= 2.0


def markov_probe(observable, t1: float, t2: float, init: VelocityField, params: PhysParams, spec: NoiseSpec,
                 master_seed: int, dt: float, n_omega: int, n_outer: int, n_inner: int,
                 c_stab: float = 0.25, threads: int | None = 1) -> MarkovProbe:
    """T_{t1+t2} f(x) against the average over X = Psi(t1, ., x) of T_{t2} f(X), fresh increments inside."""
    direct = transition_average(observable, t1 + t2, n_omega, init, params, spec, master_seed, dt, c_stab,
                                threads, tag=(0,))

    def outer(i):
        X = evolve(init, t1, params, spec, member_seed(master_seed, 1, i), dt, c_stab)
        return transition_average(observable, t2, n_inner, X, params, spec, master_seed, dt, c_stab, 1,
                                  tag=(2, i)).mean

    nested = MCEstimate.of(_map(outer, range(n_outer), threads))
    z = (direct.mean - nested.mean) / math.sqrt(direct.se**2 + nested.se**2)
    return MarkovProbe(direct, nested, float(z))


@dataclass(frozen=True)
class InvariantMeasureReport:
    names: list
    window: tuple
    shifted_window: tuple
    averages: np.ndarray           # (n_omega, n_obs)
    shifted: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    diff_mean: np.ndarray
    diff_se: np.ndarray

    @property
    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.diff_mean / self.diff_se
        return np.where(self.diff_mean == 0.0, 0.0, z)

    @property
    def passes(self) -> np.ndarray:
        return np.abs(self.z_scores) <= 2.0

    def to_dict(self) -> dict:
        return {"observables": list(self.names), "window": list(self.window),
                "shifted_window": list(self.shifted_window), "mean": self.mean.tolist(), "se": self.se.tolist(),
                "shift_diff_mean": self.diff_mean.tolist(), "shift_diff_se": self.diff_se.tolist(),
                "z_scores": self.z_scores.tolist(), "passes": self.passes.tolist()}


def _time_average(values: np.ndarray, times: np.ndarray, lo: float, hi: float) -> np.ndarray:
    sel = (times >= lo - 1e-9) & (times <= hi + 1e-9)
    t, v = times[sel], values[sel]
    w = np.diff(t)
    return (0.5 * (v[:-1] + v[1:]) * w[:, None]).sum(axis=0) / (t[-1] - t[0])


def invariant_measure_estimate(params: PhysParams, spec: NoiseSpec, burn_in: float, horizon: float, n_omega: int,
                               observables: dict, dt: float, master_seed: int, delta: float | None = None,
                               init: VelocityField | None = None, store_every: int = 10, c_stab: float = 0.25,
                               threads: int | None = 1) -> InvariantMeasureReport:
    """Time averages over [burn_in, horizon] and [burn_in + delta, horizon + delta] on ``n_omega`` paths.

    The shift probe uses the paired difference of the two windows per path.
    """
    delta = 0.1 * horizon if delta is None else delta
    if not 0 <= burn_in < horizon:
        raise ValueError("need 0 <= burn_in < horizon")
    grid = spec.basis.grid
    x0 = VelocityField.zeros(grid) if init is None else init
    names = list(observables)
    t_end = horizon + delta

    def run(i):
        path = ou_path(spec, params.chi, params.nu, 0.0, t_end, dt, member_seed(master_seed, i))
        tr = integrate(x0 - path.field(0.0), path, 0.0, t_end, params, dt, c_stab=c_stab,
                       store_every=store_every, ledger=False)
        E = path.spec.basis.matrix[: path.spec.n_modes]
        idx = [path.index_of(t) for t in tr.times]
        states = tr.states + path.coeffs[idx] @ E
        vals = np.array([[observables[n](VelocityField(grid, s)) for n in names] for s in states])
        return (_time_average(vals, tr.times, burn_in, horizon),
                _time_average(vals, tr.times, burn_in + delta, horizon + delta))

    res = _map(run, range(n_omega), threads)
    avg = np.array([r[0] for r in res])
    sh = np.array([r[1] for r in res])
    diff = sh - avg
    n = len(res)
    se = np.std(avg, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(len(names), np.nan)
    dse = np.std(diff, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(len(names), np.nan)
    return InvariantMeasureReport(names, (burn_in, horizon), (burn_in + delta, horizon + delta), avg, sh,
                                  avg.mean(axis=0), se, diff.mean(axis=0), dse)
