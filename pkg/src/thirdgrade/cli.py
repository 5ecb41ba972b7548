"""Command-line driver: config loading, experiment runners and report emission."""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .attractor import (InitBall, absorbing_radius_estimate, cloud_tail_masses, invariant_measure_estimate,
                        pullback_ensemble, semidistance_nonincreasing, tail_decay_study)
from .leray import load_or_compute_basis, project
from .mesh import Grid, VelocityField, bump_field, divergence, inner, l2_norm, random_raw_field, save_field
from .noise import make_noise_spec, ou_path, ou_statistics, shift_path
from .operators import (OperatorConstants, calibrate_constants, convection, k_identity_terms,
                        lipschitz_probe, monotonicity_gap, op_K, quartic_norm, random_test_field)
from .solver import PhysParams, Trajectory, energy_residual, integrate, recompose, save_checkpoint

KINDS = ("simulate", "properties", "pullback", "tails", "invariant-measure", "calibrate", "ou-diagnostics")
VOLATILE_KEYS = ("created", "timing")

DEFAULTS = {
    "kind": "simulate",
    "grid": {"Lx": 4.0, "Ly": 1.0, "nx": 64, "ny": 16},
    "params": {"nu": 0.05, "alpha": 0.01, "beta": 0.01, "chi": 0.0,
               "forcing": {"kind": "bump", "amplitude": 2.0, "width": 0.3}},
    "noise": {"n_modes": 8, "s_exp": 1.0, "r_exp": 0.0, "amplitude": 200.0, "seed": 0},
    "basis": {"m": 16, "cache_dir": None},
    "run": {"dt": 2.5e-3, "t_end": 1.0, "horizons": [0.5, 1.0, 2.0, 3.0, 4.0, 5.0], "n_members": 4,
            "burn_in": 3.0, "horizon": 8.0, "n_omega": 20, "init_radius": 2.0, "init_seed": 0,
            "c_stab": 1.0, "store_every": 10, "checkpoint_every": 0, "path_reach": 20.0},
    "calibrate": {"n_samples": 300, "n_trilinear": 100, "safety": 10.0, "seed": 0, "constants_file": None},
    "properties": {"n_fields": 100, "n_triples": 200, "n_lipschitz": 10, "seed": 1},
    "tails": {"eps": [1e-2, 1e-3, 1e-4], "max_drift_cells": 2.0},
    "ou": {"relaxation_times": 1e4, "dt_fraction": 0.05, "lag_fraction": 1.0},
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    return tomllib.loads(text.decode())


def validate(cfg: dict) -> list[str]:
    """Every violated field, not just the first."""
    errs = []
    if cfg.get("kind") not in KINDS:
        errs.append(f"kind: must be one of {', '.join(KINDS)} (got {cfg.get('kind')!r})")
    g = cfg["grid"]
    for k in ("Lx", "Ly"):
        if not _num(g.get(k)) or not g[k] > 0:
            errs.append(f"grid.{k}: must be a positive number (got {g.get(k)!r})")
    for k in ("nx", "ny"):
        if not isinstance(g.get(k), int) or g[k] < 4:
            errs.append(f"grid.{k}: must be an integer >= 4 (got {g.get(k)!r})")
    p = cfg["params"]
    ok = True
    for k in ("nu", "beta"):
        if not _num(p.get(k)) or not p[k] > 0:
            errs.append(f"params.{k}: must be positive (got {p.get(k)!r})")
            ok = False
    if not _num(p.get("alpha")):
        errs.append(f"params.alpha: must be a number (got {p.get('alpha')!r})")
        ok = False
    if not _num(p.get("chi")) or p["chi"] < 0:
        errs.append(f"params.chi: must be nonnegative (got {p.get('chi')!r})")
    if ok and not abs(p["alpha"]) < math.sqrt(2.0 * p["nu"] * p["beta"]):
        errs.append(f"params.alpha: parameter regime |alpha| < sqrt(2 nu beta) violated "
                    f"(|alpha|={abs(p['alpha']):.6g}, sqrt(2 nu beta)={math.sqrt(2 * p['nu'] * p['beta']):.6g})")
    fk = p.get("forcing", {}).get("kind")
    if fk not in ("none", "bump", "mode"):
        errs.append(f"params.forcing.kind: must be none, bump or mode (got {fk!r})")
    n = cfg["noise"]
    if not isinstance(n.get("n_modes"), int) or n["n_modes"] < 0:
        errs.append(f"noise.n_modes: must be a nonnegative integer (got {n.get('n_modes')!r})")
    elif n["n_modes"] > cfg["basis"]["m"]:
        errs.append(f"noise.n_modes: exceeds basis.m = {cfg['basis']['m']}")
    if not _num(n.get("s_exp")) or not n["s_exp"] > 0.5:
        errs.append(f"noise.s_exp: must exceed 0.5 (got {n.get('s_exp')!r})")
    if not _num(n.get("amplitude")) or n["amplitude"] < 0:
        errs.append(f"noise.amplitude: must be nonnegative (got {n.get('amplitude')!r})")
    if not isinstance(n.get("seed"), int):
        errs.append(f"noise.seed: must be an explicit integer (got {n.get('seed')!r})")
    r = cfg["run"]
    if not _num(r.get("dt")) or not r["dt"] > 0:
        errs.append(f"run.dt: must be positive (got {r.get('dt')!r})")
    h = r.get("horizons")
    if not isinstance(h, list) or not h or any(not _num(x) or x <= 0 for x in h) or any(
            b <= a for a, b in zip(h, h[1:])):
        errs.append(f"run.horizons: must be a nonempty strictly increasing list of positive numbers (got {h!r})")
    if not isinstance(r.get("n_members"), int) or r["n_members"] < 1:
        errs.append(f"run.n_members: must be a positive integer (got {r.get('n_members')!r})")
    if not isinstance(r.get("n_omega"), int) or r["n_omega"] < 2:
        errs.append(f"run.n_omega: must be an integer >= 2 (got {r.get('n_omega')!r})")
    if _num(r.get("burn_in")) and _num(r.get("horizon")) and not 0 <= r["burn_in"] < r["horizon"]:
        errs.append("run.burn_in: must satisfy 0 <= burn_in < horizon")
    if not isinstance(r.get("init_seed"), int):
        errs.append(f"run.init_seed: must be an explicit integer (got {r.get('init_seed')!r})")
    if not _num(r.get("c_stab")) or not r["c_stab"] > 0:
        errs.append(f"run.c_stab: must be positive (got {r.get('c_stab')!r})")
    m = cfg["basis"]["m"]
    if isinstance(g.get("nx"), int) and isinstance(g.get("ny"), int) and g["nx"] >= 4 and g["ny"] >= 4:
        if not isinstance(m, int) or m < 1 or m > 0.2 * (g["nx"] - 1) * (g["ny"] - 1):
            errs.append(f"basis.m: must be in [1, 0.2 * (nx-1)(ny-1)] (got {m!r})")
    return errs


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, read_config_file(path))
    if overrides:
        cfg = _merge(cfg, overrides)
    errs = validate(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class Setup:
    """Grid, basis, parameters and noise built once from a validated config."""

    def __init__(self, cfg: dict):
        g = cfg["grid"]
        self.cfg = cfg
        self.grid = Grid(float(g["Lx"]), float(g["Ly"]), g["nx"], g["ny"])
        self.basis = load_or_compute_basis(self.grid, cfg["basis"]["m"], cfg["basis"].get("cache_dir"))
        p = cfg["params"]
        self.params = PhysParams(float(p["nu"]), float(p["alpha"]), float(p["beta"]), float(p["chi"]),
                                 f=self.forcing(p.get("forcing", {"kind": "none"})))
        n = cfg["noise"]
        self.spec = make_noise_spec(self.basis, n["n_modes"], n["s_exp"], n["r_exp"], amplitude=n["amplitude"])
        self.seed = n["seed"]
        r = cfg["run"]
        self.dt = float(r["dt"])
        self.c_stab = float(r["c_stab"])
        self.init = InitBall(float(r["init_radius"]), seed=r["init_seed"])

    def forcing(self, f: dict) -> VelocityField | None:
        kind = f.get("kind", "none")
        if kind == "none":
            return None
        if kind == "bump":
            return float(f.get("amplitude", 1.0)) * bump_field(self.grid, float(f.get("width", 0.3)))
        return float(f.get("amplitude", 1.0)) * self.basis.field(int(f.get("index", 0)))

    def constants(self) -> OperatorConstants:
        c = self.cfg["calibrate"]
        if c.get("constants_file"):
            d = json.loads(Path(c["constants_file"]).read_text())
            d = {k: v for k, v in d.items() if k in OperatorConstants.__dataclass_fields__}
            return OperatorConstants(**d)
        return calibrate_constants(self.grid, self.params.eps0, n_samples=c["n_samples"], seed=c["seed"],
                                   safety=c["safety"], lam_hat=self.basis.lam_hat, n_trilinear=c["n_trilinear"])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# Runners: each returns (report body, properties ok)
# ---------------------------------------------------------------------------

def run_simulate(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    from . import plotting
    r = S.cfg["run"]
    t_end = float(r["t_end"])
    path = ou_path(S.spec, S.params.chi, S.params.nu, 0.0, t_end, S.dt, S.seed)
    x0 = S.init.sample(S.grid, 0)
    n_total = int(round(t_end / S.dt))
    chunk = r["checkpoint_every"] or n_total
    y = x0 - path.field(0.0)
    parts, k, t = [], 0, 0.0
    while k < n_total:
        n = min(chunk, n_total - k)
        t1 = (k + n) * S.dt
        tr = integrate(y, path, t, t1, S.params, S.dt, c_stab=S.c_stab, store_every=r["store_every"])
        parts.append(tr)
        k += n
        t, y = t1, tr.final
        if r["checkpoint_every"]:
            save_checkpoint(out / "checkpoints", tr, S.params, S.seed, k)
    traj = _concat(parts)
    save_checkpoint(out / "checkpoints", traj, S.params, S.seed, n_total)
    v = recompose(traj, path)
    res = energy_residual(traj)
    _write_csv(out / "trajectory.csv", ("t", "y_L2", "v_L2"),
               [(t, math.sqrt(S.grid.cell_area * a @ a), math.sqrt(S.grid.cell_area * b @ b))
                for t, a, b in zip(traj.times, traj.states, v.states)])
    _write_csv(out / "ledger.csv", ("t",) + tuple(traj.ledger)[:-1] + ("residual",),
               [(traj.step_times[i],) + tuple(traj.ledger[c][i] for c in list(traj.ledger)[:-1]) + (res.per_step[i],)
                for i in range(len(res.per_step))])
    save_field(out / "final_v", v.state(-1))
    plotting.plot_ledger(traj.step_times, traj.ledger, out / "ledger.png")
    plotting.plot_vorticity(v.state(-1), out / "final_vorticity.png", title=f"t = {t_end:g}")
    body = {"params": S.params.to_dict(), "noise": S.spec.to_dict(), "t_end": t_end, "dt": S.dt,
            "n_steps": n_total, "substeps": int(sum(p.stats["substeps"] for p in parts)),
            "energy_residual": {"max": res.max, "mean": res.mean, "scale": res.scale},
            "final": {"y_L2": l2_norm(traj.final), "v_L2": l2_norm(v.state(-1))}}
    return body, True


def _concat(parts: list[Trajectory]) -> Trajectory:
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    times = np.concatenate([first.times] + [p.times[1:] for p in parts[1:]])
    states = np.vstack([first.states] + [p.states[1:] for p in parts[1:]])
    steps = np.concatenate([first.step_times] + [p.step_times[1:] for p in parts[1:]])
    led = {k: np.concatenate([p.ledger[k] for p in parts]) for k in first.ledger if k != "kinetic_end"}
    led["kinetic_end"] = parts[-1].ledger["kinetic_end"]
    stats = {"substeps": sum(p.stats["substeps"] for p in parts)}
    return Trajectory(first.grid, times, states, steps, led, first.dt, stats)


def run_properties(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    pc = S.cfg["properties"]
    rng = np.random.default_rng(pc["seed"])
    consts = S.constants()
    suites = {}

    def record(name, flags, worst=None):
        flags = [bool(f) for f in flags]
        suites[name] = {"passed": int(sum(flags)), "total": len(flags)}
        if worst is not None:
            suites[name]["worst"] = float(worst)

    flags, worst = [], 0.0
    for _ in range(pc["n_fields"]):
        w = random_raw_field(S.grid, rng)
        p = project(w)
        dv = float(np.linalg.norm(divergence(p)))
        idem = l2_norm(project(p) - p) / max(l2_norm(p), 1e-300)
        worst = max(worst, idem)
        flags.append(dv <= 1e-9 * max(1.0, l2_norm(w) / min(S.grid.hx, S.grid.hy)) and idem <= 1e-12)
    record("projection", flags, worst)

    kf, ki, cs = [], [], []
    kw = iw = cw = 0.0
    for _ in range(pc["n_fields"]):
        u, v = random_test_field(S.grid, rng), random_test_field(S.grid, rng)
        q = quartic_norm(v)
        e1 = abs(inner(op_K(v), v) - 0.5 * q) / (0.5 * q)
        lhs, rhs = k_identity_terms(u, v, S.params.beta)
        e2 = abs(lhs - rhs) / rhs
        e3 = abs(inner(convection(u, v), v)) / (l2_norm(v) * l2_norm(convection(u, v)) + 1e-300)
        kw, iw, cw = max(kw, e1), max(iw, e2), max(cw, e3)
        kf.append(e1 <= 1e-9)
        ki.append(e2 <= 1e-9)
        cs.append(e3 <= 1e-12)
    record("K_pairing", kf, kw)
    record("K_identity", ki, iw)
    record("convection_skew", cs, cw)

    mono = []
    for _ in range(pc["n_triples"]):
        y1, y2, z = (random_test_field(S.grid, rng) for _ in range(3))
        g = monotonicity_gap(y1, y2, z, S.params, consts)
        mono.append(g.holds)
    record("monotonicity", mono)

    lip, lw = [], 0.0
    for _ in range(pc["n_lipschitz"]):
        u, v, z = (random_test_field(S.grid, rng) for _ in range(3))
        pr = lipschitz_probe(u, v, z, S.params, consts, rng=rng)
        lw = max(lw, pr.bound_ratio)
        lip.append(pr.bound_ratio <= 1.0)
    record("lipschitz", lip, lw)

    zero = integrate(VelocityField.zeros(S.grid), None, 0.0, 10 * S.dt, PhysParams(S.params.nu, 0.0, S.params.beta),
                     S.dt, c_stab=S.c_stab)
    er = energy_residual(zero)
    record("zero_trajectory", [er.max == 0.0, np.all(zero.states == 0.0), np.all(zero.ledger["alpha_term"] == 0.0)])

    path = ou_path(S.spec, S.params.chi, S.params.nu, 0.0, 1.0, S.dt, S.seed)
    shifted = shift_path(shift_path(path, 0.25), 0.5)
    direct = shift_path(path, 0.75)
    record("ou_shift", [np.array_equal(shifted.coeffs, direct.coeffs) and shifted.t_min == direct.t_min])

    ok = all(s["passed"] == s["total"] for s in suites.values())
    _write_csv(out / "suites.csv", ("suite", "passed", "total"),
               [(k, v["passed"], v["total"]) for k, v in suites.items()])
    return {"suites": suites, "constants": consts.to_dict()}, ok


def _pullback_path(S: Setup):
    reach = max(float(S.cfg["run"]["path_reach"]), float(S.cfg["run"]["horizons"][-1]))
    return ou_path(S.spec, S.params.chi, S.params.nu, -reach, 0.0, S.dt, S.seed)


def run_pullback(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    from . import plotting
    consts = S.constants()
    path = _pullback_path(S)
    ar = absorbing_radius_estimate(path, S.params, consts)
    horizons = S.cfg["run"]["horizons"]
    res = pullback_ensemble(S.seed, S.params, S.spec, horizons, S.init, S.cfg["run"]["n_members"], S.dt,
                            path=path, c_stab=S.c_stab, threads=threads)
    t_emp = next((h for h, r in zip(res.horizons, res.radii) if r <= ar.kappa13), None)
    inside = bool(t_emp is not None and all(r <= ar.kappa13 for h, r in zip(res.horizons, res.radii) if h >= t_emp))
    mono = semidistance_nonincreasing(res.semidistances) if len(res.semidistances) >= 3 else None
    _write_csv(out / "pullback.csv", ("horizon", "radius", "semidistance_to_previous"),
               [(h, r, s) for h, r, s in zip(res.horizons, res.radii, np.concatenate([[np.nan], res.semidistances]))])
    for n, c in enumerate(res.clouds):
        np.savetxt(out / f"cloud_{n:02d}.csv", c, delimiter=",")
    plotting.plot_series(res.horizons, {"cloud radius": res.radii,
                                         "kappa13": np.full(len(res.horizons), ar.kappa13)},
                         out / "radii.png", "pullback horizon", r"$\|v(0)\|_2$")
    if len(res.semidistances):
        plotting.plot_series(res.horizons[1:], {"semidistance": np.maximum(res.semidistances, 1e-300)},
                             out / "semidistances.png", "pullback horizon", "semidistance", logy=True)
    ok = inside and mono is not False and not res.errors
    body = {"absorbing": ar.to_dict(), "absorption_time_estimate": ar.absorption_time(S.init.radius),
            "empirical_absorption_time": t_emp, "clouds_inside_ball": inside,
            "semidistance_nonincreasing": mono, "horizons": res.horizons, "radii": res.radii,
            "semidistances": res.semidistances, "errors": res.errors, "constants": consts.to_dict()}
    return body, ok


def run_tails(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    from . import plotting
    tc = S.cfg["tails"]
    half_diag = 0.5 * math.hypot(S.grid.Lx, S.grid.Ly)
    ks = S.grid.hx * np.arange(1, int(math.ceil(half_diag / S.grid.hx)) + 1)
    res = pullback_ensemble(S.seed, S.params, S.spec, S.cfg["run"]["horizons"], S.init, S.cfg["run"]["n_members"],
                            S.dt, path=_pullback_path(S), c_stab=S.c_stab, threads=threads)
    study = tail_decay_study(res, ks, tc["eps"], tc["max_drift_cells"])
    masses = cloud_tail_masses(res, ks)
    np.savetxt(out / "tail_masses.csv", np.column_stack([res.horizons, masses]), delimiter=",",
               header="horizon," + ",".join(f"k={k:.6g}" for k in ks), comments="")
    plotting.plot_tail_table(ks, masses, res.horizons, out / "tails.png")
    ok = bool(np.all(study.stable)) and not res.errors
    return {"study": study.to_dict(), "errors": res.errors}, ok


def _observables(S: Setup) -> dict:
    def energy(v):
        return l2_norm(v) ** 2

    def tanh_energy(v):
        return math.tanh(l2_norm(v) ** 2)

    e1 = S.basis.field(0)
    return {"energy": energy, "tanh_energy": tanh_energy, "mode1": lambda v: inner(v, e1)}


def run_invariant(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    r = S.cfg["run"]
    rep = invariant_measure_estimate(S.params, S.spec, float(r["burn_in"]), float(r["horizon"]), r["n_omega"],
                                     _observables(S), S.dt, S.seed, store_every=r["store_every"],
                                     c_stab=S.c_stab, threads=threads)
    _write_csv(out / "time_averages.csv", ["omega"] + [f"{n}" for n in rep.names] + [f"{n}_shifted" for n in rep.names],
               [[i] + list(a) + list(b) for i, (a, b) in enumerate(zip(rep.averages, rep.shifted))])
    return rep.to_dict(), bool(np.all(rep.passes))


def run_calibrate(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    consts = S.constants()
    (out / "constants.json").write_text(json.dumps(_jsonable(consts.to_dict()), indent=2, sort_keys=True))
    return {"constants": consts.to_dict(), "lam_hat": S.basis.lam_hat, "mu_1": float(S.basis.eigenvalues[0])}, True


def run_ou(S: Setup, out: Path, threads: int | None) -> tuple[dict, bool]:
    from . import plotting
    oc = S.cfg["ou"]
    a_min = float(np.min(S.params.nu * S.spec.mu + S.params.chi))
    a_max = float(np.max(S.params.nu * S.spec.mu + S.params.chi))
    dt = oc["dt_fraction"] / a_max
    T = oc["relaxation_times"] / a_min
    n = int(round(T / dt))
    path = ou_path(S.spec, S.params.chi, S.params.nu, 0.0, n * dt, dt, S.seed)
    lag = max(1, int(round(oc["lag_fraction"] / a_max / dt)))
    st = ou_statistics(path, lag)
    ev, ea = st.max_rel_errors()
    s1 = shift_path(shift_path(path, 7 * dt), 5 * dt)
    s2 = shift_path(path, 12 * dt)
    exact = bool(np.array_equal(s1.coeffs, s2.coeffs) and s1.t_min == s2.t_min)
    lags = np.arange(0, 6 * lag + 1, lag)
    emp = [1.0] + [ou_statistics(path, k).autocorr[0] for k in lags[1:]]
    plotting.plot_ou_autocorrelation(lags * dt, np.array(emp), np.exp(-path.rates[0] * lags * dt),
                                     out / "ou_autocorrelation.png")
    _write_csv(out / "ou_modes.csv", ("mode", "variance", "variance_theory", "autocorr", "autocorr_theory"),
               [(j, st.variance[j], st.variance_theory[j], st.autocorr[j], st.autocorr_theory[j])
                for j in range(len(st.variance))])
    ok = ev <= 0.05 and ea <= 0.05 and exact
    return {"dt": dt, "n_steps": n, "lag": st.lag, "max_variance_error": ev, "max_autocorr_error": ea,
            "shift_exact": exact}, ok


RUNNERS = {"simulate": run_simulate, "properties": run_properties, "pullback": run_pullback, "tails": run_tails,
           "invariant-measure": run_invariant, "calibrate": run_calibrate, "ou-diagnostics": run_ou}


def run(cfg: dict, out: str | Path, threads: int | None = None) -> int:
    """Run one experiment; 0 ok, 2 property violated, 1 runtime error."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"kind": cfg["kind"], "config": cfg, "config_hash": config_hash(cfg), "code_version": __version__,
              "created": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    start = _dt.datetime.now()
    try:
        S = Setup(cfg)
        body, ok = RUNNERS[cfg["kind"]](S, out, threads)
        report["result"] = body
        report["status"] = "ok" if ok else "property violated"
        code = 0 if ok else 2
    except Exception as exc:  # reported, then mapped to the runtime-error exit code
        report["status"] = "error"
        report["error"] = f"{type(exc).__name__}: {exc}"
        report["traceback"] = traceback.format_exc()
        code = 1
    report["timing"] = {"wall_seconds": (_dt.datetime.now() - start).total_seconds()}
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return code


def strip_volatile(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in VOLATILE_KEYS}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thirdgrade", description="Stochastic third-grade fluid lab.")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", help="TOML or JSON run descriptor")
        sp.add_argument("--out", default=f"out/{kind}", help="output directory")
        sp.add_argument("--seed-override", type=int, default=None, help="replace noise.seed")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker pool size")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    over = {"kind": args.command}
    if args.seed_override is not None:
        over["noise"] = {"seed": args.seed_override}
    try:
        cfg = load_config(args.config, over)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    code = run(cfg, args.out, args.threads)
    status = {0: "ok", 1: "runtime error", 2: "property violated"}[code]
    print(f"{args.command}: {status} -> {Path(args.out) / 'report.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
