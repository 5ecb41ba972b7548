"""Nonlinear operators B, J, K and the composite G in weak form.

J and K are assembled as the adjoint of the discrete symmetric gradient
applied to the stress tensor, so their duality pairings hold exactly on the
grid.  Convection uses the skew-symmetric average of the advective and
conservative forms.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field

import numpy as np

from .leray import dual_norm, project, stokes_apply
from .mesh import (Grid, TensorField, VelocityField, center_gradient, center_values,
                   grid_operators, inner, l2_norm, norms,
                   random_streamfunction_field, sup_norm, sym_gradient)


def epsilon0(nu: float, alpha: float, beta: float) -> float:
    """1 - sqrt(alpha^2 / (2 nu beta)); requires |alpha| < sqrt(2 nu beta)."""
    if nu <= 0 or beta <= 0:
        raise ValueError("nu and beta must be positive")
    ratio = alpha * alpha / (2.0 * nu * beta)
    if ratio >= 1.0:
        raise ValueError(f"parameter regime violated: need |alpha| < sqrt(2 nu beta), "
                         f"got |alpha|={abs(alpha):.6g}, sqrt(2 nu beta)={np.sqrt(2 * nu * beta):.6g}")
    return 1.0 - float(np.sqrt(ratio))


# ---------------------------------------------------------------------------
# Convection
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _transposes(grid: Grid) -> dict:
    ops = grid_operators(grid)
    return {name: getattr(ops, name).T.tocsr() for name in ("adv_dx", "adv_dy", "a11", "a12", "a22")}


def advect_raw(a: VelocityField, w: VelocityField) -> np.ndarray:
    """N(a) w = 1/2 (C(a) w - C(a)^T w), C(a) = a_x d/dx + a_y d/dy at every dof."""
    ops = grid_operators(a.grid)
    tr = _transposes(a.grid)
    ax = ops.adv_ax @ a.data
    ay = ops.adv_ay @ a.data
    cw = ax * (ops.adv_dx @ w.data) + ay * (ops.adv_dy @ w.data)
    ctw = tr["adv_dx"] @ (ax * w.data) + tr["adv_dy"] @ (ay * w.data)
    return 0.5 * (cw - ctw)


def convection(u: VelocityField, v: VelocityField) -> VelocityField:
    """P[(u . grad) v] in skew-symmetric form; (convection(u, v), v) = 0."""
    return project(VelocityField(u.grid, advect_raw(u, v)))


# ---------------------------------------------------------------------------
# Stress operators
# ---------------------------------------------------------------------------

def sym_gradient_adjoint(grid: Grid, t: TensorField) -> np.ndarray:
    """Riesz representative of w -> (T, A(w)) in the dof inner product."""
    tr = _transposes(grid)
    return (tr["a11"] @ t.a11.ravel() + 2.0 * (tr["a12"] @ t.a12.ravel())
            + tr["a22"] @ t.a22.ravel())


def j_stress(A: TensorField) -> TensorField:
    """1/2 A^2 for symmetric A."""
    return TensorField(0.5 * (A.a11**2 + A.a12**2),
                       0.5 * A.a12 * (A.a11 + A.a22),
                       0.5 * (A.a12**2 + A.a22**2))


def k_stress(A: TensorField) -> TensorField:
    """1/2 |A|^2 A."""
    s = 0.5 * A.frob_sq()
    return TensorField(s * A.a11, s * A.a12, s * A.a22)


def op_J_raw(v: VelocityField) -> VelocityField:
    return VelocityField(v.grid, sym_gradient_adjoint(v.grid, j_stress(sym_gradient(v))))


def op_K_raw(v: VelocityField) -> VelocityField:
    return VelocityField(v.grid, sym_gradient_adjoint(v.grid, k_stress(sym_gradient(v))))


def op_J(v: VelocityField) -> VelocityField:
    """Weak form of -P div(A(v)^2): <J(v), w> = 1/2 (A(v)^2, A(w))."""
    return project(op_J_raw(v))


def op_K(v: VelocityField) -> VelocityField:
    """Weak form of -P div(|A(v)|^2 A(v)): <K(v), w> = 1/2 (|A(v)|^2 A(v), A(w))."""
    return project(op_K_raw(v))


def tensor_pairing(grid: Grid, s: TensorField, t: TensorField) -> float:
    """Midpoint quadrature of S : T."""
    return grid.cell_area * float(np.sum(s.a11 * t.a11 + 2.0 * s.a12 * t.a12 + s.a22 * t.a22))


def integrate_trace_cubed(grid: Grid, A: TensorField) -> float:
    """Integral of Tr(A^3) for symmetric A."""
    a, b, c = A.a11, A.a12, A.a22
    tr = a * a * a + c * c * c + 3.0 * b * b * (a + c)
    return grid.cell_area * float(np.sum(tr))


def quartic_norm(v: VelocityField) -> float:
    """||A(v)||_4^4."""
    return v.grid.cell_area * float(np.sum(sym_gradient(v).frob_sq() ** 2))


def op_G(y: VelocityField, z: VelocityField, params) -> VelocityField:
    """nu A y + B(y+z) + alpha J(y+z) + beta K(y+z)."""
    w = y + z
    nl = advect_raw(w, w) + params.alpha * op_J_raw(w).data + params.beta * op_K_raw(w).data
    return params.nu * stokes_apply(y) + project(VelocityField(y.grid, nl))


# ---------------------------------------------------------------------------
# Calibrated constants
# ---------------------------------------------------------------------------

@dataclass
class OperatorConstants:
    """Empirical embedding constants (max ratios over random fields) plus ``safety``.

    C_K: ||grad w||_4 <= C_K ||A(w)||_4;  C_S3: ||w||_inf <= C_S3 ||grad w||_4;
    C_P4: ||w||_4 <= C_P4 ||grad w||_4;   c_b: |(N(w) z, w)| <= c_b ||w||_4^2 ||grad z||_2;
    c_tri: |(N(a) b, w)| <= c_tri ||a||_4 ||grad b||_4 ||grad w||_2.
    """

    C_K: float
    C_S3: float
    safety: float
    eps0: float
    C_P4: float = 1.0
    c_b: float = 1.0
    c_tri: float = 1.0
    lam_hat: float = float("nan")
    n_samples: int = 0
    seed: int = 0
    witnesses: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("C_K", "C_S3", "safety", "C_P4", "c_b", "c_tri"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.eps0 < 1.0:
            raise ValueError("eps0 must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def random_test_field(grid: Grid, rng: np.random.Generator, kmax: int = 6) -> VelocityField:
    """Random divergence-free field with random spectral slope and amplitude."""
    decay = rng.uniform(0.5, 1.5)
    amp = np.exp(rng.uniform(-1.0, 1.0))
    return amp * random_streamfunction_field(grid, rng, kmax=kmax, decay=decay)


def _grad_l4(v: VelocityField) -> float:
    g = center_gradient(v)
    return float((v.grid.cell_area * np.sum(np.sum(g**2, axis=0) ** 2)) ** 0.25)


def _l4(v: VelocityField) -> float:
    c = center_values(v)
    return float((v.grid.cell_area * np.sum(np.sum(c**2, axis=0) ** 2)) ** 0.25)


def calibrate_constants(grid: Grid, eps0: float, n_samples: int = 2000, seed: int = 0,
                        safety: float = 10.0, lam_hat: float | None = None,
                        n_trilinear: int = 200) -> OperatorConstants:
    """Maximise the embedding ratios over random smooth divergence-free fields.

    The two convection constants are maximised over the test direction
    exactly through the dual norm, and over ``n_trilinear`` random pairs.
    """
    rng = np.random.default_rng(seed)
    best = {"C_K": 0.0, "C_S3": 0.0, "C_P4": 0.0, "c_b": 0.0, "c_tri": 0.0}
    witness = {k: -1 for k in best}
    for i in range(n_samples):
        w = random_test_field(grid, rng)
        gl4 = _grad_l4(w)
        l4 = _l4(w)
        ratios = {"C_K": gl4 / quartic_norm(w) ** 0.25, "C_S3": sup_norm(w) / gl4, "C_P4": l4 / gl4}
        if i < n_trilinear:
            ratios["c_b"] = dual_norm(VelocityField(grid, advect_raw(w, w))) / l4**2
            b = random_test_field(grid, rng)
            ratios["c_tri"] = dual_norm(VelocityField(grid, advect_raw(w, b))) / (l4 * _grad_l4(b))
        for k, r in ratios.items():
            if r > best[k]:
                best[k], witness[k] = float(r), i
    return OperatorConstants(C_K=best["C_K"], C_S3=best["C_S3"], safety=safety, eps0=eps0,
                             C_P4=best["C_P4"], c_b=best["c_b"], c_tri=best["c_tri"],
                             lam_hat=float("nan") if lam_hat is None else float(lam_hat),
                             n_samples=n_samples, seed=seed, witnesses=witness)


# ---------------------------------------------------------------------------
# Monotonicity and identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonotonicityGap:
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs >= 0.0


def monotonicity_gap(y1: VelocityField, y2: VelocityField, z: VelocityField, params,
                     consts: OperatorConstants) -> MonotonicityGap:
    """Both sides of the local monotonicity estimate for G."""
    eps0 = epsilon0(params.nu, params.alpha, params.beta)
    d = y1 - y2
    pair = inner(op_G(y1, z, params) - op_G(y2, z, params), d)
    a2 = quartic_norm(y2 + z) ** 0.5
    shift = consts.safety * (consts.C_S3 * consts.C_K) ** 2 / (params.nu * eps0) * a2 * inner(d, d)
    Ad = sym_gradient(d).frob_sq()
    area = d.grid.cell_area
    rhs = params.nu * eps0 / 4.0 * area * np.sum(Ad) + params.beta * eps0 / 4.0 * area * np.sum(Ad**2)
    return MonotonicityGap(float(pair + shift), float(rhs))


def k_identity_terms(u: VelocityField, v: VelocityField, beta: float) -> tuple[float, float]:
    """(beta <K(u)-K(v), u-v>, beta/4 [int(|Au|^2-|Av|^2)^2 + int |A(u-v)|^2 (|Au|^2+|Av|^2)])."""
    area = u.grid.cell_area
    lhs = beta * inner(op_K(u) - op_K(v), u - v)
    au, av = sym_gradient(u).frob_sq(), sym_gradient(v).frob_sq()
    ad = sym_gradient(u - v).frob_sq()
    rhs = beta / 4.0 * area * (np.sum((au - av) ** 2) + np.sum(ad * (au + av)))
    return float(lhs), float(rhs)


def k_identity_residual(u: VelocityField, v: VelocityField, beta: float) -> float:
    """Absolute residual of the exact strong-monotonicity identity of K."""
    lhs, rhs = k_identity_terms(u, v, beta)
    return abs(lhs - rhs)


@dataclass(frozen=True)
class LipschitzProbe:
    bound_ratio: float
    numerator: float
    bound: float


def lipschitz_bound_terms(u: VelocityField, v: VelocityField, z: VelocityField, w: VelocityField,
                          params, consts: OperatorConstants) -> dict:
    """Right-hand sides of the local Lipschitz estimates for each part of G."""
    d = u - v
    nd, nw = norms(d), norms(w)
    au, av = quartic_norm(u + z) ** 0.25, quartic_norm(v + z) ** 0.25
    ad = quartic_norm(d) ** 0.25
    aw2 = np.sqrt(w.grid.cell_area * np.sum(sym_gradient(w).frob_sq()))
    aw4 = quartic_norm(w) ** 0.25
    return {
        "A": params.nu * nd["gradL2"] * nw["gradL2"],
        "B": consts.c_tri * consts.C_K * (_l4(u + z) * ad + nd["L4"] * av) * nw["gradL2"],
        "J": abs(params.alpha) * (au + av) * ad * aw2,
        "K": params.beta * (au**2 + av**2) * ad * aw4,
    }


def lipschitz_probe(u: VelocityField, v: VelocityField, z: VelocityField, params,
                    consts: OperatorConstants, tests: list[VelocityField] | None = None,
                    rng: np.random.Generator | None = None, n_tests: int = 8) -> LipschitzProbe:
    """Max over test fields w of |<G(u)-G(v), w>| / (sum of the Lipschitz bounds)."""
    if tests is None:
        rng = rng or np.random.default_rng(0)
        tests = [random_test_field(u.grid, rng) for _ in range(n_tests)]
    diff = op_G(u, z, params) - op_G(v, z, params)
    best = LipschitzProbe(0.0, 0.0, 0.0)
    for w in tests:
        num = abs(inner(diff, w))
        bound = sum(lipschitz_bound_terms(u, v, z, w, params, consts).values())
        ratio = num / bound if bound > 0 else 0.0
        if ratio >= best.bound_ratio:
            best = LipschitzProbe(float(ratio), float(num), float(bound))
    return best


def g_continuity_sequence(y: VelocityField, z: VelocityField, delta: VelocityField, params,
                          n_halvings: int = 8) -> list[tuple[float, float]]:
    """(||delta_k||_W14, ||G(y+delta_k) - G(y)||_2) along delta_k = delta / 2^k."""
    base = op_G(y, z, params)
    out = []
    for k in range(n_halvings):
        dk = delta / 2.0**k
        out.append((norms(dk)["W14"], l2_norm(op_G(y + dk, z, params) - base)))
    return out
