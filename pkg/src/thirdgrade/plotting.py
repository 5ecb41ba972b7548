"""Report figures (Agg backend, PNG output)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import VelocityField, center_values, curl  # noqa: E402

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def style(width_pt: float = 400.0, aspect: float = GOLDEN) -> None:
    inches = width_pt / 72.27
    plt.rcParams.update({
        "font.family": "serif",
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "figure.figsize": [inches, inches * aspect],
        "savefig.dpi": 150,
    })


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ledger(step_times: np.ndarray, ledger: dict, path: str | Path) -> Path:
    style()
    fig, ax = plt.subplots()
    t = step_times[:-1]
    for name in ("viscous", "beta_term", "pairing", "forcing"):
        ax.plot(t, ledger[name], label=name, lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("rate")
    ax.legend(frameon=False)
    ax2 = ax.twinx()
    ax2.plot(step_times, np.append(ledger["kinetic"], ledger["kinetic_end"]), "k--", lw=0.8)
    ax2.set_ylabel(r"$\|y\|_2^2$")
    return _save(fig, path)


def plot_vorticity(v: VelocityField, path: str | Path, title: str = "") -> Path:
    g = v.grid
    style(aspect=max(0.25, g.Ly / g.Lx + 0.15))
    fig, ax = plt.subplots()
    w = curl(v).reshape(g.nx - 1, g.ny - 1)
    im = ax.imshow(w.T, origin="lower", extent=(0, g.Lx, 0, g.Ly), cmap="RdBu_r", aspect="equal")
    c = center_values(v)
    xc, yc = np.meshgrid(g.x_centers, g.y_centers, indexing="ij")
    stride = max(1, g.nx // 32)
    ax.quiver(xc[::stride, ::stride], yc[::stride, ::stride],
              c[0].reshape(g.nx, g.ny)[::stride, ::stride], c[1].reshape(g.nx, g.ny)[::stride, ::stride],
              width=0.002)
    fig.colorbar(im, ax=ax, shrink=0.8, label="vorticity")
    ax.set_title(title)
    return _save(fig, path)


def plot_series(x: np.ndarray, series: dict, path: str | Path, xlabel: str, ylabel: str,
                logy: bool = False) -> Path:
    style()
    fig, ax = plt.subplots()
    for name, y in series.items():
        ax.plot(x, y, marker="o", ms=3, lw=1.0, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_tail_table(ks: np.ndarray, masses: np.ndarray, horizons: np.ndarray, path: str | Path) -> Path:
    style()
    fig, ax = plt.subplots()
    for n, h in enumerate(horizons):
        ax.semilogy(ks, np.maximum(masses[n], 1e-300), lw=1.0, label=f"t={h:g}")
    ax.set_xlabel("k")
    ax.set_ylabel("max tail mass")
    ax.set_ylim(bottom=max(1e-16, float(np.min(masses[masses > 0])) if np.any(masses > 0) else 1e-16))
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ou_autocorrelation(lags: np.ndarray, empirical: np.ndarray, theory: np.ndarray,
                            path: str | Path) -> Path:
    style()
    fig, ax = plt.subplots()
    ax.plot(lags, theory, "k-", lw=1.0, label="exp(-a tau)")
    ax.plot(lags, empirical, "o", ms=3, label="sample")
    ax.set_xlabel("tau")
    ax.set_ylabel("autocorrelation")
    ax.legend(frameon=False)
    return _save(fig, path)
