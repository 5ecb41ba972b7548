"""Numerical lab for stochastically forced third-grade fluids on a 2D channel."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.1.0"

from .mesh import Grid, VelocityField, build_grid
from .solver import PhysParams, integrate

__all__ = ["Grid", "VelocityField", "build_grid", "PhysParams", "integrate", "__version__"]
