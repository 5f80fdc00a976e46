"""Inverse modeling of viscoelastic materials with coupled flow.

Forward FEM/FVM simulators, reverse-mode gradients through their implicit
solvers, neural-network constitutive relations, and L-BFGS-B calibration
drivers.
"""

from . import autodiff, constitutive, flow, mesh, nn, optim

__all__ = ["autodiff", "constitutive", "flow", "mesh", "nn", "optim"]
__version__ = "0.1.0"
