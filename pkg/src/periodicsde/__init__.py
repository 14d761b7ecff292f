"""Periodic measures of T-periodic SDEs: simulation, closed forms for the forced
OU process, drift certificates, ergodicity diagnostics and a periodic
Fokker-Planck solver."""

__version__ = "0.1.0"

from .errors import ConvergenceError, ExplodedPathError, NumericalError
from .sde_core import (PolyDriftSpec, PolyPotential, PotentialSpec, SdeModel, TrigPoly,
                       apply_generator, build_duffing, build_gradient_model, build_langevin_model,
                       build_poly_drift_model, generic_model)
from .ou_analytic import GaussianMeasure, OuModel
