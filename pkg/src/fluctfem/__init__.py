"""Stochastic finite elements for 1D fluctuating diffusion equations."""

from .assembly import SystemMatrices, assemble, total_mass
from .decorrelate import DecorrelationMap, apply, build_map, decorrelation_residual
from .fourth_order import MixedSystem, assemble_mixed, run_mixed
from .integrator import IntegratorConfig, ThetaStepper, Trajectory, run, step
from .mesh import Mesh1D, QuadratureRule, build_mesh, default_rule, gauss_rule, shape_eval
from .noise import NoiseModel, compute_AD, make_noise_model, rng_stream

__version__ = "0.1.0"
