"""Stochastic forcing with fluctuation-dissipation-consistent covariance.

Random numbers come from numpy's ``PCG64`` bit generator and
``Generator.standard_normal`` (ziggurat method). A given seed reproduces the
same deviate sequence on the same numpy build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import SystemMatrices

NOISE_MODES = ("nonlinear_quadrature", "linearized_quadrature", "linearized_decomposition", "off")


class NoiseError(RuntimeError):
    pass


def rng_stream(seed: int) -> np.random.Generator:
    """Private generator for one trajectory."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators for ``n`` parallel trajectories."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass(frozen=True)
class NoiseModel:
    mode: str
    u0: float = 0.0
    A_D: sp.csr_matrix | None = field(default=None, repr=False)
    drop_tolerance: float = 1e-12

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise NoiseError(f"unknown noise mode {self.mode!r}")
        if self.mode == "linearized_decomposition" and self.A_D is None:
            raise NoiseError("linearized_decomposition needs A_D (see compute_AD)")


def make_noise_model(mats: SystemMatrices, mode: str, u0: float, drop_tolerance: float = 1e-12):
    A_D = compute_AD(mats, drop_tolerance) if mode == "linearized_decomposition" else None
    return NoiseModel(mode, float(u0), A_D, drop_tolerance)


def _quadrature_forcing(mats: SystemMatrices, u_q: np.ndarray, z: np.ndarray) -> np.ndarray:
    # f_i = -sqrt(2D) sum_k sqrt(w_k u_k) z_k dphi_i(x_k), scattered over elements
    amp = np.sqrt(2.0 * mats.diffusivity * mats.quad_weights * u_q) * z
    contrib = -amp @ mats.dphi_dx  # (n_el, p+1)
    return np.bincount(mats.element_dofs.ravel(), weights=contrib.ravel(), minlength=mats.n_dof)


def sample_forcing_nonlinear(mats: SystemMatrices, u: np.ndarray, rng: np.random.Generator):
    """One draw of the multiplicative forcing, amplitude from ``u`` at t_n.

    Negative interpolated concentrations are clamped to zero inside the
    square root.

    Returns
    -------
    f : ndarray
        Forcing vector of length ``mats.n_dof``.
    n_clamped : int
        Number of quadrature points that were clamped.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mats.n_dof,):
        raise ValueError(f"state has shape {u.shape}, expected ({mats.n_dof},)")
    u_q = u[mats.element_dofs] @ mats.phi.T
    neg = u_q < 0.0
    n_clamped = int(np.count_nonzero(neg))
    if n_clamped:
        u_q = np.where(neg, 0.0, u_q)
    z = rng.standard_normal(mats.quad_weights.shape)
    return _quadrature_forcing(mats, u_q, z), n_clamped


def sample_forcing_linearized_quadrature(mats: SystemMatrices, u0: float, rng: np.random.Generator):
    u_q = np.full(mats.quad_weights.shape, float(u0))
    z = rng.standard_normal(mats.quad_weights.shape)
    return _quadrature_forcing(mats, u_q, z)


def compute_AD(mats_or_matrix, drop_tolerance: float = 1e-12) -> sp.csr_matrix:
    """Symmetric square root ``A_D = U sqrt(S) U^T`` of the diffusion matrix.

    Accepts a :class:`SystemMatrices` or a bare symmetric matrix. Entries
    smaller than ``drop_tolerance`` in magnitude are zeroed afterwards.
    """
    if isinstance(mats_or_matrix, SystemMatrices):
        D = mats_or_matrix.diffusion
    else:
        D = mats_or_matrix
    D = D.toarray() if sp.issparse(D) else np.asarray(D, dtype=float)
    scale = np.linalg.norm(D, 2) if D.size else 0.0
    if scale == 0.0:
        return sp.csr_matrix(D.shape)
    evals, evecs = np.linalg.eigh(0.5 * (D + D.T))
    if evals.min() < -1e-10 * scale:
        raise NoiseError(f"diffusion matrix is not positive semidefinite (eigenvalue {evals.min():.3e})")
    # rounding-level eigenvalues (the constant null mode) would leak mass through the square root
    evals[evals < 10 * len(evals) * np.finfo(float).eps * scale] = 0.0
    A = (evecs * np.sqrt(evals)) @ evecs.T
    A[np.abs(A) < drop_tolerance] = 0.0
    return sp.csr_matrix(A)


def sample_forcing_linearized(model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """``f = sqrt(2 u0) A_D z`` with ``z`` standard normal per dof."""
    if model.A_D is None:
        raise NoiseError("noise model carries no A_D factor")
    z = rng.standard_normal(model.A_D.shape[1])
    return np.sqrt(2.0 * model.u0) * (model.A_D @ z)


def sample(model: NoiseModel, mats: SystemMatrices, u: np.ndarray, rng: np.random.Generator):
    """Dispatch on ``model.mode``; returns ``(f, n_clamped)``."""
    if model.mode == "nonlinear_quadrature":
        return sample_forcing_nonlinear(mats, u, rng)
    if model.mode == "linearized_quadrature":
        return sample_forcing_linearized_quadrature(mats, model.u0, rng), 0
    if model.mode == "linearized_decomposition":
        return sample_forcing_linearized(model, rng), 0
    return np.zeros(mats.n_dof), 0
