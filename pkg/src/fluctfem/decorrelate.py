"""Mass-preserving map from FE coefficients to decorrelated coefficients.

With ``M = U S U^T`` and ``y = U S^{-1/2} U^T dV`` the decorrelated volumes
are ``y_i^2`` and ``Q = diag(y)^{-1} U S^{1/2} U^T``. Then ``Q M^{-1} Q^T`` is
diagonal, so a state with covariance ``u0 M^{-1}`` is mapped to one with
covariance ``u0 diag(1 / y^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import SystemMatrices

DEFAULT_THRESHOLD = 1e-5


class DecorrelationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecorrelationMap:
    Q: sp.csr_matrix
    volumes_tilde: np.ndarray
    threshold: float
    eigvals: np.ndarray = field(repr=False)
    eigvecs: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    Q_dense: np.ndarray = field(repr=False)

    @property
    def n_dof(self) -> int:
        return self.Q.shape[0]

    @property
    def nnz(self) -> int:
        return self.Q.nnz

    def sqrt_mass(self) -> np.ndarray:
        """The symmetric factor ``A_phi = U S^{1/2} U^T``."""
        return (self.eigvecs * np.sqrt(self.eigvals)) @ self.eigvecs.T


def build_map(
    mats_or_mass,
    threshold: float = DEFAULT_THRESHOLD,
    volumes: np.ndarray | None = None,
) -> DecorrelationMap:
    """Decorrelation map for the periodic solution basis.

    Parameters
    ----------
    mats_or_mass : SystemMatrices or array_like
        Assembled system (its periodic mass matrix and volumes are used) or a
        bare symmetric positive definite Gram matrix.
    threshold : float
        Entries of ``Q`` with magnitude below this are zeroed last. ``0``
        keeps the dense map.
    volumes : ndarray, optional
        Equivalent volumes; required with a bare matrix, defaults to its row
        sums.
    """
    if isinstance(mats_or_mass, SystemMatrices):
        M = mats_or_mass.periodic_mass().toarray()
        dV = mats_or_mass.periodic_volumes()
    else:
        M = mats_or_mass.toarray() if sp.issparse(mats_or_mass) else np.asarray(mats_or_mass, float)
        dV = M.sum(axis=1) if volumes is None else np.asarray(volumes, float)
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    if evals[0] <= 0.0:
        raise DecorrelationError(f"Gram matrix is not positive definite (eigenvalue {evals[0]:.3e})")
    y = evecs @ ((evecs.T @ dV) / np.sqrt(evals))
    if np.any(y == 0.0) or np.any(np.abs(y) < 1e-14 * np.abs(y).max()):
        raise DecorrelationError("a decorrelated volume vanishes; the map would be singular")
    # diag(y) rather than diag(|y|) keeps U_* = I and mass preservation if a y_i < 0
    Q = (evecs * np.sqrt(evals)) @ evecs.T / y[:, None]
    Q_kept = Q.copy()
    if threshold > 0:
        Q_kept[np.abs(Q_kept) < threshold] = 0.0
    for arr in (evals, evecs, y, Q):
        arr.setflags(write=False)
    vt = y**2
    vt.setflags(write=False)
    return DecorrelationMap(sp.csr_matrix(Q_kept), vt, float(threshold), evals, evecs, y, Q)


def apply(dmap: DecorrelationMap, u: np.ndarray) -> np.ndarray:
    """``Q u``; ``u`` may be a single state or a stack of states (last axis)."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != dmap.n_dof:
        raise ValueError(f"state has {u.shape[-1]} entries, map expects {dmap.n_dof}")
    if u.ndim == 1:
        return dmap.Q @ u
    return (dmap.Q @ u.reshape(-1, dmap.n_dof).T).T.reshape(u.shape)


def decorrelation_residual(dmap: DecorrelationMap, mats_or_mass) -> float:
    """Largest off-diagonal of ``Q M^{-1} Q^T`` relative to its diagonal.

    ``M^{-1}`` is the shape of the equilibrium covariance, so this measures
    how much spatial correlation survives the (possibly thresholded) map.
    """
    if isinstance(mats_or_mass, SystemMatrices):
        M = mats_or_mass.periodic_mass().toarray()
    else:
        M = mats_or_mass.toarray() if sp.issparse(mats_or_mass) else np.asarray(mats_or_mass, float)
    Q = dmap.Q.toarray()
    C = Q @ np.linalg.solve(M, Q.T)
    diag = np.abs(np.diag(C))
    if diag.min() == 0.0:
        raise DecorrelationError("mapped covariance has a zero diagonal entry (threshold too large?)")
    scale = np.sqrt(np.outer(diag, diag))
    off = np.abs(C) / scale
    np.fill_diagonal(off, 0.0)
    return float(off.max())
