"""Exact steady-state statistics of the discrete update map.

For ``u <- G u + sqrt(dt) A^{-1} f`` with ``cov(f) = C_ff`` the stationary
covariance solves ``C = G C G^T + dt A^{-1} C_ff A^{-T}``. It is found by the
doubling iteration (``G`` squared every round). On periodic meshes ``G`` keeps
the constant vector (total mass is conserved), so that neutral direction is
deflated first and its variance is set explicitly through ``mass_variance``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .spectra import SpectrumResult

MAX_ITER = 64


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class CovariancePrediction:
    C: np.ndarray = field(repr=False)
    residual: float
    alpha: float
    dt: float
    matrices_hash: str
    spectral_radius: float
    iterations: int


def _dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.array(a, dtype=float)


def _hash(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def update_map(system, alpha: float, dt: float):
    """Dense ``(G, A)`` with ``A = M + (1-a) dt K`` and ``G = A^{-1}(M - a dt K)``."""
    M = _dense(system.mass)
    K = _dense(system.operator)
    A = M + (1.0 - alpha) * dt * K
    G = np.linalg.solve(A, M - alpha * dt * K)
    return G, A


def steady_covariance(
    system,
    alpha: float,
    dt: float,
    c_ff,
    mass_variance: float = 0.0,
    tol: float = 1e-15,
) -> CovariancePrediction:
    """Stationary covariance of the theta scheme.

    Parameters
    ----------
    system : SystemMatrices or MixedSystem
        Needs ``mass`` and ``operator`` (and is assumed periodic-wrapped).
    alpha, dt : float
        Scheme parameters.
    c_ff : array_like
        Covariance of one forcing draw, e.g. ``2 u0 Dmat``.
    mass_variance : float
        Variance of the total mass ``dV^T u``. A run started from a uniform
        state conserves mass exactly, hence the default 0. ``u0 L`` (the
        Poisson value) gives the solution ``u0 M^{-1}`` of the balance
        equation at ``alpha = 1/2``.
    """
    if getattr(system, "periodic_mode", "wrapped") != "wrapped":
        raise OracleError("the oracle supports wrapped periodic systems only")
    M = _dense(system.mass)
    K = _dense(system.operator)
    c_ff = _dense(c_ff)
    n = M.shape[0]
    G, A = update_map(system, alpha, dt)
    Ainv = np.linalg.inv(A)
    Qn = dt * Ainv @ c_ff @ Ainv.T
    Qn = 0.5 * (Qn + Qn.T)

    ones = np.ones(n)
    vol = M @ ones
    total = vol @ ones
    neutral = np.linalg.norm(K @ ones) <= 1e-12 * max(np.abs(K).max(), 1e-300) * n
    G_def = G - np.outer(ones, vol) / total if neutral else G
    rho = float(np.abs(np.linalg.eigvals(G_def)).max())
    if rho >= 1.0:
        raise OracleError(f"update map is not contractive: spectral radius {rho:.6f}")

    C = Qn.copy()
    Gk = G_def
    it = 0
    for it in range(1, MAX_ITER + 1):
        inc = Gk @ C @ Gk.T
        C = C + inc
        Gk = Gk @ Gk
        if np.linalg.norm(inc) <= tol * np.linalg.norm(C) or not np.any(Gk):
            break
    else:
        raise OracleError(f"doubling iteration did not converge (spectral radius {rho:.6f})")
    C = 0.5 * (C + C.T)
    if neutral and mass_variance:
        C = C + mass_variance * np.outer(ones, ones) / total**2
    res = np.linalg.norm(C - (G @ C @ G.T + Qn)) / max(np.linalg.norm(C), 1e-300)
    return CovariancePrediction(C, float(res), float(alpha), float(dt), _hash(M, K, c_ff), rho, it)


def balance_residual(system, C, alpha: float, dt: float, c_ff) -> float:
    """Relative mismatch in ``K C M + M C K + dt (1 - 2a) K C K = C_ff``."""
    M = _dense(system.mass)
    K = _dense(system.operator)
    c_ff = _dense(c_ff)
    lhs = K @ C @ M.T + M @ C @ K.T + dt * (1.0 - 2.0 * alpha) * K @ C @ K.T
    return float(np.linalg.norm(lhs - c_ff) / np.linalg.norm(c_ff))


def _phases(n: int) -> np.ndarray:
    j = np.arange(n // 2 + 1)
    return np.exp(-2j * np.pi * np.outer(j, np.arange(n)) / n)


def spectrum_from_covariance(C, weights, length: float, dx: float | None = None) -> SpectrumResult:
    """Expected ``|U_j|^2`` for a zero-mean state with covariance ``C``."""
    C = _dense(C)
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if C.shape != (n, n):
        raise ValueError(f"covariance is {C.shape}, weights have length {n}")
    F = _phases(n) * w  # rows: conj(phi_j)^T W
    S = np.einsum("jn,nm,jm->j", F, C, F.conj()).real / length
    k = 2.0 * np.pi * np.arange(n // 2 + 1) / length
    return SpectrumResult(k, S, np.zeros_like(S), length / n if dx is None else dx, 0, {"source": "oracle"})


def mapped_covariance(C, Q) -> np.ndarray:
    C = _dense(C)
    Q = _dense(Q)
    if Q.shape[1] != C.shape[0]:
        raise ValueError(f"map is {Q.shape}, covariance is {C.shape}")
    return Q @ C @ Q.T


def _sum_geometric(x, n: int):
    """``sum_{l=1}^{n-1} (1 - l/n) x^l`` elementwise."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    near = np.abs(1.0 - x) < 1e-12
    xs = x[~near]
    out[~near] = xs / (1 - xs) - xs * (1 - xs**n) / (n * (1 - xs) ** 2)
    out[near] = (n - 1) / 2.0
    return out


def estimator_std(system, alpha, dt, C, weights, length, n_samples: int, thinning: int = 1, transform=None):
    """Standard deviation of the static structure factor estimate over a run.

    Exact for a stationary Gaussian state: uses the lagged covariances
    ``G^l C`` in the eigenbasis of the pencil (operator, mass).
    ``transform`` (e.g. a decorrelation matrix) is applied to the states
    before the weighted DFT.
    """
    M = _dense(system.mass)
    K = _dense(system.operator)
    lam, V = sla.eigh(0.5 * (K + K.T), 0.5 * (M + M.T))
    g = (1.0 - alpha * dt * lam) / (1.0 + (1.0 - alpha) * dt * lam)
    g = g**thinning
    Gam = V.T @ M @ _dense(C) @ M @ V
    gam = np.diag(Gam)
    if np.linalg.norm(Gam - np.diag(gam)) > 1e-8 * np.linalg.norm(Gam):
        raise OracleError("covariance is not diagonal in the eigenbasis of the update map")
    T = V if transform is None else _dense(transform) @ V
    w = np.asarray(weights, dtype=float)
    F = _phases(len(w)) * w / math.sqrt(length)
    amp = F @ T  # (n_modes, n): U_j = sum_r amp[j, r] xi_r
    gg = np.outer(g, g)
    tail = 1.0 + 2.0 * _sum_geometric(gg, n_samples)
    out = np.empty(amp.shape[0])
    for j, a in enumerate(amp):
        c = np.abs(a) ** 2 * gam
        p = a**2 * gam
        var = (c @ tail @ c + (np.conj(p) @ tail @ p).real) / n_samples
        out[j] = math.sqrt(max(var, 0.0))
    return out


def expected_error_metric(std, S_ref) -> float:
    """Expected e_FE of an unbiased Gaussian estimate with per-mode ``std`` (k = 0 excluded)."""
    std = np.asarray(std, dtype=float)[1:]
    S_ref = np.asarray(S_ref, dtype=float)[1:]
    return float(np.mean(math.sqrt(2.0 / math.pi) * std / np.abs(S_ref)))
