"""Mixed (u, w) formulation of the fourth-order diffusion model.

    M du/dt + D K (u - c w) = f,     M w + K u = 0,     c = (ell0 / 2 pi)^2

``w`` is the weak Laplacian of ``u``, so eliminating it gives the effective
single-field operator ``D K + D c K M^{-1} K`` and every Fourier mode relaxes
at rate ``D k^2 (1 + k^2 / k0^2)``. Noise enters the u-equation only, with the
linearized covariance ``2 u0 D K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import integrator
from .assembly import SystemMatrices, assemble
from .mesh import Mesh1D, QuadratureRule


class ConstraintError(RuntimeError):
    pass


@dataclass(frozen=True)
class MixedSystem:
    base: SystemMatrices
    ell0: float
    stiffness: sp.csr_matrix = field(repr=False)
    operator: np.ndarray = field(repr=False)

    @property
    def k0(self) -> float:
        return 2.0 * math.pi / self.ell0

    @property
    def coupling(self) -> float:
        return (self.ell0 / (2.0 * math.pi)) ** 2

    @property
    def mass(self):
        return self.base.mass

    @property
    def diffusivity(self) -> float:
        return self.base.diffusivity

    @property
    def n_dof(self) -> int:
        return self.base.n_dof

    @property
    def periodic_mode(self) -> str:
        return self.base.periodic_mode


def assemble_mixed(
    mesh: Mesh1D, diffusivity: float, ell0: float, rule: QuadratureRule | None = None
) -> MixedSystem:
    if not ell0 >= 0:
        raise ValueError(f"correlation length must be non-negative, got {ell0}")
    base = assemble(mesh, diffusivity, rule, "wrapped")
    K = (base.diffusion / diffusivity).tocsr()
    c = (ell0 / (2.0 * math.pi)) ** 2
    M = base.mass.toarray()
    Kd = K.toarray()
    A = diffusivity * Kd + diffusivity * c * Kd @ np.linalg.solve(M, Kd)
    A = 0.5 * (A + A.T)
    A.setflags(write=False)
    return MixedSystem(base, float(ell0), K, A)


class MixedStepper:
    """Theta step of the coupled system; state is ``concat(u, w)``.

    ``monolithic=True`` factorizes the 2N block system once. Otherwise ``w``
    is eliminated (Schur complement) and only the u-system is solved.
    """

    def __init__(self, system: MixedSystem, alpha: float, dt: float, monolithic: bool = True, check: bool = True):
        self.system = system
        self.alpha = float(alpha)
        self.dt = float(dt)
        self.monolithic = monolithic
        self.check = check
        self.n = system.n_dof
        self.operator = system.operator
        D = system.diffusivity
        c = system.coupling
        M = system.mass.tocsr()
        K = system.stiffness
        self._M, self._K = M, K
        self._sqdt = math.sqrt(dt)
        self._Mlu = spla.splu(M.tocsc())
        try:
            if monolithic:
                lhs = sp.bmat(
                    [[M + (1 - alpha) * dt * D * K, -(1 - alpha) * dt * D * c * K], [K, M]], format="csc"
                )
                self._lu = spla.splu(lhs)
                self._Bu = (M - alpha * dt * D * K).tocsr()
                self._Bw = (alpha * dt * D * c * K).tocsr()
            else:
                Md = M.toarray()
                self._lu = sla.lu_factor(Md + (1 - alpha) * dt * system.operator)
                self._B = Md - alpha * dt * system.operator
        except (RuntimeError, ValueError) as exc:
            raise integrator.IntegratorError(f"factorization failed: {exc}") from exc
        self.max_constraint_residual = 0.0

    def laplacian(self, u):
        return -self._Mlu.solve(self._K @ u)

    def initial_state(self, u):
        u = np.asarray(u, dtype=float)
        return np.concatenate([u, self.laplacian(u)])

    def field(self, state):
        return state[: self.n]

    def constraint_residual(self, state) -> float:
        u, w = state[: self.n], state[self.n :]
        Ku = self._K @ u
        scale = max(np.linalg.norm(Ku), 1e-14 * abs(self._K).max() * np.linalg.norm(u), 1e-300)
        return float(np.linalg.norm(self._M @ w + Ku) / scale)

    def step(self, state, f):
        u, w = state[: self.n], state[self.n :]
        if self.monolithic:
            rhs = np.concatenate([self._Bu @ u + self._Bw @ w + self._sqdt * f, np.zeros(self.n)])
            out = self._lu.solve(rhs)
        else:
            u_new = sla.lu_solve(self._lu, self._B @ u + self._sqdt * f)
            out = np.concatenate([u_new, self.laplacian(u_new)])
        if self.check:
            r = self.constraint_residual(out)
            self.max_constraint_residual = max(self.max_constraint_residual, r)
            if r > 1e-10:
                raise ConstraintError(f"constraint residual {r:.3e} exceeds 1e-10")
        return out


def step_mixed(system: MixedSystem, config: integrator.IntegratorConfig, state, f):
    return MixedStepper(system, config.alpha, config.dt).step(np.asarray(state, float), np.asarray(f, float))


def run_mixed(system: MixedSystem, noise_model, config: integrator.IntegratorConfig, u0: float, **kwargs):
    """:func:`fluctfem.integrator.run` with a :class:`MixedStepper`; trajectory holds ``u`` only."""
    stepper = MixedStepper(system, config.alpha, config.dt, kwargs.pop("monolithic", True))
    traj = integrator.run(system.base, noise_model, config, u0, stepper=stepper, **kwargs)
    traj.diagnostics["max_constraint_residual"] = stepper.max_constraint_residual
    return traj


def mode_decay_rate(system, j: int) -> float:
    """Slowest relaxation rate among modes of Bloch wavenumber ``2 pi j / L``.

    The pencil (operator, mass) is reduced onto the Bloch vectors of each
    node sublattice (one for p1, vertex and midside for p2); the smallest
    eigenvalue is the acoustic branch.
    """
    base = system.base if isinstance(system, MixedSystem) else system
    A = system.operator
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    M = base.mass.toarray()
    n = base.n_dof
    p = base.mesh.order
    phase = np.exp(2j * np.pi * j * np.arange(n) / n)
    B = np.zeros((n, p), dtype=complex)
    for s in range(p):
        B[s::p, s] = phase[s::p]
    Ar = B.conj().T @ A @ B
    Mr = B.conj().T @ M @ B
    return float(sla.eigh(Ar, Mr, eigvals_only=True)[0])
