"""One-stage theta-scheme time stepping.

    u^{n+1} = [M + (1-a) dt Dmat]^{-1} [(M - a dt Dmat) u^n + sqrt(dt) f^n + dt f_BC]

``a = 1`` is explicit, ``a = 0`` implicit and ``a = 1/2`` Crank-Nicolson.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import noise as noise_mod
from .assembly import SystemMatrices


class IntegratorError(RuntimeError):
    pass


class StabilityError(IntegratorError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    alpha: float
    dt: float
    n_steps: int
    n_burn: int | None = None
    thinning: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise IntegratorError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.dt > 0:
            raise IntegratorError(f"time step must be positive, got {self.dt}")
        if self.n_steps < 0 or (self.n_burn is not None and self.n_burn < 0):
            raise IntegratorError("step counts must be non-negative")
        if self.thinning < 1:
            raise IntegratorError("thinning must be >= 1")

    def burn_in(self, length: float, diffusivity: float) -> int:
        """Explicit ``n_burn`` or one diffusion time ``L^2 / (D dt)``."""
        if self.n_burn is not None:
            return self.n_burn
        return math.ceil(length**2 / (diffusivity * self.dt) - 1e-9)


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def max_rate(operator, mass) -> float:
    """Largest generalized eigenvalue of the pencil (operator, mass)."""
    A = _dense(operator)
    B = _dense(mass)
    A = 0.5 * (A + A.T)
    return float(sla.eigh(A, 0.5 * (B + B.T), eigvals_only=True)[-1])


def stability_limit(operator, mass, alpha: float) -> float:
    """Largest stable ``dt``; ``inf`` for ``alpha <= 1/2``."""
    if alpha <= 0.5:
        return math.inf
    lam = max_rate(operator, mass)
    if lam <= 0:
        return math.inf
    return 2.0 / ((2.0 * alpha - 1.0) * lam)


def check_stability(operator, mass, alpha: float, dt: float, dx: float, diffusivity: float) -> None:
    dt_max = stability_limit(operator, mass, alpha)
    if dt > dt_max * (1.0 + 1e-12):
        beta = diffusivity * dt / dx**2
        beta_max = diffusivity * dt_max / dx**2
        raise StabilityError(
            f"alpha={alpha} is unstable at beta={beta:.4g}; stability bound beta_max={beta_max:.4g}"
        )


class ThetaStepper:
    """Factorizes the constant left-hand side once; ``step`` is then a solve.

    In ``multiplier`` mode the periodic constraint row is appended and the
    multiplier is dropped from the returned state.
    """

    def __init__(self, mats: SystemMatrices, alpha: float, dt: float):
        self.mats = mats
        self.alpha = float(alpha)
        self.dt = float(dt)
        M, K = mats.mass, mats.diffusion
        lhs = (M + (1.0 - alpha) * dt * K).tocsc()
        self.rhs_matrix = (M - alpha * dt * K).tocsr()
        self.n = mats.n_dof
        if mats.constraint is not None:
            c = mats.constraint * lhs.diagonal().mean()
            lhs = sp.bmat([[lhs, c.T], [c, None]], format="csc")
        self._lhs = lhs
        try:
            self._lu = spla.splu(lhs)
        except RuntimeError as exc:
            raise IntegratorError(f"factorization of the system matrix failed: {exc}") from exc
        self._sqdt = math.sqrt(dt)
        self._bc = dt * mats.bc_vector

    def initial_state(self, u: np.ndarray) -> np.ndarray:
        return np.array(u, dtype=float)

    def field(self, state: np.ndarray) -> np.ndarray:
        return state

    def rhs(self, u, f):
        b = self.rhs_matrix @ u + self._sqdt * f + self._bc
        if self._lhs.shape[0] != self.n:
            b = np.concatenate([b, np.zeros(self._lhs.shape[0] - self.n)])
        return b

    def step(self, u: np.ndarray, f: np.ndarray) -> np.ndarray:
        return self._lu.solve(self.rhs(u, f))[: self.n]

    def residual(self, u_old, f, u_new) -> float:
        """Relative residual of the linear solve that produced ``u_new``."""
        b = self.rhs(u_old, f)
        x = self._lu.solve(b)
        x[: self.n] = u_new
        return float(np.linalg.norm(self._lhs @ x - b) / max(np.linalg.norm(b), 1e-300))


def step(mats: SystemMatrices, config: IntegratorConfig, u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Single theta step. Factorizes on every call; use :class:`ThetaStepper` in loops."""
    out = ThetaStepper(mats, config.alpha, config.dt).step(np.asarray(u, float), np.asarray(f, float))
    if not np.all(np.isfinite(out)):
        raise IntegratorError("non-finite state after step")
    return out


@dataclass
class Trajectory:
    steps: np.ndarray
    times: np.ndarray
    mass: np.ndarray
    states: np.ndarray | None = field(default=None, repr=False)
    dt: float = 0.0
    thinning: int = 1
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps)

    def write_csv(self, path, include_states: bool = True) -> None:
        """``step,time,mass,u_0,...`` (state columns only if stored and requested)."""
        with_states = include_states and self.states is not None
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step", "time", "mass"]
            if with_states:
                header += [f"u_{i}" for i in range(self.states.shape[1])]
            w.writerow(header)
            for j in range(len(self.steps)):
                row = [str(int(self.steps[j])), repr(float(self.times[j])), repr(float(self.mass[j]))]
                if with_states:
                    row += [repr(float(x)) for x in self.states[j]]
                w.writerow(row)

    @classmethod
    def read_csv(cls, path, dt: float | None = None, thinning: int | None = None) -> "Trajectory":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        if header[:3] != ["step", "time", "mass"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        states = data[:, 3:] if data.shape[1] > 3 else None
        steps = data[:, 0].astype(np.int64)
        if dt is None:
            dt = float((data[1, 1] - data[0, 1]) / (steps[1] - steps[0])) if len(steps) > 1 else 0.0
        if thinning is None:
            thinning = int(steps[1] - steps[0]) if len(steps) > 1 else 1
        return cls(steps, data[:, 1], data[:, 2], states, dt, thinning)


def run(
    mats: SystemMatrices,
    noise_model: noise_mod.NoiseModel,
    config: IntegratorConfig,
    u0: float,
    *,
    stepper=None,
    observers=(),
    store_states: bool = True,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Burn-in followed by ``config.n_steps`` collected steps from ``u = u0``.

    Every ``config.thinning``-th collected state is recorded and handed to
    each callable in ``observers``. ``stepper`` defaults to a
    :class:`ThetaStepper`; any object with ``initial_state``, ``step`` and
    ``field`` works (see :mod:`fluctfem.fourth_order`).
    """
    if config.alpha > 0.5:
        check_stability(
            mats.operator if stepper is None else stepper.operator,
            mats.mass,
            config.alpha,
            config.dt,
            mats.mesh.node_spacing,
            mats.diffusivity,
        )
    if stepper is None:
        stepper = ThetaStepper(mats, config.alpha, config.dt)
    if rng is None:
        rng = noise_mod.rng_stream(config.seed)
    n_burn = config.burn_in(mats.length, mats.diffusivity)
    s = config.thinning
    n_keep = config.n_steps // s

    state = stepper.initial_state(np.full(mats.n_dof, float(u0)))
    vol = mats.volumes
    steps = np.empty(n_keep, dtype=np.int64)
    mass = np.empty(n_keep)
    states = np.empty((n_keep, mats.n_dof)) if store_states else None
    clamped = 0
    t_start = time.perf_counter()

    j = 0
    for n in range(n_burn + config.n_steps):
        u = stepper.field(state)
        f, nc = noise_mod.sample(noise_model, mats, u, rng)
        clamped += nc
        state = stepper.step(state, f)
        k = n + 1 - n_burn
        if k > 0 and k % s == 0:
            u = stepper.field(state)
            if not np.all(np.isfinite(u)):
                raise IntegratorError(f"non-finite state at step {n + 1}")
            steps[j] = n + 1
            mass[j] = vol @ u
            if store_states:
                states[j] = u
            for obs in observers:
                obs(u)
            j += 1
        elif (n & 1023) == 0 and not np.all(np.isfinite(state)):
            raise IntegratorError(f"non-finite state at step {n + 1}")

    diagnostics = {
        "n_burn": n_burn,
        "n_steps": config.n_steps,
        "clamp_count": clamped,
        "wall_time": time.perf_counter() - t_start,
        "mass_std": float(np.std(mass)) if n_keep else 0.0,
    }
    return Trajectory(steps, steps * config.dt, mass, states, config.dt, s, diagnostics)
