"""Element-loop assembly of the mass and diffusion matrices.

Matrices are first assembled on the open mesh (one dof per node) and then
closed periodically. ``wrapped`` identifies the last node with the first by
summing their rows and columns; ``multiplier`` keeps the open system and
carries a constraint row ``u_first - u_last = 0`` for the integrator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh1D, QuadratureRule, default_rule, shape_eval

PERIODIC_MODES = ("wrapped", "multiplier")


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemMatrices:
    """Assembled linear system ``M du/dt + Dmat u = f + f_BC``.

    ``element_dofs``, ``quad_weights``, ``phi`` and ``dphi_dx`` describe the
    quadrature points so the stochastic forcing can be sampled with exactly
    the rule used for the diffusion matrix.
    """

    mass: sp.csr_matrix
    diffusion: sp.csr_matrix
    volumes: np.ndarray
    bc_vector: np.ndarray
    periodic_mode: str
    diffusivity: float
    mesh: Mesh1D = field(repr=False)
    rule: QuadratureRule = field(repr=False)
    element_dofs: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    dphi_dx: np.ndarray = field(repr=False)
    constraint: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    @property
    def length(self) -> float:
        return self.mesh.length

    @property
    def operator(self) -> sp.csr_matrix:
        """Dissipative operator of the dynamics (the diffusion matrix here)."""
        return self.diffusion

    def periodic_mass(self) -> sp.csr_matrix:
        if self.periodic_mode == "wrapped":
            return self.mass
        return fold_matrix(self.mass)

    def periodic_volumes(self) -> np.ndarray:
        if self.periodic_mode == "wrapped":
            return self.volumes
        return fold_vector(self.volumes)

    def periodic_values(self, u: np.ndarray) -> np.ndarray:
        """Restrict a state vector to the N_n - 1 distinct periodic nodes."""
        u = np.asarray(u)
        if self.periodic_mode == "wrapped":
            return u
        return u[..., :-1]


def _fold_operator(n_open: int) -> sp.csr_matrix:
    n = n_open - 1
    rows = np.arange(n_open)
    cols = rows % n
    return sp.csr_matrix((np.ones(n_open), (rows, cols)), shape=(n_open, n))


def fold_matrix(a) -> sp.csr_matrix:
    """Sum the last row/column of an open-mesh matrix into the first."""
    P = _fold_operator(a.shape[0])
    return (P.T @ sp.csr_matrix(a) @ P).tocsr()


def fold_vector(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = v[:-1].copy()
    out[0] += v[-1]
    return out


def assemble(
    mesh: Mesh1D,
    diffusivity: float,
    rule: QuadratureRule | None = None,
    periodic_mode: str = "wrapped",
) -> SystemMatrices:
    if periodic_mode not in PERIODIC_MODES:
        raise AssemblyError(f"unknown periodic_mode {periodic_mode!r}")
    if not diffusivity > 0:
        raise AssemblyError(f"diffusion coefficient must be positive, got {diffusivity}")
    p = mesh.order
    if rule is None:
        rule = default_rule(p)
    if rule.exactness_degree < 2 * p:
        raise AssemblyError(
            f"quadrature of degree {rule.exactness_degree} cannot integrate the p{p} mass matrix"
        )

    h = mesh.element_length
    jac = 0.5 * h
    phi, dphi_dxi = shape_eval(p, rule.points)  # (n_q, p+1)
    dphi_dx = dphi_dxi / jac
    w = rule.weights * jac

    m_el = np.einsum("q,qa,qb->ab", w, phi, phi)
    k_el = diffusivity * np.einsum("q,qa,qb->ab", w, dphi_dx, dphi_dx)
    v_el = w @ phi

    nodes = mesh.element_nodes()
    n_open = mesh.num_nodes
    rows = np.repeat(nodes, p + 1, axis=1).ravel()
    cols = np.tile(nodes, (1, p + 1)).ravel()
    ne = mesh.num_elements
    # coo -> csr sums duplicate entries
    M = sp.coo_matrix((np.tile(m_el.ravel(), ne), (rows, cols)), shape=(n_open, n_open)).tocsr()
    K = sp.coo_matrix((np.tile(k_el.ravel(), ne), (rows, cols)), shape=(n_open, n_open)).tocsr()
    vol = np.bincount(nodes.ravel(), weights=np.tile(v_el, ne), minlength=n_open)

    constraint = None
    if periodic_mode == "wrapped":
        M = fold_matrix(M)
        K = fold_matrix(K)
        vol = fold_vector(vol)
        dofs = nodes % (n_open - 1)
    else:
        constraint = sp.csr_matrix(([1.0, -1.0], ([0, 0], [0, n_open - 1])), shape=(1, n_open))
        dofs = nodes

    M.sort_indices()
    K.sort_indices()
    try:
        spla.splu(M.tocsc())
    except RuntimeError as exc:
        raise AssemblyError("mass matrix is singular") from exc

    quad_weights = np.broadcast_to(w, (ne, len(w))).copy()
    for arr in (vol, dofs, quad_weights, phi, dphi_dx):
        arr.setflags(write=False)
    return SystemMatrices(
        mass=M,
        diffusion=K,
        volumes=vol,
        bc_vector=np.zeros(M.shape[0]),
        periodic_mode=periodic_mode,
        diffusivity=float(diffusivity),
        mesh=mesh,
        rule=rule,
        element_dofs=dofs,
        quad_weights=quad_weights,
        phi=phi,
        dphi_dx=dphi_dx,
        constraint=constraint,
    )


def total_mass(mats: SystemMatrices, u: np.ndarray) -> float:
    """Integral of the discrete concentration, ``volumes . u``."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != mats.n_dof:
        raise ValueError(f"state has {u.shape[-1]} entries, system has {mats.n_dof} dofs")
    return u @ mats.volumes


def write_triplets(path, a) -> None:
    """Dump a sparse matrix as ``row col value`` lines under a ``# rows cols nnz`` header."""
    a = sp.coo_matrix(a)
    order = np.lexsort((a.col, a.row))
    with open(path, "w") as fh:
        fh.write(f"# {a.shape[0]} {a.shape[1]} {a.nnz}\n")
        for i in order:
            fh.write(f"{a.row[i]} {a.col[i]} {a.data[i]:.17g}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "#":
            raise ValueError(f"{path}: missing '# rows cols nnz' header")
        n_rows, n_cols, nnz = (int(x) for x in header[1:4])
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if len(data) != nnz:
        raise ValueError(f"{path}: header promises {nnz} entries, found {len(data)}")
    return sp.csr_matrix(
        (data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n_rows, n_cols)
    )
