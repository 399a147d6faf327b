"""Uniform 1D meshes, Lagrange shape functions and Gauss rules.

The reference element is [-1, 1]. Local node ordering for quadratic
elements is (left vertex, midside, right vertex), so global nodes sorted by
coordinate interleave vertices and midside nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_ORDERS = (1, 2)

# Gauss-Legendre rules hard-coded to full precision; n -> (points, weights).
_GAUSS = {
    1: ([0.0], [2.0]),
    2: ([-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0)], [1.0, 1.0]),
    3: ([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)], [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]),
    4: (
        [
            -np.sqrt(3.0 / 7.0 + 2.0 / 7.0 * np.sqrt(6.0 / 5.0)),
            -np.sqrt(3.0 / 7.0 - 2.0 / 7.0 * np.sqrt(6.0 / 5.0)),
            np.sqrt(3.0 / 7.0 - 2.0 / 7.0 * np.sqrt(6.0 / 5.0)),
            np.sqrt(3.0 / 7.0 + 2.0 / 7.0 * np.sqrt(6.0 / 5.0)),
        ],
        [
            (18.0 - np.sqrt(30.0)) / 36.0,
            (18.0 + np.sqrt(30.0)) / 36.0,
            (18.0 + np.sqrt(30.0)) / 36.0,
            (18.0 - np.sqrt(30.0)) / 36.0,
        ],
    ),
}

# default rule per element order: exact for the mass-matrix integrand
DEFAULT_POINTS = {1: 2, 2: 3}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh of ``num_elements`` elements of order ``order`` on [0, L]."""

    length: float
    num_elements: int
    order: int
    node_coords: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def node_spacing(self) -> float:
        return self.length / (self.num_nodes - 1)

    @property
    def element_length(self) -> float:
        return self.length / self.num_elements

    def element_nodes(self) -> np.ndarray:
        """(num_elements, order + 1) array of global node indices."""
        p = self.order
        start = p * np.arange(self.num_elements)
        return start[:, None] + np.arange(p + 1)[None, :]

    def element_bounds(self, e: int) -> tuple[float, float]:
        h = self.element_length
        return e * h, (e + 1) * h


def build_mesh(length: float, num_elements: int, order: int) -> Mesh1D:
    if order not in SUPPORTED_ORDERS:
        raise MeshError(f"element order must be 1 or 2, got {order}")
    if num_elements < 2:
        raise MeshError(f"need at least 2 elements for periodic wrapping, got {num_elements}")
    if not length > 0:
        raise MeshError(f"domain length must be positive, got {length}")
    num_nodes = order * num_elements + 1
    coords = np.linspace(0.0, float(length), num_nodes)
    coords.setflags(write=False)
    return Mesh1D(float(length), int(num_elements), int(order), coords)


def reference_nodes(order: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, order + 1)


def shape_eval(order: int, xi):
    """Lagrange shape functions and their xi-derivatives on [-1, 1].

    Parameters
    ----------
    order : int
        Polynomial order, 1 or 2.
    xi : float or array_like
        Reference coordinate(s) in [-1, 1].

    Returns
    -------
    values, gradients : ndarray
        Arrays of shape ``(..., order + 1)`` where the leading shape is that
        of ``xi``.
    """
    if order not in SUPPORTED_ORDERS:
        raise MeshError(f"element order must be 1 or 2, got {order}")
    xi = np.asarray(xi, dtype=float)
    if np.any(np.abs(xi) > 1.0 + 1e-12):
        raise MeshError("reference coordinate outside [-1, 1]")
    if order == 1:
        values = np.stack([0.5 * (1.0 - xi), 0.5 * (1.0 + xi)], axis=-1)
        grads = np.stack([np.full_like(xi, -0.5), np.full_like(xi, 0.5)], axis=-1)
    else:
        values = np.stack([0.5 * xi * (xi - 1.0), 1.0 - xi * xi, 0.5 * xi * (xi + 1.0)], axis=-1)
        grads = np.stack([xi - 0.5, -2.0 * xi, xi + 0.5], axis=-1)
    return values, grads


def gauss_rule(n_points: int) -> QuadratureRule:
    if n_points not in _GAUSS:
        raise MeshError(f"unsupported number of Gauss points: {n_points}")
    pts, wts = _GAUSS[n_points]
    points = np.array(pts)
    weights = np.array(wts)
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points, weights, 2 * n_points - 1)


def default_rule(order: int) -> QuadratureRule:
    return gauss_rule(DEFAULT_POINTS[order])
