import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluctfem.assembly import assemble
from fluctfem.decorrelate import DecorrelationError, apply, build_map, decorrelation_residual
from fluctfem.mesh import build_mesh


def test_p1_map_frozen():
    m = assemble(build_mesh(1.0, 4, 1), 1.0)
    d = build_map(m, 0.0)
    np.testing.assert_allclose(
        d.Q_dense[0], [0.8025858577612696, 0.10566243270259348, -0.01391072316645661, 0.10566243270259348],
        rtol=1e-12,
    )
    np.testing.assert_allclose(d.volumes_tilde, 0.25, rtol=1e-14)


def test_p2_volumes_tilde_frozen():
    d = build_map(assemble(build_mesh(1.0, 4, 2), 1.0), 0.0)
    np.testing.assert_allclose(d.volumes_tilde, np.tile([0.07497671508129738, 0.1750232849187028], 4), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(1, 2), st.floats(0.2, 5.0))
def test_map_invariants(n_el, order, length):
    m = assemble(build_mesh(length, n_el, order), 1.0)
    d = build_map(m, 0.0)
    M = m.mass.toarray()
    n = m.n_dof
    # volumes sum to L and Q preserves the constant state and total mass
    assert abs(d.volumes_tilde.sum() - length) < 1e-12 * length
    np.testing.assert_allclose(d.Q_dense @ np.ones(n), 1.0, atol=1e-12)
    np.testing.assert_allclose(d.volumes_tilde @ d.Q_dense, m.volumes, atol=1e-13 * length)
    # Q M^-1 Q^T = diag(1 / dVt)
    C = d.Q_dense @ np.linalg.solve(M, d.Q_dense.T)
    np.testing.assert_allclose(C, np.diag(1.0 / d.volumes_tilde), atol=1e-10 * C.max())
    # the symmetric factor squares to M
    np.testing.assert_allclose(d.sqrt_mass() @ d.sqrt_mass(), M, atol=1e-13 * np.abs(M).max())


def test_threshold_sparsifies_and_keeps_mass():
    m = assemble(build_mesh(1.0, 60, 1), 1.0)
    dense = build_map(m, 0.0)
    sparse = build_map(m, 1e-5)
    assert sparse.nnz < dense.nnz
    assert np.abs(sparse.Q.toarray()[sparse.Q.toarray() != 0]).min() >= 1e-5
    u = np.random.default_rng(0).uniform(1, 2, m.n_dof)
    mass_in = m.volumes @ u
    assert abs(sparse.volumes_tilde @ apply(sparse, u) - mass_in) < 1e-4 * mass_in


def test_residual_dense_and_thresholded():
    m = assemble(build_mesh(1.0, 40, 2), 1.0)
    assert decorrelation_residual(build_map(m, 0.0), m) < 1e-12
    r = decorrelation_residual(build_map(m, 1e-5), m)
    assert 0 < r < 1e-3


def test_apply_stacked_states():
    m = assemble(build_mesh(1.0, 10, 1), 1.0)
    d = build_map(m)
    U = np.random.default_rng(1).standard_normal((3, 4, 10))
    out = apply(d, U)
    np.testing.assert_allclose(out[2, 1], d.Q @ U[2, 1])
    with pytest.raises(ValueError):
        apply(d, np.ones(9))


def test_multiplier_mats_use_folded_system():
    mesh = build_mesh(1.0, 8, 1)
    a = build_map(assemble(mesh, 1.0), 0.0)
    b = build_map(assemble(mesh, 1.0, periodic_mode="multiplier"), 0.0)
    np.testing.assert_allclose(a.Q_dense, b.Q_dense, atol=1e-14)


def test_bare_matrix_and_errors():
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    d = build_map(M, 0.0)
    np.testing.assert_allclose(d.Q_dense @ np.ones(2), 1.0)
    with pytest.raises(DecorrelationError):
        build_map(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DecorrelationError):
        decorrelation_residual(build_map(M, 10.0), M)
