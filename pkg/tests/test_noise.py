import numpy as np
import pytest
import scipy.sparse as sp

from fluctfem import noise
from fluctfem.assembly import assemble
from fluctfem.mesh import build_mesh


@pytest.fixture(scope="module")
def p1():
    return assemble(build_mesh(1.0, 4, 1), 1.0)


def test_nonlinear_forcing_frozen(p1):
    f, n = noise.sample_forcing_nonlinear(p1, np.full(4, 100.0), noise.rng_stream(0))
    np.testing.assert_allclose(
        f, [-45.14911300914576, 15.033948195884609, -18.38794171695896, 48.50310653022011], rtol=1e-13
    )
    assert n == 0


def test_forcing_sums_to_zero(p1):
    # gradients of a partition of unity sum to zero, so the forcing moves no mass
    rng = noise.rng_stream(5)
    for _ in range(10):
        f, _ = noise.sample_forcing_nonlinear(p1, rng.uniform(1, 50, 4), rng)
        assert abs(f.sum()) < 1e-12 * np.abs(f).max()


def test_negative_values_clamped(p1):
    f, n = noise.sample_forcing_nonlinear(p1, np.array([-1.0, -2.0, -1.0, -3.0]), noise.rng_stream(1))
    assert n == p1.quad_weights.size
    np.testing.assert_array_equal(f, 0.0)


def test_linearized_quadrature_matches_nonlinear_at_uniform_state(p1):
    a, _ = noise.sample_forcing_nonlinear(p1, np.full(4, 7.0), noise.rng_stream(3))
    b = noise.sample_forcing_linearized_quadrature(p1, 7.0, noise.rng_stream(3))
    np.testing.assert_allclose(a, b, rtol=1e-14)


@pytest.mark.parametrize("order", [1, 2])
def test_AD_squares_to_diffusion(order):
    m = assemble(build_mesh(1.0, 12, order), 0.7)
    A = noise.compute_AD(m, drop_tolerance=0.0).toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-13)
    np.testing.assert_allclose(A @ A.T, m.diffusion.toarray(), atol=1e-11 * abs(m.diffusion).max())


def test_AD_rejects_indefinite():
    with pytest.raises(noise.NoiseError):
        noise.compute_AD(np.diag([1.0, -1.0]))


def test_AD_of_zero_matrix():
    assert noise.compute_AD(sp.csr_matrix((3, 3))).nnz == 0


def test_linearized_decomposition_covariance(p1):
    model = noise.make_noise_model(p1, "linearized_decomposition", 50.0)
    rng = noise.rng_stream(11)
    f = np.array([noise.sample_forcing_linearized(model, rng) for _ in range(20000)])
    C = np.cov(f.T, bias=True)
    target = 100.0 * p1.diffusion.toarray()
    assert np.abs(C - target).max() < 0.05 * np.abs(target).max()


def test_off_mode_is_zero(p1):
    f, n = noise.sample(noise.NoiseModel("off"), p1, np.ones(4), noise.rng_stream(0))
    np.testing.assert_array_equal(f, 0.0)


def test_unknown_mode():
    with pytest.raises(noise.NoiseError):
        noise.NoiseModel("white")
    with pytest.raises(noise.NoiseError):
        noise.NoiseModel("linearized_decomposition", 1.0)


def test_streams_are_reproducible_and_independent():
    a = noise.rng_stream(9).standard_normal(5)
    b = noise.rng_stream(9).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    s1, s2 = noise.split_streams(9, 2)
    assert not np.allclose(s1.standard_normal(5), s2.standard_normal(5))


def test_wrong_state_shape(p1):
    with pytest.raises(ValueError):
        noise.sample_forcing_nonlinear(p1, np.ones(5), noise.rng_stream(0))
