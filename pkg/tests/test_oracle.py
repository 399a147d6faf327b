import numpy as np
import pytest

from fluctfem import noise, oracle, spectra
from fluctfem.assembly import assemble
from fluctfem.decorrelate import build_map
from fluctfem.integrator import IntegratorConfig, run
from fluctfem.mesh import build_mesh

U0 = 100.0


def _sys(n_el, order=1, length=1.0):
    return assemble(build_mesh(length, n_el, order), 1.0)


@pytest.mark.parametrize("order", [1, 2])
def test_fdt_at_crank_nicolson(order):
    m = _sys(6, order)
    pred = oracle.steady_covariance(m, 0.5, 1e-3, 2 * U0 * m.diffusion, mass_variance=U0 * m.length)
    target = U0 * np.linalg.inv(m.mass.toarray())
    assert np.linalg.norm(pred.C - target) / np.linalg.norm(target) < 1e-12
    assert pred.residual < 1e-13


def test_default_keeps_mass_fixed():
    m = _sys(8)
    C = oracle.steady_covariance(m, 0.5, 1e-3, 2 * U0 * m.diffusion).C
    target = U0 * (np.linalg.inv(m.mass.toarray()) - 1.0 / m.length)
    np.testing.assert_allclose(C, target, atol=1e-10 * np.abs(target).max())
    assert abs(m.volumes @ C @ m.volumes) < 1e-9


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7])
def test_balance_equation(alpha):
    m = _sys(10, 2)
    c_ff = 2 * U0 * m.diffusion
    C = oracle.steady_covariance(m, alpha, 1e-4, c_ff).C
    assert oracle.balance_residual(m, C, alpha, 1e-4, c_ff) < 1e-10


def test_alpha_shifts_spectrum_per_mode():
    # per-mode variance (u0 / m) / (1 + (1 - 2 a) lam dt / 2)
    m = _sys(12)
    dx = 1 / 12
    dt = 0.1 * dx**2
    c_ff = 2 * U0 * m.diffusion
    S = {a: oracle.spectrum_from_covariance(oracle.steady_covariance(m, a, dt, c_ff).C, m.volumes, 1.0).values
         for a in (0.0, 0.5, 1.0)}
    th = np.arange(7) * 2 * np.pi / 12
    lam = 6 * (2 - 2 * np.cos(th)) / ((4 + 2 * np.cos(th)) * dx**2)
    base = 3 * U0 / (2 + np.cos(th))
    for a in (0.0, 1.0):
        np.testing.assert_allclose(S[a][1:], base[1:] / (1 + (1 - 2 * a) * lam[1:] * dt / 2), rtol=1e-10)
    assert np.all(S[0.0][1:] < S[0.5][1:]) and np.all(S[0.5][1:] < S[1.0][1:])


def test_unstable_map_rejected():
    m = _sys(10)
    dt = 0.25 * (1 / 10) ** 2
    with pytest.raises(oracle.OracleError, match="not contractive"):
        oracle.steady_covariance(m, 1.0, dt, 2 * U0 * m.diffusion)


def test_multiplier_rejected():
    m = assemble(build_mesh(1.0, 4, 1), 1.0, periodic_mode="multiplier")
    with pytest.raises(oracle.OracleError):
        oracle.steady_covariance(m, 0.5, 1e-3, np.eye(5))


def test_pushforward_matches_p1_closed_form():
    m = _sys(20)
    C = U0 * np.linalg.inv(m.mass.toarray())
    S = oracle.spectrum_from_covariance(C, m.volumes, 1.0)
    np.testing.assert_allclose(S.values[1:], spectra.theory_fe_p1(U0, S.kdx[1:]), rtol=1e-10)


def test_mapped_pushforward_is_flat():
    m = _sys(10, 2)
    d = build_map(m, 0.0)
    C = U0 * np.linalg.inv(m.mass.toarray())
    S = oracle.spectrum_from_covariance(oracle.mapped_covariance(C, d.Q_dense), d.volumes_tilde, 1.0)
    np.testing.assert_allclose(S.values, U0, rtol=1e-10)
    with pytest.raises(ValueError):
        oracle.mapped_covariance(C, np.eye(3))


def test_prediction_metadata_is_stable():
    m = _sys(6)
    a = oracle.steady_covariance(m, 0.5, 1e-3, 2 * U0 * m.diffusion)
    b = oracle.steady_covariance(m, 0.5, 1e-3, 2 * U0 * m.diffusion)
    assert a.matrices_hash == b.matrices_hash and len(a.matrices_hash) == 16
    assert a.spectral_radius < 1 and a.iterations > 0


def test_estimator_std_against_replicas():
    m = _sys(8)
    dt, n_samples, reps = 1e-2, 100, 300
    C = oracle.steady_covariance(m, 0.5, dt, 2 * U0 * m.diffusion).C
    std = oracle.estimator_std(m, 0.5, dt, C, m.volumes, 1.0, n_samples)
    nm = noise.make_noise_model(m, "linearized_decomposition", U0)
    rng = noise.rng_stream(123)
    est = []
    for _ in range(reps):
        tr = run(m, nm, IntegratorConfig(0.5, dt, n_samples, n_burn=200), U0, rng=rng)
        est.append(spectra.static_structure_factor(tr, m.volumes, 1.0).values)
    emp = np.std(est, axis=0, ddof=1)
    # sampling error of a std estimate from 300 replicas is about 4 percent
    np.testing.assert_allclose(emp[1:], std[1:], rtol=0.2)


def test_expected_error_metric():
    assert oracle.expected_error_metric([9.0, 1.0, 2.0], [9.0, 10.0, 10.0]) == pytest.approx(
        np.sqrt(2 / np.pi) * 0.15
    )
