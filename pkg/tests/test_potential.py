import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hessmart.errors import OutsideHullError
from hessmart.measures import DiscreteMeasure
from hessmart.oracles import Bernoulli, LogNormal, Normal, Poisson, gauss_hermite_normal
from hessmart.potential import (
    LegendreConfig,
    Potential,
    covariance_at,
    grad_log_mgf,
    hess_log_mgf,
    legendre,
    log_mgf,
)

NORMAL = Potential(Normal(1.0).nu())
GAMMA = Potential(LogNormal(0.5).nu())


def test_log_mgf_examples():
    assert log_mgf(NORMAL, [2.0]) == pytest.approx(2.0, abs=1e-10)
    assert log_mgf(NORMAL, [0.0]) == pytest.approx(0.0, abs=1e-14)
    assert log_mgf(GAMMA, [1.0]) == pytest.approx(2 * math.log(2), abs=1e-8)


def test_log_mass_tracked():
    p = Potential(NORMAL.nu, np.full(NORMAL.nu.size, math.log(3.0)))
    assert p.log_mass() == pytest.approx(math.log(3.0), abs=1e-13)
    huge = Potential(NORMAL.nu, np.full(NORMAL.nu.size, 800.0))
    assert huge.log_mass() == pytest.approx(800.0, abs=1e-10)


def test_derivative_examples():
    np.testing.assert_allclose(grad_log_mgf(NORMAL, [0.0]), NORMAL.nu.mean(), atol=1e-14)
    for k in (-1.5, 0.3, 2.0):
        assert hess_log_mgf(NORMAL, [k])[0, 0] == pytest.approx(1.0, abs=1e-9)
    b = Potential(Bernoulli(0.5, 1).nu())
    assert grad_log_mgf(b, [0.0])[0] == pytest.approx(0.5, abs=1e-15)
    assert hess_log_mgf(b, [0.0])[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_legendre_examples():
    r = legendre(NORMAL, [3.0])
    assert r.value == pytest.approx(4.5, abs=1e-8)
    assert r.slope[0] == pytest.approx(3.0, abs=1e-8)
    assert r.covariance[0, 0] == pytest.approx(1.0, abs=1e-8)
    r = legendre(GAMMA, [2.0])
    assert r.value == pytest.approx(2 * (1 - math.log(2)), abs=1e-7)
    assert r.slope[0] == pytest.approx(1.0, abs=1e-7)
    r = legendre(GAMMA, GAMMA.nu.mean())
    assert abs(r.value) < 1e-10 and np.abs(r.slope).max() < 1e-8


def test_covariance_examples():
    assert covariance_at(GAMMA, [1.0])[0, 0] == pytest.approx(0.5, rel=1e-6)
    for dt in (0.25, 1.0):
        p = Potential(Normal(dt).nu())
        assert covariance_at(p, [0.7])[0, 0] == pytest.approx(dt, rel=1e-8)
    pois = Potential(Poisson(1.0).nu(x_max=4.0))
    assert covariance_at(pois, [1.0])[0, 0] == pytest.approx(1.0, rel=1e-6)


def test_outside_hull_rejected():
    p = Potential(DiscreteMeasure([0.0, 1.0], [0.5, 0.5]))
    with pytest.raises(OutsideHullError):
        legendre(p, [1.5])


def test_batch_matches_single():
    X = np.linspace(0.6, 2.5, 7)[:, None]
    batch = GAMMA.legendre_batch(X)
    for i, x in enumerate(X):
        r = GAMMA.legendre(x)
        assert batch.values[i] == pytest.approx(r.value, abs=1e-10)


def _random_potential(seed, n):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(n + 2, 12))
    atoms = rng.normal(size=(m, n))
    w = rng.dirichlet(np.ones(m))
    offsets = rng.normal(scale=2.0, size=m)
    return Potential(DiscreteMeasure(atoms, w), offsets), rng


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_legendre_duality(seed, n):
    p, rng = _random_potential(seed, n)
    lam = rng.dirichlet(np.ones(p.nu.size))
    x = 0.8 * lam @ p.atoms + 0.2 * p.atoms.mean(axis=0)
    r = p.legendre(x, LegendreConfig(tol=1e-11))
    assert x @ r.slope - p.log_mgf(r.slope) == pytest.approx(r.value, abs=1e-8)
    np.testing.assert_allclose(p.grad_log_mgf(r.slope), x, atol=1e-8)
    cov = r.covariance
    np.testing.assert_allclose(cov, cov.T, atol=1e-10)
    np.linalg.cholesky(cov)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_derivatives_match_finite_differences(seed, n):
    p, rng = _random_potential(seed, n)
    k = rng.normal(size=n)
    h = 1e-5
    E = np.eye(n) * h
    fd_g = np.array([(p.log_mgf(k + e) - p.log_mgf(k - e)) / (2 * h) for e in E])
    fd_H = np.array([(p.grad_log_mgf(k + e) - p.grad_log_mgf(k - e)) / (2 * h) for e in E])
    g, H = p.grad_log_mgf(k), p.hess_log_mgf(k)
    assert np.abs(fd_g - g).max() <= 1e-5 * max(1.0, np.abs(g).max())
    assert np.abs(fd_H - H).max() <= 1e-5 * max(1.0, np.abs(H).max())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.floats(0.01, 0.99))
def test_log_mgf_convex(seed, n, t):
    p, rng = _random_potential(seed, n)
    k1, k2 = rng.normal(scale=2.0, size=(2, n))
    lhs = p.log_mgf(t * k1 + (1 - t) * k2)
    assert lhs <= t * p.log_mgf(k1) + (1 - t) * p.log_mgf(k2) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_shift_changes_value_only(seed, c):
    p, rng = _random_potential(seed, 2)
    q = p.shifted(np.full(p.nu.size, c))
    k = rng.normal(size=2)
    assert q.log_mgf(k) == pytest.approx(p.log_mgf(k) + c, abs=1e-10 * max(1, abs(c)))
    x = 0.5 * p.atoms.mean(axis=0) + 0.5 * p.grad_log_mgf(np.zeros(2))
    rp, rq = p.legendre(x), q.legendre(x)
    np.testing.assert_allclose(rq.slope, rp.slope, atol=1e-8)
    np.testing.assert_allclose(rq.covariance, rp.covariance, atol=1e-10)


def test_gauss_hermite_helper_moments():
    m = gauss_hermite_normal(64, 1.0, 2.0)
    assert m.mean()[0] == pytest.approx(1.0, abs=1e-12)
    assert m.expectation(lambda y: (y[0] - 1.0) ** 2) == pytest.approx(4.0, rel=1e-12)
