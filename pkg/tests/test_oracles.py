import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from hessmart.errors import DomainError
from hessmart.oracles import (
    Bernoulli,
    LogNormal,
    Normal,
    Poisson,
    StochVol2D,
    copula_obstruction_moment,
)
from hessmart.potential import Potential


def test_psi_phi_examples():
    f = Normal(1.0)
    assert f.psi(2.0) == 2.0 and f.phi(3.0) == 4.5
    assert Poisson(1.0).psi(math.log(2)) == pytest.approx(1.0, abs=1e-15)
    assert Bernoulli(0.5, 1).psi(0.0) == pytest.approx(0.0, abs=1e-15)


def test_kernel_examples():
    k = Bernoulli(0.5, 2).kernel(0.25)
    np.testing.assert_allclose(k.atoms[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_allclose(k.weights, [0.5625, 0.375, 0.0625], atol=1e-15)
    z = Poisson(1.0).kernel(0.0)
    assert z.size == 1 and z.atoms[0, 0] == 0.0
    for x in (0.6, 1.0, 1.7):
        k = LogNormal(0.5).kernel(x)
        assert k.mean()[0] == pytest.approx(x, abs=1e-9)
        var = k.expectation(lambda y: (y[0] - x) ** 2)
        assert var == pytest.approx(0.5 * x * x, abs=1e-6)


def test_domain_errors():
    with pytest.raises(DomainError):
        LogNormal(0.5).phi(-1.0)
    with pytest.raises(DomainError):
        Poisson(1.0).kernel(0.5)
    with pytest.raises(DomainError):
        Bernoulli(1.5)
    with pytest.raises(DomainError):
        StochVol2D(beta=0.5)


@pytest.mark.parametrize(
    "fam,lo,hi",
    [(Normal(0.7, 0.2), -1.5, 2.0), (LogNormal(0.3), 0.5, 2.5), (Poisson(0.5), 0.3, 3.0), (Bernoulli(0.3, 5), 0.05, 0.95)],
)
def test_quadrature_matches_closed_form(fam, lo, hi):
    p = Potential(fam.nu())
    for x in np.linspace(lo, hi, 9):
        r = p.legendre([x])
        assert r.value == pytest.approx(float(fam.phi(x)), abs=1e-6)
        assert r.covariance[0, 0] == pytest.approx(float(fam.covariance(x)), abs=1e-5)


@pytest.mark.parametrize("fam,x", [(Bernoulli(0.4, 3), 1 / 3), (Poisson(0.5), 1.5), (Normal(0.5), 0.3)])
def test_kernel_martingale(fam, x):
    assert fam.kernel(x).mean()[0] == pytest.approx(x, abs=1e-12)


@pytest.mark.parametrize(
    "fam,k_box,x_box",
    [
        (Normal(0.5, 0.1), (-40, 40), (-50, 50)),
        (LogNormal(0.5), (-40, 1.999), (1e-9, 50)),
        (Poisson(1.0), (-40, 10), (1e-9, 50)),
    ],
)
def test_legendre_involution(fam, k_box, x_box):
    # phi = sup_k (k x - psi(k)) and psi = sup_x (k x - phi(x)), both closed forms
    opts = {"xatol": 1e-12}
    for x in np.linspace(0.3, 2.5, 5):
        res = optimize.minimize_scalar(lambda k: fam.psi(k) - k * x, bounds=k_box, method="bounded", options=opts)
        assert -res.fun == pytest.approx(float(fam.phi(x)), abs=1e-8)
    for k in np.linspace(-1.5, 1.2, 5):
        res = optimize.minimize_scalar(lambda x: fam.phi(x) - k * x, bounds=x_box, method="bounded", options=opts)
        assert -res.fun == pytest.approx(float(fam.psi(k)), abs=1e-8)


def test_sv2d_reference_point():
    f = StochVol2D(0.75, 1.0, 1.0, 0.0)
    np.testing.assert_allclose(f.covariance(1.0, 1.0), [[2.0, 1.0], [1.0, 1.0]], atol=1e-14)
    assert f.rho2(1.0, 1.0) == pytest.approx(0.5, abs=1e-14)
    # finite-difference Hessian of phi, inverted
    h = 1e-4
    def ph(u, v):
        return float(f.phi(u, v))
    H = np.empty((2, 2))
    H[0, 0] = (ph(1 + h, 1) - 2 * ph(1, 1) + ph(1 - h, 1)) / h**2
    H[1, 1] = (ph(1, 1 + h) - 2 * ph(1, 1) + ph(1, 1 - h)) / h**2
    H[0, 1] = H[1, 0] = (ph(1 + h, 1 + h) - ph(1 + h, 1 - h) - ph(1 - h, 1 + h) + ph(1 - h, 1 - h)) / (4 * h * h)
    np.testing.assert_allclose(np.linalg.inv(H), [[2, 1], [1, 1]], atol=1e-5)


def test_sv2d_cev_limit():
    u, v, b, s = 1.3, 0.8, 0.75, 0.9
    f = StochVol2D(b, s, 1e-6, 0.2)
    C = f.covariance(u, v)
    assert abs(C[0, 1]) < 1e-11
    assert C[0, 0] == pytest.approx(s**2 * (u / (v + 0.2)) ** (2 * b) * (v + 0.2), rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.05, 2.0), st.floats(0.05, 2.0),
    st.floats(0.55, 0.95), st.floats(0.2, 2.0), st.floats(0.2, 2.0), st.floats(0.0, 1.0),
)
def test_sv2d_inverse_hessian(u, v, beta, sigma, alpha, c):
    f = StochVol2D(beta, sigma, alpha, c)
    inv = np.linalg.inv(f.hessian(u, v))
    C = f.covariance(u, v)
    assert np.abs(inv - C).max() <= 1e-10 * np.abs(C).max()


def test_copula_constant():
    alpha = 0.5 * (math.log(3) + 0.1)
    val = copula_obstruction_moment(alpha)
    assert val == pytest.approx(math.exp(2 * alpha), abs=1e-6)
    assert val + 1 > 4
