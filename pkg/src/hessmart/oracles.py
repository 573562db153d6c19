"""Closed-form Hessian martingale families.

Each one-dimensional family is specified by its local volatility ``sigma(x)``
and a time step ``dt``; the convex potential satisfies
``phi''(x) = 1 / (sigma(x)^2 dt)`` and is gauge-fixed by
``phi(x_*) = phi'(x_*) = 0``.  The families expose the analytic log-partition
``psi``, the potential ``phi``, the one-step covariance, the transition
kernel, and a discretization ``nu()`` of the reference measure that can be
fed to :class:`hessmart.potential.Potential`.

Also here: the two-dimensional stochastic-volatility CEV generalization and a
small quadrature check used to show that locally Gaussian copula models miss
some arbitrage-free cross prices.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy import special, stats

from .errors import DomainError
from .measures import DiscreteMeasure


def _check_dt(dt):
    if not (dt > 0 and math.isfinite(dt)):
        raise DomainError(f"dt must be positive, got {dt!r}")
    return float(dt)


def gauss_hermite_normal(n_nodes, mean=0.0, std=1.0) -> DiscreteMeasure:
    """``n_nodes``-point Gauss-Hermite discretization of N(mean, std^2)."""
    z, w = hermegauss(n_nodes)
    w = w / w.sum()
    keep = w > 0
    return DiscreteMeasure(mean + std * z[keep], w[keep] / w[keep].sum())


def log_gauss_legendre(logpdf, lo, hi, n_nodes) -> DiscreteMeasure:
    """Gauss-Legendre quadrature in ``s = log y`` on ``[lo, hi]`` for a density on R_+.

    ``logpdf`` is the log-density in ``y``; the Jacobian ``y`` is included.
    """
    t, w = leggauss(n_nodes)
    a, b = math.log(lo), math.log(hi)
    s = 0.5 * (b - a) * t + 0.5 * (b + a)
    y = np.exp(s)
    logw = np.log(w * 0.5 * (b - a)) + logpdf(y) + s
    logw -= logw.max()
    wt = np.exp(logw)
    keep = wt > 0
    return DiscreteMeasure(y[keep], wt[keep] / wt[keep].sum())


class Normal:
    """Brownian step: constant volatility, ``psi(k) = dt k^2 / 2``."""

    def __init__(self, dt=1.0, x_star=0.0):
        self.dt = _check_dt(dt)
        self.x_star = float(x_star)

    def psi(self, k):
        return 0.5 * self.dt * np.asarray(k, dtype=float) ** 2 + self.x_star * np.asarray(k)

    def phi(self, x):
        return (np.asarray(x, dtype=float) - self.x_star) ** 2 / (2.0 * self.dt)

    def slope(self, x):
        return (np.asarray(x, dtype=float) - self.x_star) / self.dt

    def covariance(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.dt)

    def nu(self, n_nodes=128) -> DiscreteMeasure:
        return gauss_hermite_normal(n_nodes, self.x_star, math.sqrt(self.dt))

    def kernel(self, x, n_nodes=128) -> DiscreteMeasure:
        return gauss_hermite_normal(n_nodes, float(x), math.sqrt(self.dt))


class LogNormal:
    """Proportional volatility ``sigma(x) = x``; the reference law is a gamma law.

    ``psi(k) = -log(1 - k dt) / dt`` on ``k < 1/dt`` and
    ``phi(x) = (x - 1 - log x) / dt``, with ``x_* = 1``.
    """

    x_star = 1.0

    def __init__(self, dt=0.5):
        self.dt = _check_dt(dt)
        self.shape = 1.0 / self.dt

    def psi(self, k):
        k = np.asarray(k, dtype=float)
        if np.any(k * self.dt >= 1.0):
            raise DomainError(f"psi undefined for k >= 1/dt = {1 / self.dt}")
        return -np.log1p(-k * self.dt) / self.dt

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("phi defined on x > 0")
        return (x - 1.0 - np.log(x)) / self.dt

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        return (1.0 - 1.0 / x) / self.dt

    def covariance(self, x):
        return self.dt * np.asarray(x, dtype=float) ** 2

    def _gamma_logpdf(self, scale):
        a = self.shape
        return lambda y: (a - 1.0) * np.log(y) - y / scale - special.gammaln(a) - a * math.log(scale)

    def nu(self, n_nodes=512, x_range=(0.25, 4.0), tail=1e-14) -> DiscreteMeasure:
        """Quadrature of the gamma reference law covering tilts to means in ``x_range``."""
        lo = stats.gamma.ppf(tail, self.shape, scale=self.dt * x_range[0])
        hi = stats.gamma.isf(tail, self.shape, scale=self.dt * x_range[1])
        return log_gauss_legendre(self._gamma_logpdf(self.dt), lo, hi, n_nodes)

    def kernel(self, x, n_nodes=512, tail=1e-14) -> DiscreteMeasure:
        x = float(x)
        if x <= 0:
            raise DomainError("LogNormal kernel needs x > 0")
        scale = self.dt * x
        lo = stats.gamma.ppf(tail, self.shape, scale=scale)
        hi = stats.gamma.isf(tail, self.shape, scale=scale)
        return log_gauss_legendre(self._gamma_logpdf(scale), lo, hi, n_nodes)


class Poisson:
    """Volatility ``sqrt(x)``: a Markov chain on the lattice ``dt * N_0``.

    ``psi(k) = (exp(k dt) - 1) / dt`` and ``phi(x) = (x log x - x + 1) / dt``.
    """

    x_star = 1.0

    def __init__(self, dt=1.0):
        self.dt = _check_dt(dt)

    def psi(self, k):
        return np.expm1(np.asarray(k, dtype=float) * self.dt) / self.dt

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise DomainError("phi defined on x >= 0")
        return (special.xlogy(x, x) - x + 1.0) / self.dt

    def slope(self, x):
        return np.log(np.asarray(x, dtype=float)) / self.dt

    def covariance(self, x):
        return self.dt * np.asarray(x, dtype=float)

    def _lattice(self, lam, x_max):
        top = x_max / self.dt
        n_max = int(math.ceil(top + 12.0 * math.sqrt(top) + 40.0))
        n = np.arange(n_max + 1)
        return n, stats.poisson.pmf(n, lam)

    def nu(self, x_max=4.0) -> DiscreteMeasure:
        n, w = self._lattice(1.0 / self.dt, x_max)
        keep = w > 0
        return DiscreteMeasure(n[keep] * self.dt, w[keep] / w[keep].sum())

    def kernel(self, x) -> DiscreteMeasure:
        x = float(x)
        if x < 0 or abs(x / self.dt - round(x / self.dt)) > 1e-9:
            raise DomainError(f"state {x} is not on the lattice dt*N_0")
        if x == 0:
            return DiscreteMeasure.dirac([0.0])
        n, w = self._lattice(x / self.dt, x)
        keep = w > 0
        return DiscreteMeasure(n[keep] * self.dt, w[keep] / w[keep].sum())


class Bernoulli:
    """Volatility ``sqrt(x (1 - x))`` on ``(0, 1)`` with ``dt = 1/N``.

    The one-step kernel is ``Binomial(N, x) / N``.  ``q`` only enters ``psi``
    and ``phi`` (as the gauge point ``x_* = q``); the kernel is ``q``-free.
    """

    def __init__(self, q=0.5, N=1):
        if not 0.0 < q < 1.0:
            raise DomainError(f"q must be in (0, 1), got {q!r}")
        if int(N) != N or N < 1:
            raise DomainError(f"N must be a positive integer, got {N!r}")
        self.q = float(q)
        self.N = int(N)
        self.dt = 1.0 / self.N

    @property
    def x_star(self):
        return self.q

    def psi(self, k):
        k = np.asarray(k, dtype=float)
        q = self.q
        # log((1-q) + q e^{k dt}) written stably for large |k|
        a = np.log1p(-q) + np.zeros_like(k)
        b = math.log(q) + k * self.dt
        return np.logaddexp(a, b) / self.dt

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x < 0) | (x > 1)):
            raise DomainError("phi defined on [0, 1]")
        q = self.q
        return (special.xlogy(x, x / q) + special.xlogy(1 - x, (1 - x) / (1 - q))) / self.dt

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        q = self.q
        return (np.log(x / q) - np.log((1 - x) / (1 - q))) / self.dt

    def covariance(self, x):
        x = np.asarray(x, dtype=float)
        return self.dt * x * (1.0 - x)

    def nu(self) -> DiscreteMeasure:
        n = np.arange(self.N + 1)
        return DiscreteMeasure(n / self.N, stats.binom.pmf(n, self.N, self.q))

    def kernel(self, x) -> DiscreteMeasure:
        x = float(x)
        if not 0.0 <= x <= 1.0:
            raise DomainError("Bernoulli state space is [0, 1]")
        n = np.arange(self.N + 1)
        w = stats.binom.pmf(n, self.N, x)
        return DiscreteMeasure(n / self.N, w, allow_zero=True).support()

    def chain_law(self, x0, steps):
        """Exact law of the chain after ``steps`` transitions from ``x0``.

        Returns a list of DiscreteMeasure on the lattice ``{0, 1/N, ..., 1}``.
        """
        n = np.arange(self.N + 1)
        grid = n / self.N
        P = stats.binom.pmf(n[None, :], self.N, grid[:, None])
        w = stats.binom.pmf(n, self.N, x0)
        laws = []
        for _ in range(steps):
            laws.append(DiscreteMeasure(grid, w, allow_zero=True))
            w = w @ P
        return laws

    def chain_transition(self):
        n = np.arange(self.N + 1)
        grid = n / self.N
        return grid, stats.binom.pmf(n[None, :], self.N, grid[:, None])


class StochVol2D:
    """Two-factor Hessian martingale generalizing CEV with stochastic volatility.

    ``phi(u, v) = -u^(2-2b) (v+c)^(2b-1) / ((2-2b)(2b-1) s^2) - log(v) / a^2``
    with ``b = beta``, ``s = sigma``, ``a = alpha``.  The covariance has
    ``C_vv = alpha^2 v^2`` and reduces to CEV for ``alpha -> 0``.
    """

    def __init__(self, beta=0.75, sigma=1.0, alpha=1.0, c=0.0):
        if beta in (0.5, 1.0) or not (0.0 < beta < 1.0):
            raise DomainError("beta must lie in (0, 1) excluding 1/2")
        if sigma <= 0 or alpha <= 0:
            raise DomainError("sigma and alpha must be positive")
        self.beta, self.sigma, self.alpha, self.c = float(beta), float(sigma), float(alpha), float(c)

    def _check(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any(u <= 0) or np.any(v <= 0) or np.any(v + self.c <= 0):
            raise DomainError("need u > 0, v > 0, v + c > 0")
        return u, v

    def phi(self, u, v):
        u, v = self._check(u, v)
        b, s, a, c = self.beta, self.sigma, self.alpha, self.c
        coef = 1.0 / ((2 - 2 * b) * (2 * b - 1) * s**2)
        return -coef * u ** (2 - 2 * b) * (v + c) ** (2 * b - 1) - np.log(v) / a**2

    def hessian(self, u, v):
        """Analytic Hessian of ``phi``; shape ``(..., 2, 2)``."""
        u, v = self._check(u, v)
        b, s, a, c = self.beta, self.sigma, self.alpha, self.c
        w = v + c
        huu = u ** (-2 * b) * w ** (2 * b - 1) / s**2
        huv = -(u ** (1 - 2 * b)) * w ** (2 * b - 2) / s**2
        hvv = u ** (2 - 2 * b) * w ** (2 * b - 3) / s**2 + 1.0 / (a**2 * v**2)
        return np.stack([np.stack([huu, huv], -1), np.stack([huv, hvv], -1)], -2)

    def covariance(self, u, v):
        """Closed-form covariance entries ``C_uu, C_uv, C_vv``; shape ``(..., 2, 2)``."""
        u, v = self._check(u, v)
        b, s, a, c = self.beta, self.sigma, self.alpha, self.c
        w = v + c
        r = u / w
        cuu = a**2 * r**2 * v**2 + s**2 * r ** (2 * b) * w
        cuv = a**2 * r * v**2
        cvv = a**2 * v**2 + 0.0 * u
        return np.stack([np.stack([cuu, cuv], -1), np.stack([cuv, cvv], -1)], -2)

    def covariance_at(self, x):
        x = np.asarray(x, dtype=float)
        return self.covariance(x[..., 0], x[..., 1])

    def rho2(self, u, v):
        """Squared instantaneous correlation."""
        u, v = self._check(u, v)
        b, s, a, c = self.beta, self.sigma, self.alpha, self.c
        w = v + c
        return 1.0 / (1.0 + (s**2 / a**2) * (u / w) ** (2 * b - 2) * w / v**2)


def copula_obstruction_moment(alpha, n_nodes=200) -> float:
    """Quadrature of ``a * E[Y^(1+2 alpha)]`` with ``log Y ~ N(-1/2, 1)`` and
    ``a = exp(-alpha (2 alpha - 1))``.

    Analytically this equals ``exp(2 alpha)``; the counterexample to locally
    Gaussian copula models needs ``exp(2 alpha) + 1 > 4``.
    """
    z, w = hermegauss(n_nodes)
    w = w / w.sum()
    y = np.exp(-0.5 + z)
    a = math.exp(-alpha * (2 * alpha - 1))
    return float(a * np.sum(w * y ** (1 + 2 * alpha)))


FAMILIES = {
    "normal": Normal,
    "lognormal": LogNormal,
    "poisson": Poisson,
    "bernoulli": Bernoulli,
}
