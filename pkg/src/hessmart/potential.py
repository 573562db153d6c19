"""Log-partition functions of weighted reference measures and their Legendre transforms.

For a reference measure with atoms ``y_j``, weights ``w_j`` and log-offsets
``o_j`` define

    psi(k) = log sum_j w_j exp(o_j + <k, y_j>)

The Legendre transform ``phi(x) = sup_k <x, k> - psi(k)`` is finite exactly
on the open convex hull of the atoms.  At the maximizer ``k*`` the gradient of
``phi`` is ``k*`` and the inverse Hessian of ``phi`` is the tilted covariance
``H(psi)(k*)``, which is the local covariance of the Hessian martingale
kernel ``K(y|x) ~ w_j exp(o_j + <k*, y_j> - psi(k*))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, OutsideHullError
from .measures import DiscreteMeasure

log = logging.getLogger(__name__)

_CHUNK = 1024


@dataclass(frozen=True)
class LegendreConfig:
    """Newton settings for the Legendre transform.

    ``tol`` is an absolute tolerance on ``|grad psi(k) - x|`` scaled by
    ``1 + |x|``; ``k_max`` bounds the slope norm before the target is declared
    outside the support hull.
    """

    tol: float = 1e-10
    k_max: float = 1e8
    max_iter: int = 200
    armijo: float = 1e-4
    max_backtracks: int = 60


DEFAULT_LEGENDRE = LegendreConfig()


@dataclass(frozen=True)
class LegendreResult:
    value: float
    slope: np.ndarray
    covariance: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class LegendreBatch:
    """Vectorized Legendre solutions at ``m`` target points."""

    values: np.ndarray  # (m,)
    slopes: np.ndarray  # (m, n)
    covariances: np.ndarray  # (m, n, n)
    iterations: np.ndarray  # (m,)
    residuals: np.ndarray  # (m,)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> LegendreResult:
        return LegendreResult(
            float(self.values[i]), self.slopes[i].copy(), self.covariances[i].copy(),
            int(self.iterations[i]), float(self.residuals[i]),
        )


class Potential:
    """Reference measure plus per-atom log-weight offsets.

    Parameters
    ----------
    nu : DiscreteMeasure
        Reference atoms and weights.
    offsets : array_like, optional
        Per-atom additive log-weight adjustments (e.g. ``-h(y) - phi_next(y)``).
        May be large in magnitude; they are never exponentiated directly.
    """

    def __init__(self, nu: DiscreteMeasure, offsets=None):
        if offsets is None:
            offsets = np.zeros(nu.size)
        offsets = np.asarray(offsets, dtype=float).reshape(-1)
        if offsets.shape[0] != nu.size:
            raise ValueError("one offset per atom required")
        if np.any(np.isnan(offsets)) or np.any(offsets == np.inf):
            raise ValueError("offsets must be finite or -inf")
        with np.errstate(divide="ignore"):
            lw = np.log(nu.weights) + offsets
        keep = np.isfinite(lw)
        if not np.any(keep):
            raise DomainError("all effective weights are zero")
        self.nu = nu
        self.offsets = offsets
        self._active = keep
        y = nu.atoms[keep]
        self._center = nu.weights[keep] @ y / nu.weights[keep].sum()
        self._y = y - self._center
        self._lw = lw[keep]
        self._lo = y.min(axis=0)
        self._hi = y.max(axis=0)

    @property
    def dim(self) -> int:
        return self.nu.dim

    @property
    def atoms(self) -> np.ndarray:
        return self.nu.atoms

    def shifted(self, extra) -> "Potential":
        """Potential with ``extra`` added to the offsets."""
        return Potential(self.nu, self.offsets + np.asarray(extra, dtype=float))

    def log_mass(self) -> float:
        """log of the total effective mass, i.e. ``psi(0)``."""
        return self.log_mgf(np.zeros(self.dim))

    # -- log-partition and its derivatives ---------------------------------

    def _scores(self, K):
        return self._lw[None, :] + K @ self._y.T

    def _moments(self, K, order=2):
        """psi, tilted mean and tilted covariance at each row of ``K``."""
        K = np.atleast_2d(K)
        m, n = K.shape
        psi = np.empty(m)
        mean = np.empty((m, n))
        cov = np.empty((m, n, n)) if order >= 2 else None
        yy = (self._y[:, :, None] * self._y[:, None, :]).reshape(-1, n * n)
        for s in range(0, m, _CHUNK):
            sl = slice(s, s + _CHUNK)
            S = self._scores(K[sl])
            smax = S.max(axis=1)
            E = np.exp(S - smax[:, None])
            Z = E.sum(axis=1)
            P = E / Z[:, None]
            psi[sl] = smax + np.log(Z)
            mu = P @ self._y
            mean[sl] = mu
            if order >= 2:
                c = (P @ yy).reshape(-1, n, n) - mu[:, :, None] * mu[:, None, :]
                cov[sl] = 0.5 * (c + np.swapaxes(c, 1, 2))
        psi = psi + K @ self._center
        mean = mean + self._center
        return psi, mean, cov

    def tilted_weights(self, K) -> np.ndarray:
        """Kernel rows: normalized tilted probabilities over all atoms of ``nu``.

        Returns an array of shape ``(m, nu.size)``; atoms with zero effective
        weight get probability zero.
        """
        K = np.atleast_2d(np.asarray(K, dtype=float))
        S = self._scores(K)
        S = S - S.max(axis=1, keepdims=True)
        E = np.exp(S)
        P = E / E.sum(axis=1, keepdims=True)
        if np.all(self._active):
            return P
        out = np.zeros((K.shape[0], self.nu.size))
        out[:, self._active] = P
        return out

    def log_mgf(self, k) -> float:
        k = np.asarray(k, dtype=float).reshape(1, self.dim)
        if not np.all(np.isfinite(k)):
            raise ValueError("k must be finite")
        psi, _, _ = self._moments(k, order=1)
        return float(psi[0])

    def grad_log_mgf(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float).reshape(1, self.dim)
        _, mean, _ = self._moments(k, order=1)
        return mean[0]

    def hess_log_mgf(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float).reshape(1, self.dim)
        _, _, cov = self._moments(k)
        return cov[0]

    # -- Legendre transform -------------------------------------------------

    def _check_box(self, X):
        flat = self._hi <= self._lo
        if np.any(flat):
            raise OutsideHullError(
                "reference measure is degenerate along axes "
                f"{np.flatnonzero(flat).tolist()}; no interior"
            )
        bad = np.any((X <= self._lo) | (X >= self._hi), axis=1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise OutsideHullError(
                f"target outside support hull: point {i} = {X[i].tolist()}",
            )

    def legendre_batch(self, X, cfg: LegendreConfig = DEFAULT_LEGENDRE, k0=None) -> LegendreBatch:
        """Solve ``max_k <x, k> - psi(k)`` at every row of ``X``.

        Damped Newton with backtracking line search, vectorized over targets.
        ``k0`` warm-starts the slopes.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, n = X.shape
        if n != self.dim:
            raise ValueError(f"targets have dimension {n}, potential has {self.dim}")
        self._check_box(X)
        K = np.zeros((m, n)) if k0 is None else np.array(k0, dtype=float).reshape(m, n)
        K[~np.isfinite(K).all(axis=1)] = 0.0
        tol = cfg.tol * (1.0 + np.linalg.norm(X, axis=1))
        iters = np.zeros(m, dtype=int)
        psi, mean, cov = self._moments(K)
        resid = np.linalg.norm(mean - X, axis=1)
        active = np.flatnonzero(resid > tol)
        it = 0
        while active.size:
            if it >= cfg.max_iter:
                i = active[np.argmax(resid[active])]
                raise ConvergenceError(
                    f"Legendre solve did not converge in {cfg.max_iter} iterations "
                    f"at point {X[i].tolist()} (residual {resid[i]:.3e})",
                    residual=float(resid[i]), iterations=it,
                )
            it += 1
            iters[active] += 1
            Ka, Xa = K[active], X[active]
            g = mean[active] - Xa
            d = -_damped_solve(cov[active], g)
            f0 = psi[active] - np.einsum("ij,ij->i", Xa, Ka)
            slope = np.einsum("ij,ij->i", g, d)
            t = np.ones(active.size)
            pending = np.arange(active.size)
            new_psi = np.empty(active.size)
            new_mean = np.empty((active.size, n))
            new_cov = np.empty((active.size, n, n))
            for _ in range(cfg.max_backtracks):
                Kt = Ka[pending] + t[pending, None] * d[pending]
                p_t, m_t, c_t = self._moments(Kt)
                f_t = p_t - np.einsum("ij,ij->i", Xa[pending], Kt)
                r_t = np.linalg.norm(m_t - Xa[pending], axis=1)
                # Armijo, or a residual decrease while L is flat to rounding
                flat = f_t <= f0[pending] + 1e-13 * np.maximum(1.0, np.abs(f0[pending]))
                ok = (f_t <= f0[pending] + cfg.armijo * t[pending] * slope[pending]) | (
                    flat & (r_t < resid[active[pending]])
                )
                ok &= np.isfinite(f_t)
                acc = pending[ok]
                new_psi[acc], new_mean[acc], new_cov[acc] = p_t[ok], m_t[ok], c_t[ok]
                pending = pending[~ok]
                if not pending.size:
                    break
                t[pending] *= 0.5
            if pending.size:
                i = active[pending[0]]
                raise ConvergenceError(
                    f"line search failed at point {X[i].tolist()} (residual {resid[i]:.3e})",
                    residual=float(resid[i]), iterations=it,
                )
            K[active] = Ka + t[:, None] * d
            psi[active], mean[active], cov[active] = new_psi, new_mean, new_cov
            big = np.linalg.norm(K[active], axis=1) > cfg.k_max
            if np.any(big):
                i = active[np.flatnonzero(big)[0]]
                raise OutsideHullError(
                    f"target outside support hull: slope diverged at {X[i].tolist()}"
                )
            resid[active] = np.linalg.norm(mean[active] - X[active], axis=1)
            active = active[resid[active] > tol[active]]
        values = np.einsum("ij,ij->i", X, K) - psi
        return LegendreBatch(values, K, cov, iters, resid)

    def legendre(self, x, cfg: LegendreConfig = DEFAULT_LEGENDRE, k0=None) -> LegendreResult:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        if k0 is not None:
            k0 = np.asarray(k0, dtype=float).reshape(1, self.dim)
        return self.legendre_batch(x, cfg, k0)[0]

    def covariance_at(self, x, cfg: LegendreConfig = DEFAULT_LEGENDRE) -> np.ndarray:
        return self.legendre(x, cfg).covariance


def _damped_solve(H, g):
    """Solve ``H d = g`` row-wise, adding Levenberg damping where H is not PD."""
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return np.stack([_damped_solve_one(h, v) for h, v in zip(H, g)])
    y = np.linalg.solve(L, g[..., None])
    return np.linalg.solve(np.swapaxes(L, 1, 2), y)[..., 0]


def _damped_solve_one(h, v):
    n = h.shape[0]
    scale = max(1.0, float(np.trace(h)))
    lam = 0.0
    while True:
        try:
            L = np.linalg.cholesky(h + lam * np.eye(n))
            break
        except np.linalg.LinAlgError:
            lam = 1e-12 * scale if lam == 0.0 else lam * 10.0
            if lam > 1e12 * scale:
                raise
    y = np.linalg.solve(L, v)
    return np.linalg.solve(L.T, y)


# convenience module-level wrappers matching the operation names

def log_mgf(p: Potential, k) -> float:
    return p.log_mgf(k)


def grad_log_mgf(p: Potential, k) -> np.ndarray:
    return p.grad_log_mgf(k)


def hess_log_mgf(p: Potential, k) -> np.ndarray:
    return p.hess_log_mgf(k)


def legendre(p: Potential, x, cfg: LegendreConfig = DEFAULT_LEGENDRE) -> LegendreResult:
    return p.legendre(x, cfg)


def covariance_at(p: Potential, x, cfg: LegendreConfig = DEFAULT_LEGENDRE) -> np.ndarray:
    return p.covariance_at(x, cfg)
