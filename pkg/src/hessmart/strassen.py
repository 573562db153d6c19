"""Convex order between two discrete measures via entropic martingale transport.

With source atoms ``x_k`` (masses ``p_k``) and target atoms ``y_j`` (weights
``w_j``), the mutual-information-minimizing martingale kernel has the form

    K(y_j | x_k) = exp(a_k + <b_k, y_j>) / sum_l p_l exp(a_l + <b_l, y_j>)

(a density with respect to the target measure).  The multipliers minimize the
convex function

    L(theta) = sum_j w_j log sum_l p_l exp(a_l + <b_l, y_j>)
               - sum_k p_k (a_k + <b_k, x_k>)

whose gradient is the defect of the mass and barycenter identities of each
kernel row.  ``(a_0, b_0)`` is pinned to zero to remove the shift symmetry.
A minimizer exists when the pair is (strictly) in convex order; otherwise
the Newton iterates run off to infinity and the escape direction yields a
separating convex function ``max(0, a_1 + <b_1, y>, ...)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import ConvergenceError
from .measures import (
    SVD_RTOL,
    AffineFrame,
    DiscreteMeasure,
    reduce_to_affine_hull,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelConfig:
    """Settings for the convex-order solver.

    ``tol`` bounds the per-row mass and barycenter residuals.  Divergence is
    declared once ``max|theta| > divergence_norm`` and the residual has
    decreased by less than ``plateau_rtol`` (relative) over the last
    ``plateau_window`` iterations.
    """

    tol: float = 1e-9
    max_iter: int = 500
    divergence_norm: float = 1e6
    plateau_window: int = 10
    plateau_rtol: float = 1e-12
    witness_tol: float = 1e-8
    mean_tol: float = 1e-8
    boundary_density: float = 1e-8
    armijo: float = 1e-4
    max_backtracks: int = 60


DEFAULT_KERNEL = KernelConfig()


class Status(str, Enum):
    CONVERGED = "converged"
    DIVERGING = "diverging"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class KernelSolution:
    """Multipliers per source atom, row ``k`` is ``(a_k, b_k)``; row 0 is zero.

    Multipliers are expressed in the ambient coordinates of the inputs.
    ``direction`` is set when the iterates diverge and holds the normalized
    escape direction (same layout as ``multipliers``).
    """

    multipliers: np.ndarray  # (N+1, n+1)
    residual_mass: float
    residual_moment: float
    status: Status
    iterations: int
    direction: np.ndarray | None = None
    candidates: list = field(default_factory=list)
    boundary: bool = False
    min_density: float = float("nan")

    @property
    def a(self) -> np.ndarray:
        return self.multipliers[:, 0]

    @property
    def b(self) -> np.ndarray:
        return self.multipliers[:, 1:]

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


class MaxOfAffines:
    """Convex function ``y -> max_i (a_i + <b_i, y>)``."""

    def __init__(self, pieces):
        pieces = [(float(a), np.atleast_1d(np.asarray(b, dtype=float))) for a, b in pieces]
        if not pieces:
            raise ValueError("need at least one affine piece")
        self.a = np.array([p[0] for p in pieces])
        self.b = np.stack([p[1] for p in pieces])

    @property
    def pieces(self):
        return [(float(a), b.copy()) for a, b in zip(self.a, self.b)]

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, self.b.shape[1])
        vals = (self.a[None, :] + flat @ self.b.T).max(axis=1)
        return vals.reshape(y.shape[:-1]) if y.ndim > 1 else vals[0]

    def to_json(self):
        return [{"a": float(a), "b": b.tolist()} for a, b in zip(self.a, self.b)]


@dataclass
class OrderVerdict:
    ordered: bool
    witness: MaxOfAffines | None = None
    gap: float = 0.0
    boundary: bool = False
    reason: str = ""
    solution: KernelSolution | None = None


def witness_gap(f, m1: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """``E_m1[f] - E_m2[f]``, positive for a separating convex ``f``."""
    return float(m1.weights @ f(m1.atoms) - m2.weights @ f(m2.atoms))


# -- the dual objective -------------------------------------------------------


class KernelDual:
    """The objective ``L``, its gradient and Hessian in the free variables.

    Coordinates are as given (no rescaling).  ``theta`` has shape
    ``(N, n+1)`` for source atoms ``1..N``.
    """

    def __init__(self, m1: DiscreteMeasure, m2: DiscreteMeasure):
        if m1.dim != m2.dim:
            raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
        self.x = m1.atoms
        self.p = m1.weights
        self.y = m2.atoms
        self.w = m2.weights
        self.logp = np.log(self.p)
        self.z = np.hstack([np.ones((self.y.shape[0], 1)), self.y])  # (m, n+1)
        self.xz = np.hstack([np.ones((self.x.shape[0], 1)), self.x])  # (N+1, n+1)
        self.N = self.x.shape[0] - 1
        self.n1 = self.z.shape[1]

    def _full(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(self.N, self.n1)
        return np.vstack([np.zeros((1, self.n1)), theta])

    def posterior(self, theta):
        """``q[j, l]``: probability of source ``l`` given target atom ``j``; and log-normalizers."""
        S = self.logp[None, :] + self.z @ self._full(theta).T
        lz = logsumexp(S, axis=1)
        return np.exp(S - lz[:, None]), lz

    def phi(self, theta) -> float:
        _, lz = self.posterior(theta)
        return float(self.w @ lz)

    def value(self, theta) -> float:
        full = self._full(theta)
        lin = np.einsum("k,ka,ka->", self.p, full, self.xz)
        return self.phi(theta) - float(lin)

    def tilted(self, q):
        """Row moments ``sum_j w_j q_jk (1, y_j)``; shape ``(N+1, n+1)``."""
        return (q * self.w[:, None]).T @ self.z

    def grad_phi(self, theta) -> np.ndarray:
        q, _ = self.posterior(theta)
        return self.tilted(q)[1:].reshape(-1)

    def grad(self, theta) -> np.ndarray:
        q, _ = self.posterior(theta)
        return (self.tilted(q)[1:] - self.p[1:, None] * self.xz[1:]).reshape(-1)

    def hess(self, theta, q=None) -> np.ndarray:
        """Tilted covariance of the ``(1, y)`` blocks, size ``N(n+1)``."""
        if q is None:
            q, _ = self.posterior(theta)
        qs = q[:, 1:]
        wq = qs * self.w[:, None]
        diag = np.einsum("jk,ja,jb->kab", wq, self.z, self.z)
        U = (np.sqrt(self.w)[:, None, None] * qs[:, :, None] * self.z[:, None, :]).reshape(
            qs.shape[0], -1
        )
        H = -U.T @ U
        N, n1 = self.N, self.n1
        for k in range(N):
            H[k * n1:(k + 1) * n1, k * n1:(k + 1) * n1] += diag[k]
        return 0.5 * (H + H.T)

    def residuals(self, q):
        """Per-row mass and barycenter defects ``(|m_k/p_k - 1|, |mu_k/p_k - x_k|_inf)``."""
        T = self.tilted(q)
        mass = np.abs(T[:, 0] / self.p - 1.0)
        moment = np.abs(T[:, 1:] / self.p[:, None] - self.x).max(axis=1) if self.x.shape[1] else (
            np.zeros(self.p.shape[0])
        )
        return mass, moment


def _solve_damped(H, g):
    n = H.shape[0]
    scale = max(1.0, float(np.trace(H)) / max(n, 1))
    lam = 0.0
    eye = np.eye(n)
    while True:
        try:
            L = np.linalg.cholesky(H + lam * eye)
            break
        except np.linalg.LinAlgError:
            lam = 1e-12 * scale if lam == 0.0 else lam * 10.0
            if lam > 1e20 * scale:
                raise ConvergenceError("Hessian regularization failed", residual=float("nan"), iterations=0)
    y = np.linalg.solve(L, g)
    return np.linalg.solve(L.T, y)


_FLAT = 1e-13


def _criterion(dual, q, scale, slack):
    """Largest row residual; row 0 is allowed ``slack`` for a tiny mean mismatch."""
    mass, mom = dual.residuals(q)
    r = np.maximum(mass, scale * mom)
    r[0] = max(0.0, r[0] - slack)
    return float(r.max())


def _newton(dual: KernelDual, cfg: KernelConfig, scale: float, slack: float = 0.0):
    """Minimize ``L`` from zero; returns theta, status, iterations, history."""
    N, n1 = dual.N, dual.n1
    theta = np.zeros(N * n1)
    q, lz = dual.posterior(theta)
    f = float(dual.w @ lz) - float(np.einsum("k,ka,ka->", dual.p[1:], theta.reshape(N, n1), dual.xz[1:]))
    hist_r, hist_theta = [], []
    status = Status.ITERATION_LIMIT
    it = 0
    for it in range(cfg.max_iter + 1):
        r = _criterion(dual, q, scale, slack)
        hist_r.append(r)
        hist_theta.append(theta.copy())
        if r <= cfg.tol:
            status = Status.CONVERGED
            break
        w = cfg.plateau_window
        if np.abs(theta).max() > cfg.divergence_norm and len(hist_r) > w:
            old = hist_r[-1 - w]
            if old - r < cfg.plateau_rtol * old:
                status = Status.DIVERGING
                break
        if it == cfg.max_iter:
            break
        g = (dual.tilted(q)[1:] - dual.p[1:, None] * dual.xz[1:]).reshape(-1)
        H = dual.hess(theta, q)
        d = -_solve_damped(H, g)
        cap = max(10.0, np.abs(theta).max())
        dn = np.abs(d).max()
        if dn > cap:
            d *= cap / dn
        slope = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            th_t = theta + t * d
            q_t, lz_t = dual.posterior(th_t)
            f_t = float(dual.w @ lz_t) - float(
                np.einsum("k,ka,ka->", dual.p[1:], th_t.reshape(N, n1), dual.xz[1:])
            )
            if np.isfinite(f_t) and f_t <= f + cfg.armijo * t * slope:
                accepted = True
                break
            # near the optimum L changes below rounding; fall back on the residual
            if np.isfinite(f_t) and f_t <= f + _FLAT * max(1.0, abs(f)):
                if _criterion(dual, q_t, scale, slack) < r:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # no decrease available at working precision
            if np.abs(theta).max() > cfg.divergence_norm:
                status = Status.DIVERGING
            break
        theta, q, f = th_t, q_t, f_t
    return theta.reshape(N, n1), status, it, hist_theta, q


def _to_original(theta_n, center, s):
    """Map multipliers for ``y' = (y - c)/s`` back to ``y`` coordinates."""
    b = theta_n[:, 1:] / s
    a = theta_n[:, 0] - b @ center
    return np.column_stack([a, b])


def _lift(mult, frame: AffineFrame):
    out = []
    for row in mult:
        a, b = frame.lift_affine(row[0], row[1:])
        out.append(np.concatenate([[a], b]))
    return np.array(out).reshape(len(mult), frame.base.shape[0] + 1)


def _hull_frame(m2: DiscreteMeasure):
    (_, _), frame = reduce_to_affine_hull(m2, m2)
    return frame


def _off_hull(m1: DiscreteMeasure, frame: AffineFrame):
    """Distance of each m1 atom from the affine hull described by ``frame``."""
    z = frame.project(m1.atoms)
    back = frame.lift(z)
    diff = m1.atoms - back
    return diff, np.linalg.norm(diff, axis=1)


def solve_kernel(m1: DiscreteMeasure, m2: DiscreteMeasure, cfg: KernelConfig = DEFAULT_KERNEL) -> KernelSolution:
    """Solve for the kernel multipliers of the pair ``(m1, m2)``.

    The source atoms are the atoms of ``m1`` in order; index 0 is pinned.
    Requires equal means and ``m1`` inside the affine hull of ``m2``;
    :func:`check_convex_order` handles those cases first.
    """
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    m1s, m2s = m1.support(), m2.support()
    gap = np.abs(m1s.mean() - m2s.mean()).max()
    if gap > cfg.mean_tol:
        raise ValueError(f"means differ by {gap:.3e}; measures cannot be in convex order")
    frame = _hull_frame(m2s)
    _, dist = _off_hull(m1s, frame)
    scale_amb = float(np.sqrt(m2s.weights @ ((m2s.atoms - m2s.mean()) ** 2).sum(axis=1))) or 1.0
    if dist.max() > SVD_RTOL * max(1.0, scale_amb) * 1e2:
        raise ValueError(
            "m1 has atoms off the affine hull of m2; reduce or use check_convex_order"
        )
    n = m1.dim
    N = m1s.size - 1
    if frame.dim == 0 or N == 0:
        mult = np.zeros((m1s.size, n + 1))
        row_means = np.repeat(m2s.mean()[None, :], m1s.size, axis=0)
        mom = float(np.abs(row_means - m1s.atoms).max())
        status = Status.CONVERGED if (N == 0 or mom <= cfg.tol) else Status.ITERATION_LIMIT
        return KernelSolution(mult, 0.0, mom, status, 0, boundary=frame.dim == 0,
                              min_density=1.0)
    z1 = frame.project(m1s.atoms)
    z2 = frame.project(m2s.atoms)
    center = m2s.weights @ z2
    s = float(np.sqrt(m2s.weights @ ((z2 - center) ** 2).sum(axis=1)))
    r1 = DiscreteMeasure((z1 - center) / s, m1s.weights)
    r2 = DiscreteMeasure((z2 - center) / s, m2s.weights)
    dual = KernelDual(r1, r2)
    slack = float(np.abs(m1s.mean() - m2s.mean()).max()) / m1s.weights[0]
    theta_n, status, iters, hist, q = _newton(dual, cfg, s, slack)
    mass, mom = dual.residuals(q)
    full_n = np.vstack([np.zeros((1, dual.n1)), theta_n])
    mult = _lift(_to_original(full_n, center, s), frame)
    sol = KernelSolution(
        mult, float(mass.max()), float(s * mom.max()), status, iters,
    )
    density = q / m1s.weights[None, :]
    sol.min_density = float(density.min())
    if status is Status.CONVERGED:
        sol.boundary = sol.min_density < cfg.boundary_density
    else:
        cands = []
        tip = theta_n
        cands.append(tip)
        w = cfg.plateau_window
        if len(hist) > w:
            cands.append(tip - hist[-1 - w].reshape(tip.shape))
        lifted = []
        for c in cands:
            nrm = np.abs(c).max()
            if nrm == 0:
                continue
            c = c / nrm
            full = np.vstack([np.zeros((1, dual.n1)), c])
            lifted.append(_lift(_to_original(full, center, s), frame))
        sol.candidates = lifted
        sol.direction = lifted[0] if lifted else None
    return sol


def kernel_matrix(sol: KernelSolution, m1: DiscreteMeasure, m2: DiscreteMeasure) -> np.ndarray:
    """Row-stochastic matrix ``P[k, j]`` of kernel probabilities on ``m2``'s support."""
    m1s, m2s = m1.support(), m2.support()
    if sol.multipliers.shape[0] != m1s.size:
        raise ValueError("solution does not match m1")
    S = np.log(m1s.weights)[None, :] + sol.a[None, :] + m2s.atoms @ sol.b.T  # (m, N+1)
    lz = logsumexp(S, axis=1)
    dens = np.exp(S - lz[:, None] - np.log(m1s.weights)[None, :])  # K(y_j | x_k)
    P = dens.T * m2s.weights[None, :]
    return P / P.sum(axis=1, keepdims=True)


def kernel_row(sol: KernelSolution, m1: DiscreteMeasure, m2: DiscreteMeasure, k: int) -> DiscreteMeasure:
    """Kernel ``K(. | x_k)`` as a probability measure on ``m2``'s atoms."""
    if not sol.converged:
        raise ConvergenceError(
            f"kernel not converged (status {sol.status.value})",
            residual=max(sol.residual_mass, sol.residual_moment), iterations=sol.iterations,
        )
    m2s = m2.support()
    P = kernel_matrix(sol, m1, m2)
    return DiscreteMeasure(m2s.atoms, P[k], allow_zero=True)


def _direction_witness(direction: np.ndarray) -> MaxOfAffines:
    pieces = [(row[0], row[1:]) for row in direction]
    return MaxOfAffines(pieces)


def check_convex_order(m1: DiscreteMeasure, m2: DiscreteMeasure, cfg: KernelConfig = DEFAULT_KERNEL) -> OrderVerdict:
    """Decide whether ``m1`` precedes ``m2`` in convex order.

    Not-ordered verdicts carry a max-of-affines witness ``f`` with
    ``E_m1[f] - E_m2[f] > cfg.witness_tol``.
    """
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    m1s, m2s = m1.support(), m2.support()
    d = m1s.mean() - m2s.mean()
    dn = float(np.linalg.norm(d))
    if np.abs(d).max() > cfg.mean_tol:
        u = d / dn
        f = MaxOfAffines([(0.0, u)])
        return OrderVerdict(False, f, witness_gap(f, m1s, m2s), reason="means differ")

    frame = _hull_frame(m2s)
    diff, dist = _off_hull(m1s, frame)
    i = int(np.argmax(m1s.weights * dist))
    if dist[i] > 0:
        nvec = diff[i] / dist[i]
        off = float(nvec @ frame.base)
        f = MaxOfAffines([(-off, nvec), (off, -nvec)])
        gap = witness_gap(f, m1s, m2s)
        if gap > cfg.witness_tol:
            return OrderVerdict(False, f, gap, reason="m1 leaves the affine hull of m2")
        # below tolerance: project m1 onto the hull and carry on
        m1s = DiscreteMeasure(frame.lift(frame.project(m1s.atoms)), m1s.weights)

    sol = solve_kernel(m1s, m2s, cfg)
    if sol.converged:
        return OrderVerdict(True, None, 0.0, boundary=sol.boundary,
                            reason="boundary: order holds non-strictly" if sol.boundary else "kernel found",
                            solution=sol)
    best, best_gap = None, -np.inf
    for c in sol.candidates:
        f = _direction_witness(c)
        g = witness_gap(f, m1s, m2s)
        if g > best_gap:
            best, best_gap = f, g
    if best is not None and best_gap > cfg.witness_tol:
        return OrderVerdict(False, best, best_gap, reason=f"solver {sol.status.value}", solution=sol)
    return OrderVerdict(True, best, max(best_gap, 0.0) if best is not None else 0.0, boundary=True,
                        reason="boundary: order holds non-strictly", solution=sol)


# -- LP oracle ----------------------------------------------------------------

LP_SIZE_LIMIT = 12


def brute_force_coupling(m1: DiscreteMeasure, m2: DiscreteMeasure, tol=1e-10):
    """Martingale coupling of ``m1`` and ``m2`` by linear programming, or ``None``.

    Returns ``q`` with ``q[k, l] >= 0``, row sums ``p_k``, column sums
    ``w_l`` and row barycenters ``x_k``.
    """
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    if m1.size > LP_SIZE_LIMIT or m2.size > LP_SIZE_LIMIT:
        raise ValueError(f"brute force limited to {LP_SIZE_LIMIT} atoms per side")
    x, p, y, w = m1.atoms, m1.weights, m2.atoms, m2.weights
    K, L, n = x.shape[0], y.shape[0], x.shape[1]
    rows, rhs = [], []
    for k in range(K):
        r = np.zeros((K, L))
        r[k] = 1.0
        rows.append(r.ravel())
        rhs.append(p[k])
    for l in range(L):
        r = np.zeros((K, L))
        r[:, l] = 1.0
        rows.append(r.ravel())
        rhs.append(w[l])
    for k in range(K):
        for i in range(n):
            r = np.zeros((K, L))
            r[k] = y[:, i]
            rows.append(r.ravel())
            rhs.append(p[k] * x[k, i])
    A = np.array(rows)
    bvec = np.array(rhs)
    res = linprog(
        np.zeros(K * L), A_eq=A, b_eq=bvec, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol},
    )
    if res.status != 0:
        return None
    q = np.clip(res.x.reshape(K, L), 0.0, None)
    if np.abs(A @ q.ravel() - bvec).max() > 10 * tol:
        return None
    return q
