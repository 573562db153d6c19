"""Monte Carlo diffusion of particle clouds through calibrated maturities.

Between maturities a particle moves by ``x -> x + Sigma(x) u`` with
``Sigma Sigma^T = H(psi)(grad phi(x))``, the local covariance of the
Hessian martingale kernel.  ``Sigma`` is computed exactly at a small tensor
grid of knots and interpolated per Cholesky entry for every particle.
Intermediate dates are filled with a Brownian bridge.

Random numbers come from a counter-based generator (Philox) keyed by
``(seed, maturity, sub-step)`` and indexed by particle, so any split of the
particles into chunks reproduces the same draws.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .potential import DEFAULT_LEGENDRE, LegendreConfig, Potential

log = logging.getLogger(__name__)

DEFAULT_SUBSTEPS = 4
DEFAULT_KNOTS = {1: 15, 2: 9}


# -- counter-based normals ------------------------------------------------------

def _key(seed, maturity, substep):
    """Two 64-bit key words from the stream coordinates."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(maturity), int(substep)])
    return ss.generate_state(2, dtype=np.uint64)


def uniforms(seed, maturity, substep, start, count, width) -> np.ndarray:
    """Uniforms on (0, 1) for particles ``start .. start+count-1``; shape ``(count, width)``.

    Each particle owns a fixed block of the Philox counter space, so the draw
    for a particle depends only on its index and the stream key.
    """
    blocks = (width + 3) // 4
    bg = np.random.Philox(key=_key(seed, maturity, substep), counter=[start * blocks, 0, 0, 0])
    raw = bg.random_raw(count * blocks * 4).reshape(count, blocks * 4)[:, :width]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed, maturity, substep, start, count, dim) -> np.ndarray:
    """Standard normals (Box-Muller on :func:`uniforms`); shape ``(count, dim)``."""
    pairs = (dim + 1) // 2
    u = uniforms(seed, maturity, substep, start, count, 2 * pairs)
    u1, u2 = u[:, 0::2], u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((count, 2 * pairs))
    z[:, 0::2] = r * np.cos(2.0 * math.pi * u2)
    z[:, 1::2] = r * np.sin(2.0 * math.pi * u2)
    return z[:, :dim]


# -- particle cloud -------------------------------------------------------------


@dataclass
class ParticleCloud:
    positions: np.ndarray  # (N, n)
    time: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("particle positions must be finite")

    @property
    def size(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @classmethod
    def dirac(cls, point, n_particles, time=0.0, seed=0):
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(np.repeat(point[None, :], n_particles, axis=0), time, seed)


# -- sigma field -----------------------------------------------------------------


class SigmaField:
    """Cholesky factors of the local covariance on a tensor grid of knots.

    ``factors[i1, ..., in]`` is lower triangular with
    ``L L^T = covariance(knot)``.  The covariance refers to a full interval
    of length ``horizon``; a step over a fraction ``f`` of it uses ``f L L^T``.
    """

    def __init__(self, axes, factors, horizon=1.0):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.n = len(self.axes)
        shape = tuple(len(a) for a in self.axes)
        factors = np.asarray(factors, dtype=float)
        if factors.shape != shape + (self.n, self.n):
            raise ValueError(f"factors shape {factors.shape} does not match grid {shape}")
        for a in self.axes:
            if np.any(np.diff(a) <= 0):
                raise ValueError("knot axes must be strictly increasing")
        self.factors = factors
        self.horizon = float(horizon)

    @property
    def knots(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @classmethod
    def constant(cls, sigma, n=None, horizon=1.0):
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        n = sigma.shape[0]
        return cls([np.zeros(1)] * n, sigma.reshape((1,) * n + (n, n)), horizon)

    @classmethod
    def from_covariance(cls, cov_fn, axes, horizon=1.0):
        """Build from a callable returning covariance matrices at ``(m, n)`` points."""
        axes = [np.unique(np.asarray(a, dtype=float)) for a in axes]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        C = np.asarray(cov_fn(pts), dtype=float).reshape(len(pts), len(axes), len(axes))
        shape = tuple(len(a) for a in axes)
        return cls(axes, _cholesky(C).reshape(shape + C.shape[1:]), horizon)

    def factor_at(self, X) -> np.ndarray:
        """Multilinear interpolation of the factor entries; clamps outside the grid."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        idx, wts = [], []
        for d, ax in enumerate(self.axes):
            if ax.size == 1:
                idx.append(np.zeros((m, 2), dtype=int))
                wts.append(np.column_stack([np.ones(m), np.zeros(m)]))
                continue
            x = np.clip(X[:, d], ax[0], ax[-1])
            i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, ax.size - 2)
            t = (x - ax[i]) / (ax[i + 1] - ax[i])
            idx.append(np.column_stack([i, i + 1]))
            wts.append(np.column_stack([1.0 - t, t]))
        out = np.zeros((m, self.n, self.n))
        for corner in np.ndindex(*(2,) * self.n):
            w = np.ones(m)
            sel = []
            for d, c in enumerate(corner):
                w = w * wts[d][:, c]
                sel.append(idx[d][:, c])
            if not np.any(w):
                continue
            out += w[:, None, None] * self.factors[tuple(sel)]
        return out

    def covariance_at(self, X) -> np.ndarray:
        L = self.factor_at(X)
        return L @ np.swapaxes(L, 1, 2)

    def to_json(self):
        return {
            "axes": [a.tolist() for a in self.axes],
            "factors": self.factors.tolist(),
            "horizon": self.horizon,
        }


def _cholesky(C):
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    out = np.empty_like(C)
    for i, c in enumerate(C):
        try:
            out[i] = np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            # semidefinite (e.g. zero) covariance: eigen-clip and factor
            w, v = np.linalg.eigh(c)
            if w.min() < -1e-10 * max(1.0, abs(w).max()):
                raise DomainError("covariance at a knot is not positive semidefinite")
            out[i] = v * np.sqrt(np.maximum(w, 0.0))
    return out


def quantile_knots(positions, per_axis=None, bounds=None) -> list:
    """Per-axis empirical quantile knots of a cloud, clipped strictly inside ``bounds``."""
    positions = np.atleast_2d(positions)
    n = positions.shape[1]
    m = per_axis or DEFAULT_KNOTS.get(n, 5)
    q = np.linspace(0.0, 1.0, m)
    axes = []
    for d in range(n):
        x = np.quantile(positions[:, d], q)
        if bounds is not None:
            lo, hi = bounds[0][d], bounds[1][d]
            pad = 1e-6 * (hi - lo)
            x = np.clip(x, lo + pad, hi - pad)
        x = np.unique(x)
        axes.append(x)
    return axes


def build_sigma_field(pot: Potential, knots, cfg: LegendreConfig = DEFAULT_LEGENDRE, horizon=1.0) -> SigmaField:
    """Local covariance factors at a tensor grid of knots (one Legendre solve per knot)."""
    axes = [np.unique(np.asarray(a, dtype=float)) for a in knots]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    res = pot.legendre_batch(pts, cfg)
    shape = tuple(len(a) for a in axes)
    return SigmaField(axes, _cholesky(res.covariances).reshape(shape + (pot.dim, pot.dim)), horizon)


# -- stepping ----------------------------------------------------------------------


def _apply(x, L, z, scale, log_axes):
    du = np.einsum("mij,mj->mi", L, z) * math.sqrt(scale)
    if log_axes is None or not np.any(log_axes):
        return x + du
    out = x + du
    la = np.flatnonzero(log_axes)
    xl = x[:, la]
    if np.any(xl <= 0):
        raise DomainError("log-space stepping needs strictly positive coordinates")
    cii = scale * np.einsum("mij,mij->mi", L, L)[:, la]
    out[:, la] = xl * np.exp(-0.5 * cii / xl**2 + du[:, la] / xl)
    return out


def _relative_clamp(L, x, field, log_axes):
    # beyond the knot grid a log axis keeps the relative (not absolute) factor
    out = L.copy()
    for d in np.flatnonzero(log_axes):
        ax = field.axes[d]
        xc = np.clip(x[:, d], ax[0], ax[-1])
        out[:, d, :] *= (x[:, d] / xc)[:, None]
    return out


def step(cloud: ParticleCloud, field: SigmaField, dt_fraction=1.0, substeps=DEFAULT_SUBSTEPS,
         log_axes=None, maturity=0, threads=1, chunk=65536) -> ParticleCloud:
    """Advance the cloud over ``dt_fraction`` of the field's interval in ``substeps`` moves."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if dt_fraction < 0:
        raise ValueError("dt_fraction must be nonnegative")
    x = cloud.positions.copy()
    n = cloud.dim
    if field.n != n:
        raise ValueError("field and cloud dimensions differ")
    log_axes = None if log_axes is None else np.asarray(log_axes, dtype=bool).reshape(n)
    scale = dt_fraction / substeps
    horizon_dt = dt_fraction * field.horizon
    N = cloud.size
    starts = list(range(0, N, chunk))
    for s in range(substeps):
        def work(a, x=x, s=s):
            b = min(a + chunk, N)
            z = normals(cloud.seed, maturity, s, a, b - a, n)
            L = field.factor_at(x[a:b])
            if log_axes is not None and np.any(log_axes):
                L = _relative_clamp(L, x[a:b], field, log_axes)
            return a, b, _apply(x[a:b], L, z, scale, log_axes)

        new = np.empty_like(x)
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(work, starts))
        else:
            results = [work(a) for a in starts]
        for a, b, v in results:
            new[a:b] = v
        x = new
    return ParticleCloud(x, cloud.time + horizon_dt, cloud.seed)


def bridge(cloud_a: ParticleCloud, cloud_b: ParticleCloud, t_mid, field: SigmaField,
           stream=0, substep=0) -> ParticleCloud:
    """Brownian bridge between two clouds with the same particle ordering.

    The conditional covariance is ``(t - t_a)(t_b - t)/(t_b - t_a)`` times the
    per-unit-time covariance ``L L^T / horizon`` evaluated at the start point.
    """
    ta, tb = cloud_a.time, cloud_b.time
    if not ta <= t_mid <= tb:
        raise ValueError(f"bridge time {t_mid} outside [{ta}, {tb}]")
    if cloud_a.positions.shape != cloud_b.positions.shape:
        raise ValueError("clouds must share particle identity and ordering")
    if t_mid == ta:
        return ParticleCloud(cloud_a.positions.copy(), ta, cloud_a.seed)
    if t_mid == tb:
        return ParticleCloud(cloud_b.positions.copy(), tb, cloud_a.seed)
    w = (t_mid - ta) / (tb - ta)
    var = (t_mid - ta) * (tb - t_mid) / (tb - ta) / field.horizon
    xa, xb = cloud_a.positions, cloud_b.positions
    L = field.factor_at(xa)
    z = normals(cloud_a.seed, 1_000_000 + int(stream), substep, 0, cloud_a.size, cloud_a.dim)
    mid = (1.0 - w) * xa + w * xb + math.sqrt(var) * np.einsum("mij,mj->mi", L, z)
    return ParticleCloud(mid, t_mid, cloud_a.seed)


def price(cloud: ParticleCloud, payoff):
    """Monte Carlo estimate and standard error of ``E[payoff(X)]``."""
    v = np.asarray(payoff(cloud.positions), dtype=float).reshape(-1)
    if v.shape[0] != cloud.size:
        raise ValueError("payoff must return one value per particle")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


# -- full pipeline --------------------------------------------------------------------


def _sample_rows(step_data, src, u):
    """Exact kernel transitions: for each particle draw a node index from its row."""
    out = np.empty(src.shape[0], dtype=int)
    pot = step_data.potential
    for s_idx in np.unique(src):
        sel = np.flatnonzero(src == s_idx)
        j = step_data.dirac[s_idx]
        if j >= 0:
            out[sel] = j
            continue
        row = pot.tilted_weights(step_data.slopes[s_idx][None, :])[0]
        cdf = np.cumsum(row)
        out[sel] = np.searchsorted(cdf, u[sel] * cdf[-1], side="right").clip(0, row.size - 1)
    return out


def simulate_paths(state, n_paths, seed=0, times=None, substeps=DEFAULT_SUBSTEPS, log_axes=None,
                   knots_per_axis=None, threads=1, scheme="diffusion"):
    """Simulate a calibrated model.

    Parameters
    ----------
    state : CalibrationState
        Calibrated model; its backward-pass potentials define the fields.
    times : sequence of float, optional
        Output dates in ``(0, T_N]``; defaults to the maturities.  Dates
        between maturities are filled by Brownian bridges.
    scheme : {"diffusion", "kernel"}
        ``diffusion`` moves particles with knot-interpolated local covariance
        in ``substeps`` Gaussian moves per interval.  ``kernel`` samples the
        calibrated transition rows between reference nodes exactly, which
        reproduces the model's node-level prices.

    Returns
    -------
    times : ndarray, shape (T,)
    paths : ndarray, shape (T, n_paths, n)
    """
    if scheme not in ("diffusion", "kernel"):
        raise ValueError(f"unknown scheme {scheme!r}")
    mats = [s.time for s in state.specs]
    times = np.asarray(mats if times is None else times, dtype=float)
    if np.any(times <= 0) or np.any(times > mats[-1] + 1e-12):
        raise ValueError("output times must lie in (0, last maturity]")
    mu0 = state.mu0
    if mu0.size == 1:
        src = np.zeros(n_paths, dtype=int)
    else:
        u = uniforms(seed, 0, 0, 0, n_paths, 1)[:, 0]
        cdf = np.cumsum(mu0.weights)
        src = np.searchsorted(cdf, u * cdf[-1], side="right").clip(0, mu0.size - 1)
    cloud = ParticleCloud(mu0.atoms[src], 0.0, seed)
    clouds = [cloud]
    fields = []
    t_prev = 0.0
    for k, (spec, st) in enumerate(zip(state.specs, state.steps)):
        nodes = spec.ref_nodes.atoms
        bounds = (nodes.min(axis=0), nodes.max(axis=0))
        axes = quantile_knots(cloud.positions, knots_per_axis, bounds)
        field = build_sigma_field(st.potential, axes, state.cfg.legendre, horizon=spec.time - t_prev)
        if scheme == "kernel":
            u = uniforms(seed, k + 1, 0, 0, n_paths, 1)[:, 0]
            src = _sample_rows(st, src, u)
            cloud = ParticleCloud(nodes[src], spec.time, seed)
        else:
            cloud = step(cloud, field, 1.0, substeps, log_axes, maturity=k + 1, threads=threads)
            cloud.time = spec.time
        clouds.append(cloud)
        fields.append(field)
        t_prev = spec.time
    grid = [0.0] + mats
    out = np.empty((times.size, n_paths, state.mu0.dim))
    for i, t in enumerate(times):
        k = int(np.searchsorted(grid, t, side="left"))
        if abs(grid[k] - t) <= 1e-12:
            out[i] = clouds[k].positions
        else:
            out[i] = bridge(clouds[k - 1], clouds[k], t, fields[k - 1], stream=k, substep=i).positions
    return times, out
