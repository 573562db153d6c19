"""Calibration of Hessian martingales to European prices.

Every maturity ``k = 1..N`` carries a reference node set ``rho_k``, a payoff
basis ``h_{ik}`` and target prices ``F_{ik}``.  For coefficients ``c_k`` put
``h_k = sum_i c_{ik} h_{ik}`` and run the backward recursion

    f_{N+1} = 0,   f_k = h_k + phi_{k+1}   (on the maturity-k nodes)
    nu_k = rho_k exp(-f_k),   phi_k = Legendre transform of log E_{nu_k} e^{<k, y>}

The dual objective

    G(c) = sum_k <F_k, c_k> - E_{mu0}[phi_1]

is convex.  Its gradient is ``F_k - (model price of h_{ik})`` where model
prices come from pushing ``mu0`` forward through the kernels
``K_k(y | x) ~ nu_k(y) exp(<grad phi_k(x), y>)``.  Minimizing ``G`` therefore
matches every target; when ``G`` is unbounded below (calendar arbitrage in
the targets) the coefficients run off along a certificate direction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import stats

from .errors import (
    ArbitrageSuspected,
    ConvergenceError,
    DomainError,
    OutsideHullError,
    ReferenceSupportError,
)
from .measures import DiscreteMeasure, product_measure
from .payoffs import (
    Affine,
    Payoff,
    PayoffCombination,
    lower_convex_envelope,
    payoff_from_json,
)
from .potential import DEFAULT_LEGENDRE, LegendreConfig, Potential

log = logging.getLogger(__name__)

_CHUNK = 512


@dataclass(frozen=True)
class CalibrationConfig:
    """Outer-optimizer settings.

    ``divergence_norm`` bounds the coefficients measured in units of each
    payoff's standard deviation under its reference; beyond it the targets are
    reported as arbitrage-suspect.
    """

    price_tol: float = 1e-6
    max_iter: int = 500
    memory: int = 10
    divergence_norm: float = 1e3
    armijo: float = 1e-4
    max_backtracks: int = 40
    legendre: LegendreConfig = DEFAULT_LEGENDRE


DEFAULT_CALIBRATION = CalibrationConfig()


@dataclass
class MaturitySpec:
    """One maturity: reference nodes, payoff basis and target prices."""

    time: float
    ref_nodes: DiscreteMeasure
    basis: list
    targets: np.ndarray
    domain: tuple | None = None  # (lower, upper) box, defaults to the node hull box

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        self.basis = list(self.basis)
        if len(self.basis) != self.targets.shape[0]:
            raise ValueError("basis and targets must have the same length")
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError("maturity time must be positive")
        if np.any(self.ref_nodes.weights <= 0):
            raise ValueError("reference nodes need strictly positive weights")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")

    @property
    def bounds(self):
        if self.domain is not None:
            lo, hi = self.domain
            return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        a = self.ref_nodes.atoms
        return a.min(axis=0), a.max(axis=0)

    def to_json(self):
        out = {
            "time": self.time,
            "ref_nodes": self.ref_nodes.to_json(),
            "basis": [b.to_json() for b in self.basis],
            "targets": self.targets.tolist(),
        }
        if self.domain is not None:
            out["domain"] = [np.asarray(d, dtype=float).tolist() for d in self.domain]
        return out

    @classmethod
    def from_json(cls, data):
        dom = data.get("domain")
        if dom is not None:
            dom = (np.asarray(dom[0], dtype=float), np.asarray(dom[1], dtype=float))
        return cls(
            float(data["time"]),
            DiscreteMeasure.from_json(data["ref_nodes"]),
            [payoff_from_json(b) for b in data["basis"]],
            data["targets"],
            dom,
        )


# -- reference measures -------------------------------------------------------

Z_TAIL = 1e-10


def lognormal_reference(forward, variance, n_nodes=256) -> DiscreteMeasure:
    """Quadrature of a lognormal law with mean ``forward`` and log-variance ``variance``.

    Gauss-Legendre nodes in the standard normal variable on
    ``|z| <= Phi^{-1}(1 - 1e-10)``, then a multiplicative rescaling so that the
    discrete mean equals ``forward`` exactly.
    """
    if forward <= 0 or variance <= 0:
        raise ValueError("forward and variance must be positive")
    zmax = stats.norm.isf(Z_TAIL)
    t, w = leggauss(n_nodes)
    z = zmax * t
    s = math.sqrt(variance)
    wt = w * stats.norm.pdf(z)
    wt /= wt.sum()
    y = np.exp(s * z - 0.5 * variance)
    y *= forward / (wt @ y)
    return DiscreteMeasure(y, wt)


def product_reference(forwards, variances, n_nodes=64) -> DiscreteMeasure:
    """Tensor product of 1-d lognormal quadratures, one per asset."""
    factors = [lognormal_reference(f, v, n_nodes) for f, v in zip(forwards, variances)]
    return product_measure(*factors)


# -- the nested passes ----------------------------------------------------------


@dataclass
class _Step:
    """Backward-pass data attached to one maturity."""

    potential: Potential
    sources: np.ndarray  # (m_src, n): mu0 atoms or previous maturity nodes
    phi: np.ndarray  # (m_src,)
    slopes: np.ndarray  # (m_src, n); nan rows for point-mass transitions
    covariances: np.ndarray  # (m_src, n, n)
    dirac: np.ndarray  # (m_src,) index of the target atom for point-mass rows, else -1
    residuals: np.ndarray  # (m_src,)


class _Problem:
    def __init__(self, specs, mu0: DiscreteMeasure, cfg: CalibrationConfig):
        if not specs:
            raise ValueError("need at least one maturity")
        times = [s.time for s in specs]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("maturities must be strictly increasing")
        n = mu0.dim
        for s in specs:
            if s.ref_nodes.dim != n:
                raise ValueError("all reference nodes must share the dimension of mu0")
        self.specs = list(specs)
        self.mu0 = mu0
        self.cfg = cfg
        self.n = n
        self.features = []
        self.affine = []
        self.scales = []
        for k, s in enumerate(self.specs):
            lo, hi = s.bounds
            for b in s.basis:
                b.check_domain(lo, hi)
            Fm = (np.stack([np.asarray(b(s.ref_nodes.atoms), dtype=float).reshape(-1) for b in s.basis], axis=1)
                  if s.basis else np.zeros((s.ref_nodes.size, 0)))
            aff = np.array([isinstance(b, Affine) for b in s.basis], dtype=bool)
            w = s.ref_nodes.weights
            mean = w @ Fm
            sd = np.sqrt(np.maximum(w @ (Fm - mean) ** 2, 0.0))
            if np.any(sd[~aff] <= 1e-300):
                raise DomainError(f"maturity {k + 1}: a basis payoff is constant on the reference nodes")
            sd[aff] = 1.0
            self._check_independent(k, Fm[:, ~aff])
            self.features.append(Fm)
            self.affine.append(aff)
            self.scales.append(sd)
        self.free = [np.flatnonzero(~a) for a in self.affine]
        self.sizes = [f.size for f in self.free]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.warm = [None] * len(self.specs)

    def _check_independent(self, k, F):
        nodes = self.specs[k].ref_nodes.atoms
        A = np.hstack([np.ones((nodes.shape[0], 1)), nodes, F])
        A = A / np.maximum(np.abs(A).max(axis=0), 1e-300)
        rank = np.linalg.matrix_rank(A, tol=1e-9 * math.sqrt(A.shape[0]))
        if rank < A.shape[1]:
            raise DomainError(
                f"maturity {k + 1}: basis payoffs are linearly dependent modulo affine "
                "functions on the reference nodes"
            )

    # coefficients <-> flat scaled vector
    def unpack(self, u):
        out = []
        for k, idx in enumerate(self.free):
            c = np.zeros(len(self.specs[k].basis))
            c[idx] = u[self.offsets[k]:self.offsets[k + 1]] / self.scales[k][idx]
            out.append(c)
        return out

    def pack(self, coeffs):
        return np.concatenate(
            [np.asarray(c, dtype=float)[idx] * self.scales[k][idx] for k, (c, idx) in enumerate(zip(coeffs, self.free))]
        ) if self.free else np.zeros(0)

    def sources(self, k):
        return self.mu0.atoms if k == 0 else self.specs[k - 1].ref_nodes.atoms


def _solve_sources(pot: Potential, X, k0, cfg: LegendreConfig, maturity: int):
    """Legendre solves at the source points, with point-mass transitions at
    extreme atoms of a 1-d reference."""
    m, n = X.shape
    phi = np.empty(m)
    slopes = np.full((m, n), np.nan)
    cov = np.zeros((m, n, n))
    dirac = np.full(m, -1, dtype=int)
    resid = np.zeros(m)
    nu = pot.nu
    with np.errstate(divide="ignore"):
        lw = np.log(nu.weights) + pot.offsets
    active = np.isfinite(lw)
    atoms = nu.atoms
    lo = atoms[active].min(axis=0)
    hi = atoms[active].max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    edge = np.any(X <= lo + 1e-12 * span, axis=1) | np.any(X >= hi - 1e-12 * span, axis=1)
    for i in np.flatnonzero(edge):
        d = np.abs(atoms - X[i]).max(axis=1)
        j = int(np.argmin(np.where(active, d, np.inf)))
        if n != 1 or d[j] > 1e-12 * (1.0 + np.abs(X[i]).max()):
            raise ReferenceSupportError(
                f"maturity {maturity}: source node {X[i].tolist()} is not inside the "
                "reference support hull; reference supports must be nested",
                maturity=maturity, node=X[i].tolist(),
            )
        # extreme atom: the only martingale transition is the point mass
        dirac[i] = j
        phi[i] = -lw[j]
    inner = np.flatnonzero(~edge)
    if inner.size:
        kk = None if k0 is None else np.where(np.isfinite(k0[inner]), k0[inner], 0.0)
        try:
            res = pot.legendre_batch(X[inner], cfg, kk)
        except (OutsideHullError, ConvergenceError) as exc:
            raise ReferenceSupportError(
                f"maturity {maturity}: Legendre solve failed ({exc}); reference supports "
                "may not be nested", maturity=maturity,
            ) from exc
        phi[inner] = res.values
        slopes[inner] = res.slopes
        cov[inner] = res.covariances
        resid[inner] = res.residuals
    return _Step(pot, X, phi, slopes, cov, dirac, resid)


def _backward(prob: _Problem, coeffs, warm=None):
    N = len(prob.specs)
    steps = [None] * N
    phi_next = None
    for k in range(N - 1, -1, -1):
        spec = prob.specs[k]
        f = prob.features[k] @ coeffs[k]
        if phi_next is not None:
            f = f + phi_next
        pot = Potential(spec.ref_nodes, -f)
        k0 = None if warm is None else warm[k]
        steps[k] = _solve_sources(pot, prob.sources(k), k0, prob.cfg.legendre, k + 1)
        phi_next = steps[k].phi
    G = sum(float(prob.specs[k].targets @ coeffs[k]) for k in range(N)) - float(prob.mu0.weights @ steps[0].phi)
    return steps, G


def _transition(step: _Step, weights):
    """Push source weights through the kernel rows: ``weights @ P``."""
    m_out = step.potential.nu.size
    out = np.zeros(m_out)
    inner = np.flatnonzero(step.dirac < 0)
    for s in range(0, inner.size, _CHUNK):
        idx = inner[s:s + _CHUNK]
        P = step.potential.tilted_weights(step.slopes[idx])
        out += weights[idx] @ P
    d = np.flatnonzero(step.dirac >= 0)
    np.add.at(out, step.dirac[d], weights[d])
    return out


def _forward(prob: _Problem, steps):
    w = prob.mu0.weights
    laws = []
    for step in steps:
        w = _transition(step, w)
        laws.append(w)
    return laws


# -- state ----------------------------------------------------------------------


@dataclass
class CalibrationState:
    """Coefficients, backward-pass potentials and forward prices."""

    specs: list
    mu0: DiscreteMeasure
    coefficients: list
    objective_value: float = float("nan")
    model_prices: list = field(default_factory=list)
    laws: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    cfg: CalibrationConfig = DEFAULT_CALIBRATION

    @property
    def price_residuals(self):
        return [mp - s.targets for mp, s in zip(self.model_prices, self.specs)]

    @property
    def max_residual(self):
        r = [np.abs(x).max() for x in self.price_residuals if x.size]
        return float(max(r)) if r else 0.0

    @property
    def potentials(self):
        return [s.potential for s in self.steps]

    def offsets(self):
        """Per-maturity log-weight offsets ``-f_k`` at the reference nodes."""
        return [s.potential.offsets for s in self.steps]

    def marginal(self, k) -> DiscreteMeasure:
        """Model law at maturity ``k`` (1-based) on the reference nodes."""
        nodes = self.specs[k - 1].ref_nodes.atoms
        return DiscreteMeasure(nodes, self.laws[k - 1], allow_zero=True)

    def to_json(self):
        return {
            "objective": self.objective_value,
            "converged": self.converged,
            "iterations": self.iterations,
            "max_residual": self.max_residual,
            "mu0": self.mu0.to_json(),
            "maturities": [
                {
                    **s.to_json(),
                    "coefficients": np.asarray(c).tolist(),
                    "model_prices": np.asarray(mp).tolist(),
                    "residuals": np.asarray(mp - s.targets).tolist(),
                    "offsets": st.potential.offsets.tolist(),
                    "slopes": {
                        "sources": st.sources.tolist(),
                        "slope": np.where(np.isfinite(st.slopes), st.slopes, None).tolist(),
                    },
                }
                for s, c, mp, st in zip(self.specs, self.coefficients, self.model_prices, self.steps)
            ],
        }

    @classmethod
    def from_json(cls, data, cfg: CalibrationConfig = DEFAULT_CALIBRATION):
        specs = [MaturitySpec.from_json(m) for m in data["maturities"]]
        mu0 = DiscreteMeasure.from_json(data["mu0"])
        coeffs = [np.asarray(m["coefficients"], dtype=float) for m in data["maturities"]]
        return evaluate_state(specs, mu0, coeffs, cfg)


def _as_mu0(mu0, n=None):
    if isinstance(mu0, DiscreteMeasure):
        return mu0
    return DiscreteMeasure.dirac(mu0)


def evaluate_state(specs, mu0, coefficients, cfg: CalibrationConfig = DEFAULT_CALIBRATION) -> CalibrationState:
    """Backward and forward pass at fixed coefficients."""
    mu0 = _as_mu0(mu0)
    prob = _Problem(specs, mu0, cfg)
    coeffs = [np.asarray(c, dtype=float).reshape(len(s.basis)) for c, s in zip(coefficients, specs)]
    steps, G = _backward(prob, coeffs)
    laws = _forward(prob, steps)
    prices = [laws[k] @ prob.features[k] for k in range(len(specs))]
    return CalibrationState(list(specs), mu0, coeffs, G, prices, laws, steps, cfg=cfg)


def backward_pass(state: CalibrationState) -> CalibrationState:
    """Recompute potentials and ``G`` from the state's coefficients (in place)."""
    prob = _Problem(state.specs, state.mu0, state.cfg)
    steps, G = _backward(prob, state.coefficients)
    state.steps, state.objective_value = steps, G
    return state


def model_prices(state: CalibrationState):
    """Forward pass: model prices of every basis payoff, per maturity."""
    if not state.steps:
        backward_pass(state)
    prob = _Problem(state.specs, state.mu0, state.cfg)
    laws = _forward(prob, state.steps)
    state.laws = laws
    state.model_prices = [laws[k] @ prob.features[k] for k in range(len(state.specs))]
    return state.model_prices


def gradient(state: CalibrationState):
    """``dG/dc_{ik} = F_{ik} - model price``, per maturity."""
    prices = model_prices(state)
    return [s.targets - p for s, p in zip(state.specs, prices)]


def objective(specs, mu0, coefficients, cfg: CalibrationConfig = DEFAULT_CALIBRATION) -> float:
    """``G`` at the given coefficients (backward pass only)."""
    prob = _Problem(specs, _as_mu0(mu0), cfg)
    coeffs = [np.asarray(c, dtype=float) for c in coefficients]
    return _backward(prob, coeffs)[1]


# -- outer optimizer --------------------------------------------------------------


class _Evaluator:
    def __init__(self, prob: _Problem):
        self.prob = prob
        self.warm = None
        self.count = 0

    def __call__(self, u):
        """G, gradient in scaled coordinates, and the raw pass; None on failure."""
        prob = self.prob
        coeffs = prob.unpack(u)
        try:
            steps, G = _backward(prob, coeffs, self.warm)
        except ReferenceSupportError:
            return None
        self.count += 1
        laws = _forward(prob, steps)
        prices = [laws[k] @ prob.features[k] for k in range(len(prob.specs))]
        g_raw = [s.targets - p for s, p in zip(prob.specs, prices)]
        g = np.concatenate([g_raw[k][idx] / prob.scales[k][idx] for k, idx in enumerate(prob.free)]) \
            if prob.free else np.zeros(0)
        res = max((float(np.abs(r[idx]).max()) for r, idx in zip(g_raw, prob.free) if idx.size), default=0.0)
        return G, g, res, (steps, laws, prices, coeffs)

    def accept(self, info):
        self.warm = [s.slopes for s in info[0]]


def _two_loop(g, S, Y):
    q = g.copy()
    alpha = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alpha.append((a, rho, s, y))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alpha):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _check_affine_targets(prob: _Problem):
    expected_mean = prob.mu0.mean()
    for k, (spec, aff) in enumerate(zip(prob.specs, prob.affine)):
        for i in np.flatnonzero(aff):
            b = spec.basis[i]
            model = b.a + float(np.asarray(b.b) @ expected_mean)
            if abs(model - spec.targets[i]) > prob.cfg.price_tol:
                direction = [np.zeros(len(s.basis)) for s in prob.specs]
                direction[k][i] = math.copysign(1.0, model - spec.targets[i])
                raise ArbitrageSuspected(
                    f"maturity {k + 1}: affine payoff target {spec.targets[i]} differs from the "
                    f"martingale forward value {model}",
                    direction=direction, slope=-abs(model - spec.targets[i]),
                )


def _envelope_data(prob: _Problem, direction):
    out = []
    for k, (spec, c) in enumerate(zip(prob.specs, direction)):
        info = {"maturity": k + 1}
        if spec.basis and prob.n <= 2:
            lo, hi = spec.bounds
            m = 401 if prob.n == 1 else 41
            axes = [np.linspace(a, b, m) for a, b in zip(lo, hi)]
            h = PayoffCombination(spec.basis, c)
            env = lower_convex_envelope(h, axes)
            vals = h(env.nodes).reshape(env.values.shape)
            info.update(
                envelope_min=float(env.values.min()),
                payoff_min=float(vals.min()),
                max_gap=float((vals - env.values).max()),
            )
        out.append(info)
    return out


def calibrate(specs, mu0, cfg: CalibrationConfig = DEFAULT_CALIBRATION, initial=None) -> CalibrationState:
    """Minimize ``G`` over all coefficients jointly (L-BFGS with backtracking).

    Stops when every non-affine price residual is within ``cfg.price_tol``.
    Raises :class:`ArbitrageSuspected` when the coefficients diverge, and
    :class:`ConvergenceError` at the iteration cap.
    """
    mu0 = _as_mu0(mu0)
    prob = _Problem(specs, mu0, cfg)
    _check_affine_targets(prob)
    ev = _Evaluator(prob)
    u = np.zeros(prob.offsets[-1]) if initial is None else prob.pack(initial)
    first = ev(u)
    if first is None:
        raise ReferenceSupportError("initial backward pass failed; check reference supports")
    G, g, res, info = first
    ev.accept(info)
    S, Y = [], []
    hist = [(u.copy(), G)]
    it = 0
    status = "iteration_limit"
    while True:
        if res <= cfg.price_tol:
            status = "converged"
            break
        if np.abs(u).max(initial=0.0) > cfg.divergence_norm:
            status = "diverging"
            break
        if it >= cfg.max_iter:
            break
        it += 1
        d = -_two_loop(g, S, Y)
        if not g @ d < 0:
            S.clear(), Y.clear()
            d = -g
        if not S:
            d *= min(1.0, 1.0 / max(np.abs(d).max(), 1e-300))
        slope = float(g @ d)
        t = 1.0
        new = None
        for _ in range(cfg.max_backtracks):
            cand = ev(u + t * d)
            if cand is not None:
                G_t, g_t, res_t, _ = cand
                if np.isfinite(G_t) and G_t <= G + cfg.armijo * t * slope:
                    new = cand
                    break
                if np.isfinite(G_t) and G_t <= G + 1e-13 * max(1.0, abs(G)) and res_t < res:
                    new = cand
                    break
            t *= 0.5
        if new is None:
            status = "stalled"
            break
        s_vec = t * d
        G_new, g_new, res, info = new
        y_vec = g_new - g
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            S.append(s_vec)
            Y.append(y_vec)
            if len(S) > cfg.memory:
                S.pop(0), Y.pop(0)
        u = u + s_vec
        G, g = G_new, g_new
        ev.accept(info)
        hist.append((u.copy(), G))
        log.debug("iter %d G=%.12g max residual=%.3e", it, G, res)

    steps, laws, prices, coeffs = info
    state = CalibrationState(list(specs), mu0, coeffs, G, prices, laws, steps, it,
                             status == "converged", cfg)
    if status == "converged":
        return state
    if status == "diverging" or (status == "stalled" and np.abs(u).max(initial=0.0) > 0.1 * cfg.divergence_norm):
        raise _arbitrage(prob, hist, state)
    raise ConvergenceError(
        f"calibration stopped ({status}) after {it} iterations with max price residual {res:.3e}",
        residual=res, iterations=it,
    )


def _arbitrage(prob, hist, state):
    u_end, G_end = hist[-1]
    back = min(len(hist) - 1, 10)
    u_start, G_start = hist[-1 - back]
    du = u_end - u_start
    base = du if np.linalg.norm(du) > 0 else u_end
    nrm = np.abs(base).max()
    direction = prob.unpack(base / nrm)
    scale = max(np.abs(c).max(initial=0.0) for c in direction) or 1.0
    direction = [c / scale for c in direction]
    slope = (G_end - G_start) / max(np.linalg.norm(du), 1e-300)
    env = _envelope_data(prob, direction)
    return ArbitrageSuspected(
        "calibration objective decreases without bound along a coefficient direction; "
        "targets inconsistent / arbitrage suspected",
        direction=direction, slope=float(slope), envelopes=env, state=state,
    )


def calibrate_sequential(spec: MaturitySpec, m1, cfg: CalibrationConfig = DEFAULT_CALIBRATION) -> CalibrationState:
    """Single-step calibration from a fully known initial law ``m1``.

    In dimension two and higher coercivity can fail for generic payoff spaces,
    so :class:`ArbitrageSuspected` may be raised even for consistent targets.
    """
    return calibrate([spec], _as_mu0(m1), cfg)
