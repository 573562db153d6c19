"""European payoffs of linear growth and lower convex envelopes.

Three structured kinds span the payoff space used for calibration:
affine functions, calls on a linear combination of the coordinates, and
cross (exchange/FX-cross) options ``(y_i - K y_j)^+``.  Axis indices are
0-based.

The envelope tools compute ``conv(h)``, the largest convex function below
``h`` on a box domain, either by a double discrete Legendre transform on a
grid or as the large-``r`` limit of ``phi_{rh} / r``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError
from .measures import DiscreteMeasure
from .potential import DEFAULT_LEGENDRE, LegendreConfig, Potential


class Payoff:
    """Base class; subclasses are callables on arrays of shape ``(..., n)``."""

    dim: int | None = None

    def __call__(self, y):
        raise NotImplementedError

    def recession(self, d):
        """Asymptotic slope ``lim_t h(t d)/t`` (positively homogeneous part)."""
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    def check_domain(self, lower, upper):
        """Reject payoffs whose kink does not cut the interior of the box."""


def _as_points(y, n):
    y = np.asarray(y, dtype=float)
    if n is not None and y.shape[-1:] != (n,):
        if n == 1 and (y.ndim == 0 or y.shape[-1] != 1):
            y = y[..., None]
        else:
            raise ValueError(f"expected points of dimension {n}, got shape {y.shape}")
    return y


def _linear_range(c, lower, upper):
    """inf and sup of ``<c, y>`` over the box."""
    lo = np.where(c > 0, c * lower, np.where(c < 0, c * upper, 0.0))
    hi = np.where(c > 0, c * upper, np.where(c < 0, c * lower, 0.0))
    with np.errstate(invalid="ignore"):
        return float(np.sum(lo)), float(np.sum(hi))


@dataclass(frozen=True)
class Affine(Payoff):
    a: float
    b: tuple

    def __init__(self, a, b):
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "b", tuple(float(v) for v in np.atleast_1d(b)))

    @property
    def dim(self):
        return len(self.b)

    def __call__(self, y):
        y = _as_points(y, self.dim)
        return self.a + y @ np.asarray(self.b)

    def recession(self, d):
        return np.asarray(d, dtype=float) @ np.asarray(self.b)

    def to_json(self):
        return {"kind": "affine", "a": self.a, "b": list(self.b)}


@dataclass(frozen=True)
class Call(Payoff):
    """``(<weights, y> - strike)^+``."""

    weights: tuple
    strike: float

    def __init__(self, weights, strike):
        w = tuple(float(v) for v in np.atleast_1d(weights))
        if not all(np.isfinite(w)) or not np.isfinite(strike):
            raise ValueError("call parameters must be finite")
        if not any(w):
            raise ValueError("call weights must not all vanish")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "strike", float(strike))

    @property
    def dim(self):
        return len(self.weights)

    def __call__(self, y):
        y = _as_points(y, self.dim)
        return np.maximum(y @ np.asarray(self.weights) - self.strike, 0.0)

    def recession(self, d):
        return np.maximum(np.asarray(d, dtype=float) @ np.asarray(self.weights), 0.0)

    def check_domain(self, lower, upper):
        lo, hi = _linear_range(np.asarray(self.weights), lower, upper)
        if not lo < self.strike < hi:
            raise DomainError(
                f"call strike {self.strike} not strictly inside the domain range ({lo}, {hi})"
            )

    def to_json(self):
        return {"kind": "call", "weights": list(self.weights), "strike": self.strike}


class Cross(Payoff):
    """``(y_i - strike * y_j)^+`` with 0-based axes ``i != j``."""

    def __init__(self, i, j, strike, dim=None):
        i, j = int(i), int(j)
        if i == j or i < 0 or j < 0:
            raise ValueError("cross option needs two distinct nonnegative axes")
        if not np.isfinite(strike):
            raise ValueError("strike must be finite")
        self.i, self.j, self.strike = i, j, float(strike)
        self.dim = max(i, j) + 1 if dim is None else int(dim)

    def __eq__(self, other):
        return isinstance(other, Cross) and (self.i, self.j, self.strike) == (other.i, other.j, other.strike)

    def __hash__(self):
        return hash(("cross", self.i, self.j, self.strike))

    def __repr__(self):
        return f"Cross(i={self.i}, j={self.j}, strike={self.strike})"

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return np.maximum(y[..., self.i] - self.strike * y[..., self.j], 0.0)

    def _coef(self, n):
        c = np.zeros(n)
        c[self.i] += 1.0
        c[self.j] -= self.strike
        return c

    def recession(self, d):
        d = np.asarray(d, dtype=float)
        return np.maximum(d[..., self.i] - self.strike * d[..., self.j], 0.0)

    def check_domain(self, lower, upper):
        lo, hi = _linear_range(self._coef(len(lower)), lower, upper)
        if not lo < 0.0 < hi:
            raise DomainError(f"cross strike {self.strike} does not cut the domain interior")

    def to_json(self):
        return {"kind": "cross", "i": self.i, "j": self.j, "strike": self.strike}


def payoff_from_json(data: dict) -> Payoff:
    kind = data.get("kind")
    if kind == "affine":
        return Affine(data.get("a", 0.0), data["b"])
    if kind == "call":
        return Call(data["weights"], data["strike"])
    if kind == "cross":
        return Cross(data["i"], data["j"], data["strike"], dim=data.get("dimension"))
    raise ValueError(f"unknown payoff kind {kind!r}")


class PayoffCombination:
    """``sum_i coefficients[i] * basis[i](y)``."""

    def __init__(self, basis, coefficients=None):
        self.basis = list(basis)
        if coefficients is None:
            coefficients = np.zeros(len(self.basis))
        self.coefficients = np.asarray(coefficients, dtype=float).reshape(-1)
        if self.coefficients.shape[0] != len(self.basis):
            raise ValueError("one coefficient per basis payoff required")

    def features(self, y) -> np.ndarray:
        """Basis payoffs at ``y``; shape ``(..., len(basis))``."""
        return np.stack([np.asarray(b(y), dtype=float) for b in self.basis], axis=-1)

    def __call__(self, y):
        return self.features(y) @ self.coefficients

    def recession(self, d):
        return sum(c * b.recession(d) for c, b in zip(self.coefficients, self.basis))

    def to_json(self):
        return {
            "basis": [b.to_json() for b in self.basis],
            "coefficients": self.coefficients.tolist(),
        }

    @classmethod
    def from_json(cls, data):
        return cls([payoff_from_json(b) for b in data["basis"]], data.get("coefficients"))


def evaluate(p, y):
    """Value of a payoff or combination at ``y`` (vectorized over leading axes)."""
    return p(y)


# -- lower convex envelope ---------------------------------------------------


@dataclass
class Envelope:
    """Grid envelope.  ``values`` is ``-inf`` everywhere when ``bounded`` is false."""

    values: np.ndarray
    bounded: bool
    nodes: np.ndarray
    slopes: np.ndarray


def _grid_nodes(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _fd_slopes(values, axes):
    out = []
    for i, ax in enumerate(axes):
        d = np.diff(values, axis=i) / np.expand_dims(
            np.diff(ax), tuple(j for j in range(len(axes)) if j != i)
        )
        out.append(d)
    return out


def _max_affine(nodes, f, K, chunk=512):
    """``out[i] = max_j (<K_i, nodes_j> - f_j)`` in memory-bounded chunks."""
    out = np.empty(K.shape[0])
    for s in range(0, K.shape[0], chunk):
        out[s:s + chunk] = (K[s:s + chunk] @ nodes.T - f[None, :]).max(axis=1)
    return out


def has_affine_minorant(recession, n, lower_unbounded, upper_unbounded) -> bool:
    """Whether a linear ``k`` with ``<k, d> <= recession(d)`` exists on the
    recession cone of the box.

    The cone is sampled at the integer directions in ``{-2..2}^n``; for the
    piecewise-linear payoffs here this is exact whenever the kinks have small
    rational slopes and is a close approximation otherwise.
    """
    choices = []
    for i in range(n):
        c = [0]
        if upper_unbounded[i]:
            c += [1, 2]
        if lower_unbounded[i]:
            c += [-1, -2]
        choices.append(c)
    dirs = np.array([d for d in itertools.product(*choices) if any(d)], dtype=float)
    if dirs.size == 0:
        return True
    rhs = np.array([float(recession(d)) for d in dirs])
    res = linprog(np.zeros(n), A_ub=dirs, b_ub=rhs, bounds=[(None, None)] * n, method="highs")
    return res.status == 0


def lower_convex_envelope(h, axes, lower_unbounded=None, upper_unbounded=None, k_points=None) -> Envelope:
    """Lower convex envelope on a rectangular grid.

    Parameters
    ----------
    h : callable or ndarray
        Function on ``(..., n)`` points, or its values on the grid with shape
        ``tuple(len(ax) for ax in axes)``.
    axes : sequence of 1-d arrays
        Grid coordinates along each axis.
    lower_unbounded, upper_unbounded : sequence of bool, optional
        Whether the domain extends to infinity beyond the grid on each side.
        When it does, the envelope is ``-inf`` if ``h`` has no affine minorant
        at infinity (asymptotic slopes come from ``h.recession`` if available,
        else from end finite differences of the grid values).
    k_points : int, optional
        Slope grid points per axis (default: nodes per axis, doubled in 1-d).

    The second transform is evaluated at the grid nodes, so the result is
    ``<= h`` there, and convex along every grid line.
    """
    axes = [np.asarray(ax, dtype=float) for ax in axes]
    n = len(axes)
    shape = tuple(len(ax) for ax in axes)
    nodes = _grid_nodes(axes)
    if callable(h):
        values = np.asarray(h(nodes), dtype=float).reshape(shape)
    else:
        values = np.asarray(h, dtype=float).reshape(shape)
    if not np.all(np.isfinite(values)):
        raise ValueError("function values on the grid must be finite")
    lower_unbounded = [False] * n if lower_unbounded is None else list(lower_unbounded)
    upper_unbounded = [False] * n if upper_unbounded is None else list(upper_unbounded)
    fd = _fd_slopes(values, axes)

    if any(lower_unbounded) or any(upper_unbounded):
        if hasattr(h, "recession"):
            rec = h.recession
        else:
            rec = _fd_recession(fd, n)
        if not has_affine_minorant(rec, n, lower_unbounded, upper_unbounded):
            return Envelope(np.full(shape, -np.inf), False, nodes, np.empty((0, n)))

    f = values.ravel()
    kaxes = []
    for i in range(n):
        lo, hi = float(fd[i].min()), float(fd[i].max())
        m = k_points or (2 * shape[i] if n == 1 else shape[i])
        grid = np.linspace(lo, hi, max(m, 2))
        if n == 1:
            # exact chord slopes make the transform reproduce piecewise-linear
            # convex inputs up to rounding
            grid = np.unique(np.concatenate([grid, fd[i].ravel()]))
        kaxes.append(grid)
    K = _grid_nodes(kaxes)
    fstar = _max_affine(nodes, f, K)
    env = _max_affine(K, fstar, nodes)
    env = np.minimum(env, f)
    return Envelope(env.reshape(shape), True, nodes, K)


def _fd_recession(fd, n):
    """Recession slopes estimated from the grid end differences (axis lines only)."""
    plus = np.array([float(np.min(np.take(fd[i], -1, axis=i))) for i in range(n)])
    minus = np.array([float(np.max(np.take(fd[i], 0, axis=i))) for i in range(n)])

    def rec(d):
        d = np.asarray(d, dtype=float)
        return float(np.sum(np.where(d > 0, d * plus, d * minus)))

    return rec


# -- large-r limit via the potential ------------------------------------------


@dataclass
class EnvelopeLimitReport:
    r: np.ndarray  # (R,)
    probes: np.ndarray  # (P, n)
    scaled_phi: np.ndarray  # (R, P): phi_{rh}(x) / r
    slopes: np.ndarray  # (R, P, n): maximizing k for the scaled problem
    psi: np.ndarray  # (R, P): psi_r at the final-r slopes
    envelope: np.ndarray | None  # (P,) grid envelope at the probes
    psi_nondecreasing: bool
    phi_nonincreasing: bool

    @property
    def gap(self):
        if self.envelope is None:
            return None
        return self.scaled_phi[-1] - self.envelope


def scaled_log_mgf(nu: DiscreteMeasure, hvals, r, k):
    """``psi_r(k) = (1/r) log E_nu[exp(r(<k, y> - h(y)))]``."""
    pot = Potential(nu, -r * np.asarray(hvals))
    return pot.log_mgf(r * np.asarray(k, dtype=float)) / r


def envelope_limit_check(h, nu: DiscreteMeasure, probes, r_schedule=(1, 10, 100, 1000),
                         envelope=None, cfg: LegendreConfig = DEFAULT_LEGENDRE,
                         rtol=1e-12) -> EnvelopeLimitReport:
    """Evaluate ``phi_{rh}(x) / r`` over a schedule of ``r``.

    ``phi_{rh}`` is the Legendre transform of ``log E_nu[exp(<k, y> - r h(y))]``.
    At each probe the values decrease to ``conv(h)(x)`` as ``r`` grows, since
    ``psi_r`` increases with ``r``; both monotonicity checks are reported
    (with relative slack ``rtol``).  ``envelope`` optionally gives
    reference envelope values at the probes.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.shape[1] != nu.dim:
        probes = probes.reshape(-1, nu.dim)
    hvals = np.asarray(h(nu.atoms), dtype=float).reshape(-1)
    rs = np.asarray(r_schedule, dtype=float)
    vals = np.empty((rs.size, probes.shape[0]))
    slopes = np.empty((rs.size, probes.shape[0], nu.dim))
    pots = []
    k0 = None
    for i, r in enumerate(rs):
        pot = Potential(nu, -r * hvals)
        pots.append(pot)
        res = pot.legendre_batch(probes, cfg, k0=None if k0 is None else r * k0)
        vals[i] = res.values / r
        slopes[i] = res.slopes / r
        k0 = slopes[i]
    # psi_r at the terminal slopes, for every r
    kt = slopes[-1]
    psi = np.empty_like(vals)
    for i, (r, pot) in enumerate(zip(rs, pots)):
        psi[i] = np.array([pot.log_mgf(r * k) / r for k in kt])
    scale = 1.0 + np.abs(psi).max()
    psi_ok = bool(np.all(np.diff(psi, axis=0) >= -rtol * scale))
    vscale = 1.0 + np.abs(vals).max()
    phi_ok = bool(np.all(np.diff(vals, axis=0) <= rtol * vscale))
    env = None if envelope is None else np.asarray(envelope, dtype=float).reshape(-1)
    return EnvelopeLimitReport(rs, probes, vals, slopes, psi, env, psi_ok, phi_ok)
