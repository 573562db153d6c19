"""Calibration problems with known consistent (or deliberately broken) targets."""

import math

import numpy as np
from scipy.stats import norm

from hessmart.calibration import MaturitySpec, lognormal_reference, product_reference
from hessmart.oracles import Bernoulli
from hessmart.payoffs import Call, Cross

BINOMIAL_STRIKES = (0.3, 0.5, 0.7)
LOGNORMAL_STRIKES = (0.9, 1.0, 1.1)


def black(forward, strike, variance):
    s = math.sqrt(variance)
    d1 = (math.log(forward / strike) + 0.5 * variance) / s
    return forward * norm.cdf(d1) - strike * norm.cdf(d1 - s)


def binomial_specs(x0=0.5, N=4, strikes=BINOMIAL_STRIKES):
    """Two maturities of the lattice chain with step ``Binomial(N, x) / N``."""
    laws = Bernoulli(0.5, N).chain_law(x0, 2)
    specs = []
    for t, law in zip((1.0, 2.0), laws):
        targets = [law.weights @ np.maximum(law.atoms[:, 0] - K, 0.0) for K in strikes]
        specs.append(MaturitySpec(t, law, [Call([1.0], K) for K in strikes], targets))
    return specs, laws


def lognormal_specs(variances=(0.04, 0.08), strikes=LOGNORMAL_STRIKES, flip=None, n_nodes=256):
    """One asset, Black targets; ``flip=i`` swaps strike ``i`` prices across the two dates."""
    specs = []
    for t, v in zip((1.0, 2.0), variances):
        targets = [black(1.0, K, v) for K in strikes]
        specs.append(MaturitySpec(t, lognormal_reference(1.0, v, n_nodes), [Call([1.0], K) for K in strikes], targets))
    if flip is not None:
        a, b = specs[0].targets[flip], specs[1].targets[flip]
        specs[0].targets[flip], specs[1].targets[flip] = b, a
    return specs


def product_specs(ref_var=0.04, variances=(0.06, 0.05), strikes=LOGNORMAL_STRIKES, n_nodes=64):
    """Two assets, three calls per axis and three cross options at one date.

    Targets come from independent lognormal assets: the cross ``(y0 - K y1)^+``
    is an exchange option with log-variance ``v0 + v1``.
    """
    basis, targets = [], []
    for axis, v in enumerate(variances):
        for K in strikes:
            w = [0.0, 0.0]
            w[axis] = 1.0
            basis.append(Call(w, K))
            targets.append(black(1.0, K, v))
    for K in strikes:
        basis.append(Cross(0, 1, K))
        targets.append(black(1.0, K, sum(variances)))
    ref = product_reference([1.0, 1.0], [ref_var, ref_var], n_nodes)
    return [MaturitySpec(1.0, ref, basis, targets)]
