"""Swap one call price between two dates and watch calibration flag it."""

import math

from scipy.stats import norm

from hessmart.calibration import MaturitySpec, calibrate, lognormal_reference
from hessmart.errors import ArbitrageSuspected
from hessmart.payoffs import Call


def black(F, K, v):
    s = math.sqrt(v)
    d1 = (math.log(F / K) + v / 2) / s
    return F * norm.cdf(d1) - K * norm.cdf(d1 - s)


strikes = [0.9, 1.0, 1.1]
specs = [
    MaturitySpec(t, lognormal_reference(1.0, v), [Call([1.0], K) for K in strikes], [black(1, K, v) for K in strikes])
    for t, v in ((1.0, 0.04), (2.0, 0.08))
]
print("consistent targets:", calibrate(specs, [1.0]).max_residual)

specs[0].targets[1], specs[1].targets[1] = specs[1].targets[1], specs[0].targets[1]
try:
    calibrate(specs, [1.0])
except ArbitrageSuspected as exc:
    print("flagged:", exc)
    for k, d in enumerate(exc.direction, 1):
        print(f"  direction at date {k}: {d.round(3)}")
