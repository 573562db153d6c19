"""Decide convex order for a few pairs and show the kernel or the witness."""

import numpy as np

from hessmart import DiscreteMeasure
from hessmart.strassen import brute_force_coupling, check_convex_order, kernel_matrix

pairs = {
    "point vs two-point": (DiscreteMeasure([0.0], [1.0]), DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])),
    "narrow vs wide": (DiscreteMeasure([-0.5, 0.5], [0.5, 0.5]), DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])),
    "wide vs narrow": (DiscreteMeasure([-2.0, 2.0], [0.5, 0.5]), DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])),
    "same extreme atoms": (DiscreteMeasure([-1.0, 1.0], [0.5, 0.5]), DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])),
}

np.set_printoptions(precision=4, suppress=True)
for name, (m1, m2) in pairs.items():
    v = check_convex_order(m1, m2)
    print(f"{name}: ordered={v.ordered} boundary={v.boundary} ({v.reason})")
    if v.ordered:
        print("  kernel rows:\n", kernel_matrix(v.solution, m1, m2))
        print("  LP coupling:\n", brute_force_coupling(m1, m2))
    else:
        print(f"  witness pieces {v.witness.to_json()}  gap {v.gap:.4f}")

# a random two-dimensional instance
rng = np.random.default_rng(0)
y = rng.normal(size=(6, 2))
rows = rng.dirichlet(np.ones(6), size=3)
p = rng.dirichlet(np.ones(3))
m1, m2 = DiscreteMeasure(rows @ y, p), DiscreteMeasure(y, p @ rows)
v = check_convex_order(m1, m2)
s = v.solution
print(f"2-d: ordered={v.ordered}, {s.iterations} Newton steps, residuals {s.residual_mass:.1e} / {s.residual_moment:.1e}")
