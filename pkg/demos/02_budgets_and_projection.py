"""
Perturbation budgets
====================

The crafting loops keep iterates inside a ball around the clean image. This
shows the three norms, a mixed budget and the checks on a stored poison.
"""

import numpy as np

from sepkit.budget import PerturbationBudget, budget_violations, perturbation_norms, project

rng = np.random.default_rng(0)
x0 = rng.random((2, 3, 8, 8))
x = x0 + rng.normal(0, 0.3, size=x0.shape)

linf = PerturbationBudget(eps_linf=8 / 255)
l2 = PerturbationBudget(norms={"l2"}, eps_l2=0.5)

for b, norm in ((linf, "linf"), (l2, "l2")):
    p = project(x, x0, b)
    print(norm, {k: np.round(v, 4) for k, v in perturbation_norms(p, x0).items() if k in ("linf", "l2", "l0")})
    # projecting twice changes nothing
    assert np.array_equal(project(p, x0, b), p)

# the l0 budget counts spatial pixels; crafting saturates the top ones per step
from sepkit.crafting import apply_l0

g = rng.normal(size=x0.shape)
x_l0 = apply_l0(x0, x0, g, eps_l0=3)
print("l0 changed pixels per image", perturbation_norms(x_l0, x0)["l0"])

# a mixed linf+l2 budget and a check that reports what went wrong
mixed = PerturbationBudget(norms={"linf", "l2"}, eps_linf=8 / 255, eps_l2=0.5)
print(budget_violations(x, x0, mixed)[:2])
