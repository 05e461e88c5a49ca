"""Where do the sufficient conditions hold for the double well?

For each c the script computes the spectral gap eta of the generator, and
rho = -(inf phi) E[phi^2] / E[phi]^2 with phi = V''.  The condition for a
bounded tangent variance compares rho with eta; the condition for bounded
second moments compares 2 rho with eta.  The crossings mark the largest
well depth covered by each condition.
"""

import numpy as np

from langevin_sensitivity import build_model
from langevin_sensitivity.spectral import find_crossing, poincare_constant, rho_criterion, torus_alpha0

cs = np.round(np.arange(1, 31) * 0.1, 10)
rows = []
for c in cs:
    pot, _ = build_model("double_well", c=c)
    eta, _ = poincare_constant(pot)
    rows.append((c, eta, rho_criterion(pot)))
c, eta, rho = map(np.array, zip(*rows))

print("   c      eta      rho")
for row in rows[::3]:
    print(f"{row[0]:4.1f}  {row[1]:7.4f}  {row[2]:7.4f}")
print(f"eta = rho   at c = {find_crossing(c, eta, rho)}")
print(f"eta = 2 rho at c = {find_crossing(c, eta, 2 * rho)}")
print(f"torus threshold alpha0 = {torus_alpha0():.6f}")
