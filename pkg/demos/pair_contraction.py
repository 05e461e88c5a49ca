"""Synchronous coupling: two copies driven by the same noise.

The separation of two paths obeys d(X - Y)/dt = -(grad V(X) - grad V(Y)).
For the Mexican hat V = |x|^4 - |x|^2 the pair contracts on average at the
rate E[4|x|^2 - 2] under e^{-V}, even though V is not convex near the
origin.
"""

import numpy as np

from langevin_sensitivity import SimConfig, build_model
from langevin_sensitivity.analysis import log_separation_slope
from langevin_sensitivity.dynamics import simulate_coupled_pair
from langevin_sensitivity.spectral import mean_min_spec

pot, _ = build_model("mexican_hat", beta=1.0, gamma=1.0, d=2)
start = np.random.default_rng(0).standard_normal((100, 4))
cfg = SimConfig(dt=1e-3, t_final=10.0, n_replicas=100, record_stride=100)
t, sep = simulate_coupled_pair(start[:, :2], start[:, 2:], cfg, pot)
slope, mean_log, gone = log_separation_slope(t, sep, 5.0)
print(f"fitted contraction rate over [5, 10]: {-slope:.3f}")
print(f"mean of min Spec Hess V:             {mean_min_spec(pot):.3f}")
print(f"pairs that coalesced exactly: {gone}")
