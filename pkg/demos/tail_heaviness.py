"""Heavy tails of the tangent in deeper double wells.

The tangent picks up large values when a path lingers near the barrier top,
where V'' < 0.  The survival function of |T_t| then decays like a power law
whose exponent gets closer to -1 as the well deepens; a slope above -2
means the variance of the tangent is infinite.
"""

from langevin_sensitivity import SimConfig, build_model
from langevin_sensitivity.analysis import empirical_tail_cdf, fit_log_slope
from langevin_sensitivity.dynamics import final_states

for c in (2.0, 3.0, 4.0, 5.0):
    pot, pert = build_model("double_well", c=c)
    cfg = SimConfig(dt=1e-3, t_final=20.0, n_replicas=20000)
    _, T, alive = final_states(cfg, pot, pert)
    tail = fit_log_slope(empirical_tail_cdf(T[alive, 0]))
    lo, hi = tail.fit_range
    print(f"c={c}: slope {tail.slope:.2f} +- {tail.slope_se:.2f} on [{lo:.3g}, {hi:.3g}]")
