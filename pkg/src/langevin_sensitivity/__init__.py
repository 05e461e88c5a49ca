"""Sensitivity of steady-state averages of overdamped Langevin dynamics.

Estimates d/dlambda of averages under the invariant measure of
``dX = F_lambda(X) dt + sqrt(2) dW`` with tangent-vector, Green-Kubo and
finite-difference estimators, and checks the spectral conditions that keep
the tangent vector integrable.
"""

__version__ = "0.1.0"

from .errors import ConvViolation, DivergenceError, NumericError, UsageError  # noqa: E402
from .potentials import CATALOG, PerturbationModel, PotentialModel, build_model, eval_bundle, min_spec  # noqa: E402
from .dynamics import InitialCondition, SimConfig  # noqa: E402
from .estimators import (  # noqa: E402
    EstimatorResult,
    Observable,
    ensemble_sensitivity,
    ergodic_sensitivity,
    green_kubo_sensitivity,
    make_observable,
    nemd_finite_difference,
)
