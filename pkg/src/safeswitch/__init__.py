"""Switching safeguard for uncertified linear feedback gains.

Simulation of the switched closed loop, certificate construction and the
closed-form cost, moment, fallback-probability and gap bounds.
"""

from .bounds import (
    BoundReport,
    build_inputs,
    certify_fallback,
    theorem1_cost_cap,
    theorem3_gaussian,
    theorem4_gap_bound,
    theorem5_heavytail,
    theorem6_gap_bound,
)
from .linalg import find_common_lyapunov, solve_dare, solve_discrete_lyapunov
from .policy import UNBOUNDED, ControllerParams, linear_step, switch_step
from .simulate import (
    LinearController,
    LinearSystem,
    NoiseModel,
    SwitchingController,
    monte_carlo,
    monte_carlo_cost,
    rollout,
)

__version__ = "0.1.0"
