import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .model import DEFAULT_STEPS, ModelParams, StateVector, Trajectory, integrate

if TYPE_CHECKING:
    from .policy import ForwardingPolicy

# Define the public API of this module
__all__ = [
    "ConstraintInactiveError",
    "InfeasibleHorizonError",
    "StoppingPenalty",
    "delivery_from_exposure",
    "delivery_probability",
    "throughput_ok",
    "energy_cost",
    "unbiased_cost",
    "stopping_objective",
    "zero_control_horizon",
    "hitting_time",
]

#: Slack allowed when comparing E(T) against the required exposure
THROUGHPUT_TOL = 1e-12
#: How close E(T) must be to the required exposure for the constraint to be active
ACTIVE_TOL = 1e-6


class ConstraintInactiveError(Exception):
    """Raised if a stopping objective is evaluated where E(T) is not at the
    required exposure"""


class InfeasibleHorizonError(Exception):
    """Raised if no infective can reach the destination under zero control"""


@dataclass(frozen=True)
class StoppingPenalty:
    """Penalty ``f(T) = scale * T ** exponent`` on the terminal time

    Attributes:
        exponent: Power k > 0
        scale: Positive multiplier
    """

    exponent: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.exponent > 0 and self.scale > 0):
            raise ValueError(
                f"Stopping penalty needs exponent > 0 and scale > 0, got {self}"
            )

    def __call__(self, T: float) -> float:
        return self.scale * T**self.exponent

    def derivative(self, T: float) -> float:
        return self.scale * self.exponent * T ** (self.exponent - 1)


def delivery_from_exposure(E: float, params: ModelParams) -> float:
    """Probability that the destination met a capable infective given exposure E"""
    return -math.expm1(-params.beta0 * E)


def delivery_probability(traj: Trajectory, params: ModelParams) -> float:
    """Delivery probability ``1 - exp(-beta0 * E(T))`` of a trajectory"""
    return delivery_from_exposure(float(traj.E[-1]), params)


def throughput_ok(traj: Trajectory, params: ModelParams) -> bool:
    """True if the trajectory meets the mandated delivery probability"""
    return bool(traj.E[-1] >= params.required_exposure - THROUGHPUT_TOL)


def energy_cost(state: StateVector, params: ModelParams) -> float:
    """Terminal penalty ``sum_i a_i (S_i + I_i)`` of a state"""
    return float(np.dot(params.a, state.mass()))


def unbiased_cost(traj: Trajectory, params: ModelParams) -> float:
    """Energy cost at the end of a trajectory minus that at its start"""
    return energy_cost(traj.final, params) - energy_cost(traj.initial, params)


def stopping_objective(
    traj: Trajectory, params: ModelParams, fpen: StoppingPenalty
) -> float:
    """Objective ``f(T) + energy_cost`` of a stopping-time candidate

    Raises:
        ConstraintInactiveError: If E(T) is not within `ACTIVE_TOL` of the
            required exposure
    """
    gap = float(traj.E[-1]) - params.required_exposure
    if abs(gap) > ACTIVE_TOL:
        raise ConstraintInactiveError(
            f"Throughput constraint not active at T={traj.end_time}: "
            f"E(T) differs from the requirement by {gap}"
        )
    return fpen(traj.end_time) + energy_cost(traj.final, params)


def zero_control_horizon(params: ModelParams, init: StateVector) -> float:
    """Time after which zero control alone meets the delivery requirement

    Raises:
        InfeasibleHorizonError: If no infective has at least s units of energy
    """
    spreaders = float(init.I[params.s :].sum())
    if spreaders <= 0:
        raise InfeasibleHorizonError(
            f"No infectives at levels >= {params.s}, zero control never delivers"
        )
    return params.required_exposure / spreaders


def hitting_time(
    policy: "ForwardingPolicy",
    params: ModelParams,
    init: StateVector,
    steps: int = DEFAULT_STEPS,
) -> Optional[float]:
    """First time at which the exposure reaches the required level

    Integrates to ``params.horizon``, brackets the crossing on the grid and
    solves for it on the cubic Hermite interpolant of E over that step (its
    derivative is known exactly at each grid point).

    Returns:
        The hitting time, or None if the requirement is not met by the horizon
    """
    target = params.required_exposure
    if target <= 0:
        return 0.0
    traj = integrate(policy, params, init, steps=steps)
    E = traj.E
    if E[-1] < target - THROUGHPUT_TOL:
        return None
    if E[-1] < target:
        # Met within tolerance only at the very end
        return traj.end_time
    k = int(np.argmax(E >= target))
    step = slice(k - 1, k + 1)
    spline = CubicHermiteSpline(
        traj.times[step], E[step], traj.I[step, params.s :].sum(axis=1)
    )
    roots = spline.solve(target, extrapolate=False)
    return float(roots.min()) if len(roots) else float(traj.times[k])
