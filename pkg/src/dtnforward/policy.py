from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Type

import numpy as np

from .metrics import delivery_from_exposure
from .model import (
    DEFAULT_STEPS,
    FloatArray,
    ModelParams,
    ParameterError,
    StateVector,
    integrate,
)

# Define the public API of this module
__all__ = [
    "HeuristicClass",
    "FeedbackLatch",
    "ForwardingPolicy",
    "Threshold",
    "StaticEnergy",
    "StaticTime",
    "ProbabilityThreshold",
    "InfectionThreshold",
    "One",
    "Zero",
    "PiecewiseConstant",
    "control_at",
    "breakpoints",
    "policy_to_dict",
    "policy_from_dict",
]

TimedControl = Callable[[float], FloatArray]


class HeuristicClass(Enum):
    """Heuristic policy families that the optimal threshold policy is compared to"""

    #: One drop from a common value to 0, shared by all levels
    STATIC_ENERGY = "static-energy"
    #: A constant value per level over the whole horizon
    STATIC_TIME = "static-time"
    #: One constant value for every level over the whole horizon
    STATIC_UNIFORM = "static-uniform"
    #: Forward until the delivery probability reaches q (optimized flooding)
    PROBABILITY_THRESHOLD = "probability-threshold"
    #: Forward until the capable infective fraction reaches c
    INFECTION_THRESHOLD = "infection-threshold"
    #: Always forward (epidemic routing)
    ONE = "one"
    #: Never forward (spray and wait, direct transmission)
    ZERO = "zero"


@dataclass
class FeedbackLatch:
    """Caller-owned memory of whether a feedback policy has dropped to zero"""

    dropped: bool = False


def _check_fraction(name: str, value: float):
    if not 0 <= value <= 1:
        raise ParameterError(f"{name} must lie in [0, 1], got {value}")


def _check_length(name: str, values: Tuple, params: ModelParams):
    if len(values) != params.n_controls:
        raise ParameterError(
            f"{name} has {len(values)} entries, expected {params.n_controls} for "
            f"levels {params.s}..{params.B}"
        )


@dataclass(frozen=True)
class ForwardingPolicy:
    """Abstract baseclass for the closed family of forwarding policies"""

    def compile(
        self, params: ModelParams, init: StateVector, steps: int = DEFAULT_STEPS
    ) -> "ForwardingPolicy":
        """Return an equivalent policy whose control depends on time only"""
        return self

    def timed_control(self, params: ModelParams) -> TimedControl:
        """Return ``u(t)`` over levels s..B for a policy that depends on time only"""
        raise NotImplementedError(self)

    def breakpoints(
        self,
        params: ModelParams,
        init: Optional[StateVector] = None,
        steps: int = DEFAULT_STEPS,
    ) -> List[float]:
        """Sorted times in (0, horizon) at which the control vector changes"""
        return []


@dataclass(frozen=True)
class Threshold(ForwardingPolicy):
    """Forward at level i while ``t < times[i - s]``, then stop

    Attributes:
        times: Cutoff time per level s..B
    """

    times: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if any(t < 0 for t in self.times):
            raise ParameterError(f"Threshold times must be >= 0, got {self.times}")

    def timed_control(self, params: ModelParams) -> TimedControl:
        _check_length("Threshold", self.times, params)
        if any(t > params.horizon for t in self.times):
            raise ParameterError(
                f"Threshold times {self.times} exceed horizon {params.horizon}"
            )
        cutoffs = np.array(self.times)
        return lambda t: (t < cutoffs).astype(np.float64)

    def breakpoints(self, params, init=None, steps=DEFAULT_STEPS) -> List[float]:
        return sorted({t for t in self.times if 0 < t < params.horizon})


@dataclass(frozen=True)
class StaticEnergy(ForwardingPolicy):
    """Forward at every level with probability ``value`` until ``jump``

    Attributes:
        jump: Time at which all controls drop to 0
        value: Control before the drop
    """

    jump: float
    value: float = 1.0

    def __post_init__(self):
        _check_fraction("StaticEnergy value", self.value)
        if self.jump < 0:
            raise ParameterError(f"StaticEnergy jump must be >= 0, got {self.jump}")

    def timed_control(self, params: ModelParams) -> TimedControl:
        before = np.full(params.n_controls, float(self.value))
        after = np.zeros(params.n_controls)
        return lambda t: before if t < self.jump else after

    def breakpoints(self, params, init=None, steps=DEFAULT_STEPS) -> List[float]:
        if self.value > 0 and 0 < self.jump < params.horizon:
            return [float(self.jump)]
        return []


@dataclass(frozen=True)
class StaticTime(ForwardingPolicy):
    """Constant forwarding probability per level over the whole horizon

    Attributes:
        values: Control per level s..B
    """

    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            _check_fraction("StaticTime value", v)

    def timed_control(self, params: ModelParams) -> TimedControl:
        _check_length("StaticTime", self.values, params)
        u = np.array(self.values)
        return lambda t: u


@dataclass(frozen=True)
class One(ForwardingPolicy):
    """Forward at every opportunity"""

    def timed_control(self, params: ModelParams) -> TimedControl:
        u = np.ones(params.n_controls)
        return lambda t: u


@dataclass(frozen=True)
class Zero(ForwardingPolicy):
    """Never forward to other nodes, only to the destination"""

    def timed_control(self, params: ModelParams) -> TimedControl:
        u = np.zeros(params.n_controls)
        return lambda t: u


@dataclass(frozen=True)
class PiecewiseConstant(ForwardingPolicy):
    """General right-continuous piecewise-constant control

    Attributes:
        breaks: Per level s..B, increasing times at which the value changes
        values: Per level, one more value than breaks
    """

    breaks: Tuple[Tuple[float, ...], ...]
    values: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        breaks = tuple(tuple(float(t) for t in b) for b in self.breaks)
        values = tuple(tuple(float(v) for v in vs) for vs in self.values)
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)
        if len(breaks) != len(values):
            raise ParameterError("PiecewiseConstant needs breaks and values per level")
        for b, vs in zip(breaks, values):
            if len(vs) != len(b) + 1:
                raise ParameterError(
                    f"Level with {len(b)} breaks needs {len(b) + 1} values, got {vs}"
                )
            if list(b) != sorted(b):
                raise ParameterError(f"Breaks must be increasing, got {b}")
            for v in vs:
                _check_fraction("PiecewiseConstant value", v)

    def timed_control(self, params: ModelParams) -> TimedControl:
        _check_length("PiecewiseConstant", self.breaks, params)

        def control(t: float) -> FloatArray:
            return np.array(
                [vs[bisect_right(b, t)] for b, vs in zip(self.breaks, self.values)]
            )

        return control

    def breakpoints(self, params, init=None, steps=DEFAULT_STEPS) -> List[float]:
        return sorted({t for b in self.breaks for t in b if 0 < t < params.horizon})


@dataclass(frozen=True)
class _Feedback(ForwardingPolicy):
    # Drops every control from 1 to 0 the first time metric(state) >= level

    def _level(self) -> float:
        raise NotImplementedError(self)

    def _metric(self, state: StateVector, params: ModelParams) -> float:
        raise NotImplementedError(self)

    def _crossing_index(self, metric: FloatArray) -> Optional[int]:
        hits = metric >= self._level()
        return int(np.argmax(hits)) if hits.any() else None

    def compile(self, params, init, steps=DEFAULT_STEPS) -> ForwardingPolicy:
        # The mean-field system is deterministic, so the drop happens at a fixed
        # time that can be read off the all-ones trajectory
        traj = integrate(One(), params, init, steps=steps)
        metric = np.array([self._metric(x, params) for x in traj.states])
        k = self._crossing_index(metric)
        if k is None:
            return One()
        return StaticEnergy(jump=float(traj.times[k]), value=1.0)

    def breakpoints(self, params, init=None, steps=DEFAULT_STEPS) -> List[float]:
        assert init is not None, "Feedback policies need an initial state"
        return self.compile(params, init, steps).breakpoints(params, init, steps)


@dataclass(frozen=True)
class ProbabilityThreshold(_Feedback):
    """Forward at every opportunity until the delivery probability reaches q

    Attributes:
        q: Delivery probability at which forwarding stops
    """

    q: float

    def __post_init__(self):
        _check_fraction("ProbabilityThreshold q", self.q)

    def _level(self) -> float:
        return self.q

    def _metric(self, state: StateVector, params: ModelParams) -> float:
        return delivery_from_exposure(state.E, params)

    def _crossing_index(self, metric: FloatArray) -> Optional[int]:
        # Delivery probability is nondecreasing, so bisect for the first hit
        k = int(np.searchsorted(metric, self.q, side="left"))
        return k if k < len(metric) else None


@dataclass(frozen=True)
class InfectionThreshold(_Feedback):
    """Forward at every opportunity until sum_{i>=s} I_i reaches c

    Attributes:
        c: Fraction of capable infectives at which forwarding stops
    """

    c: float

    def __post_init__(self):
        _check_fraction("InfectionThreshold c", self.c)

    def _level(self) -> float:
        return self.c

    def _metric(self, state: StateVector, params: ModelParams) -> float:
        return float(state.I[params.s :].sum())


def control_at(
    policy: ForwardingPolicy,
    t: float,
    state: StateVector,
    params: ModelParams,
    latch: Optional[FeedbackLatch] = None,
) -> FloatArray:
    """Control vector u_s..u_B that a policy applies at time t in a given state

    Args:
        policy: Any `ForwardingPolicy`
        t: Current time
        state: Current state, only consulted by feedback policies
        params: Model constants
        latch: Remembers a feedback drop across calls, fresh if not given
    """
    if isinstance(policy, _Feedback):
        if latch is None:
            latch = FeedbackLatch()
        if not latch.dropped and policy._metric(state, params) >= policy._level():
            latch.dropped = True
        if latch.dropped:
            return np.zeros(params.n_controls)
        return np.ones(params.n_controls)
    return policy.timed_control(params)(t)


def breakpoints(
    policy: ForwardingPolicy,
    params: ModelParams,
    init: StateVector,
    steps: int = DEFAULT_STEPS,
) -> List[float]:
    """Every time in (0, horizon) at which the policy's control changes"""
    return policy.breakpoints(params, init, steps)


_KINDS: Dict[str, Type[ForwardingPolicy]] = {
    "threshold": Threshold,
    "static-energy": StaticEnergy,
    "static-time": StaticTime,
    "probability-threshold": ProbabilityThreshold,
    "infection-threshold": InfectionThreshold,
    "one": One,
    "zero": Zero,
    "piecewise-constant": PiecewiseConstant,
}


def policy_to_dict(policy: ForwardingPolicy) -> Dict[str, Any]:
    """Serialize a policy as its variant tag plus numeric payload

    For example::

        policy_to_dict(Threshold((2, 4))) -> {"kind": "threshold", "times": [2.0, 4.0]}
    """
    kind = next(k for k, cls in _KINDS.items() if type(policy) is cls)
    payload: Dict[str, Any] = {"kind": kind}
    for name, value in vars(policy).items():
        if isinstance(value, tuple):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        payload[name] = value
    return payload


def policy_from_dict(payload: Dict[str, Any]) -> ForwardingPolicy:
    """Inverse of `policy_to_dict`

    Raises:
        ParameterError: On an unknown kind or unexpected payload fields
    """
    payload = dict(payload)
    kind = payload.pop("kind", None)
    if kind not in _KINDS:
        raise ParameterError(
            f"Unknown policy kind {kind!r}, expected one of {list(_KINDS)}"
        )
    try:
        return _KINDS[kind](**payload)
    except TypeError as e:
        raise ParameterError(f"Bad payload for {kind} policy: {e}") from e
