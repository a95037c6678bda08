import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

if TYPE_CHECKING:
    from .policy import ForwardingPolicy

# Define the public API of this module
__all__ = [
    "ParameterError",
    "AdmissibilityError",
    "ModelParams",
    "StateVector",
    "Trajectory",
    "power_penalties",
    "linear_penalties",
    "exponential_penalties",
    "ode_rhs",
    "integrate",
    "integrate_batch",
    "integrate_feedback",
    "DEFAULT_STEPS",
]

#: Integration steps across the whole horizon
DEFAULT_STEPS = 2000
#: Allowed drift of the total population mass away from 1
NORM_TOL = 1e-9
#: Allowed negative excursion of any fraction
NEG_TOL = 1e-12
#: How many times integrate() will halve its step before giving up
MAX_HALVINGS = 4

FloatArray = npt.NDArray[np.float64]


class ParameterError(ValueError):
    """Raised if model parameters, states or controls break their invariants"""


class AdmissibilityError(Exception):
    """Raised if an integrated trajectory leaves the admissible simplex"""


def power_penalties(B: int, alpha: float) -> Tuple[float, ...]:
    """Terminal penalties ``a_i = (B - i) ** alpha`` for levels 0..B"""
    return tuple(float(B - i) ** alpha for i in range(B + 1))


def linear_penalties(B: int) -> Tuple[float, ...]:
    """Terminal penalties ``a_i = B - i``"""
    return power_penalties(B, 1.0)


def exponential_penalties(B: int) -> Tuple[float, ...]:
    """Terminal penalties ``a_i = exp(B - i)``"""
    return tuple(math.exp(B - i) for i in range(B + 1))


@dataclass(frozen=True)
class ModelParams:
    """Network and energy constants of the mean-field model

    Attributes:
        B: Maximum energy level of a node
        s: Energy units spent to transmit the message
        r: Energy units spent to receive the message
        beta: Aggregate pairwise contact rate
        beta0: Aggregate node-destination contact rate
        horizon: Terminal time (TTL) of the message
        penalties: Terminal penalty a_i for each level 0..B, strictly decreasing
        p: Mandated probability of delivery
    """

    B: int
    s: int
    r: int
    beta: float
    beta0: float
    horizon: float
    penalties: Tuple[float, ...]
    p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "penalties", tuple(float(a) for a in self.penalties))
        if not 1 <= self.r <= self.s <= self.B:
            raise ParameterError(
                f"Need 1 <= r <= s <= B, got r={self.r}, s={self.s}, B={self.B}"
            )
        for name in ("beta", "beta0", "horizon"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive, got {value}")
        if len(self.penalties) != self.B + 1:
            raise ParameterError(
                f"Expected {self.B + 1} penalties, got {len(self.penalties)}"
            )
        if any(a <= b for a, b in zip(self.penalties, self.penalties[1:])):
            raise ParameterError(
                f"Penalties must be strictly decreasing, got {self.penalties}"
            )
        if not 0 <= self.p < 1:
            raise ParameterError(f"p must be in [0, 1), got {self.p}")

    @property
    def levels(self) -> range:
        """The energy levels s..B that carry a forwarding control"""
        return range(self.s, self.B + 1)

    @property
    def n_controls(self) -> int:
        return self.B - self.s + 1

    @property
    def dim(self) -> int:
        """Length of the flattened (S, I, E) state"""
        return 2 * (self.B + 1) + 1

    @property
    def a(self) -> FloatArray:
        return np.array(self.penalties)

    @property
    def required_exposure(self) -> float:
        """Exposure E(T) needed to meet the mandated delivery probability"""
        return -math.log1p(-self.p) / self.beta0

    def penalties_strictly_convex(self) -> bool:
        """True if a_{i-1} - a_i < a_{i-2} - a_{i-1} for every i"""
        diffs = -np.diff(self.a)
        return bool(np.all(diffs[1:] < diffs[:-1]))


@dataclass
class StateVector:
    """Susceptible and infective fractions per energy level plus exposure

    Attributes:
        S: Susceptible fractions S_0..S_B
        I: Infective fractions I_0..I_B
        E: Accumulated exposure, the integral of sum_{i>=s} I_i
    """

    S: FloatArray
    I: FloatArray  # noqa: E741
    E: float = 0.0

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        self.I = np.asarray(self.I, dtype=np.float64)
        self.E = float(self.E)
        if self.S.shape != self.I.shape or self.S.ndim != 1:
            raise ParameterError(
                f"S and I must be 1D and equally long, got {self.S.shape} and "
                f"{self.I.shape}"
            )

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "StateVector":
        """Unflatten an (S, I, E) array as produced by `as_array`"""
        x = np.asarray(x, dtype=np.float64)
        n = (len(x) - 1) // 2
        return cls(S=x[:n].copy(), I=x[n : 2 * n].copy(), E=float(x[-1]))

    def as_array(self) -> FloatArray:
        return np.concatenate([self.S, self.I, [self.E]])

    def mass(self) -> FloatArray:
        """Total fraction S_i + I_i at each level"""
        return self.S + self.I

    def check(self, params: Optional[ModelParams] = None):
        """Raise `ParameterError` unless this is an admissible state"""
        if params is not None and len(self.S) != params.B + 1:
            raise ParameterError(
                f"State has {len(self.S)} levels, model expects {params.B + 1}"
            )
        x = self.as_array()
        if not np.all(np.isfinite(x)):
            raise ParameterError("State contains non-finite values")
        if x[:-1].min() < -NEG_TOL:
            raise ParameterError(f"Negative fraction {x[:-1].min()} in state")
        total = self.S.sum() + self.I.sum()
        if abs(total - 1) > NORM_TOL:
            raise ParameterError(f"Fractions sum to {total}, not 1")
        if self.E < 0:
            raise ParameterError(f"Exposure must be non-negative, got {self.E}")

    def clamped(self) -> "StateVector":
        """Copy with tiny negative fractions set to zero, for reporting only"""
        return StateVector(
            S=np.maximum(self.S, 0.0), I=np.maximum(self.I, 0.0), E=self.E
        )


@dataclass
class Trajectory:
    """States and controls of one integration on its segmented grid

    Attributes:
        times: Strictly increasing grid from 0 to the terminal time
        values: Flattened (S, I, E) state at each grid point, shape (n, dim)
        controls: Control u_s..u_B held over each grid step, shape (n - 1, L)
        B: Maximum energy level, to split the flattened state
    """

    times: FloatArray
    values: FloatArray
    controls: FloatArray
    B: int

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def S(self) -> FloatArray:
        return self.values[:, : self.B + 1]

    @property
    def I(self) -> FloatArray:  # noqa: E741,E743
        return self.values[:, self.B + 1 : 2 * self.B + 2]

    @property
    def E(self) -> FloatArray:
        return self.values[:, -1]

    @property
    def states(self) -> List[StateVector]:
        return [StateVector.from_array(x) for x in self.values]

    @property
    def initial(self) -> StateVector:
        return StateVector.from_array(self.values[0])

    @property
    def final(self) -> StateVector:
        return StateVector.from_array(self.values[-1])

    def control_at_index(self, k: int) -> FloatArray:
        """Right-continuous control at grid point k (last step's at the end)"""
        return self.controls[min(k, len(self.controls) - 1)]

    def s_monotone(self, tol: float = NEG_TOL) -> bool:
        """True if every S_i is nonincreasing along the grid"""
        return bool(np.all(np.diff(self.S, axis=0) <= tol))

    def spreaders_monotone(self, s: int, r: int, tol: float = NEG_TOL) -> bool:
        """True if sum_{j>=s} I_j + sum_{j>=r} S_j is nonincreasing"""
        total = self.I[:, s:].sum(axis=1) + self.S[:, r:].sum(axis=1)
        return bool(np.all(np.diff(total) <= tol))

    def exposure_monotone(self) -> bool:
        return bool(np.all(np.diff(self.E) >= 0))


def _rhs(X: FloatArray, U: FloatArray, params: ModelParams) -> FloatArray:
    # X is (n, dim), U is (n, L), returns (n, dim)
    B, s, r, beta = params.B, params.s, params.r, params.beta
    S = X[:, : B + 1]
    I = X[:, B + 1 : 2 * B + 2]  # noqa: E741
    uI = U * I[:, s:]
    # Mass of infectives that are forwarding, and of susceptibles able to receive
    A = uI.sum(axis=1)[:, None]
    Sr = S[:, r:].sum(axis=1)[:, None]
    dX = np.zeros_like(X)
    dS = dX[:, : B + 1]
    dI = dX[:, B + 1 : 2 * B + 2]
    received = beta * S[:, r:] * A
    sent = beta * uI * Sr
    dS[:, r:] -= received
    # A receiver at level j becomes an infective at j - r, a sender drops by s
    dI[:, : B + 1 - r] += received
    dI[:, s:] -= sent
    dI[:, : B + 1 - s] += sent
    dX[:, -1] = I[:, s:].sum(axis=1)
    return dX


def _check_control(u: FloatArray, params: ModelParams):
    if u.shape[-1] != params.n_controls:
        raise ParameterError(
            f"Control has {u.shape[-1]} entries, expected {params.n_controls} "
            f"for levels {params.s}..{params.B}"
        )
    if np.any(u < 0) or np.any(u > 1):
        raise ParameterError(f"Controls must lie in [0, 1], got {u}")


def ode_rhs(state: StateVector, u: Sequence[float], params: ModelParams) -> StateVector:
    """Time derivative of the mean-field state under a control vector

    Args:
        state: Current (S, I, E)
        u: Forwarding controls for levels s..B
        params: Model constants

    Returns:
        The derivative packed as a `StateVector` (dS, dI, dE)
    """
    u = np.asarray(u, dtype=np.float64)
    _check_control(u, params)
    state.check(params)
    d = _rhs(state.as_array()[None, :], u[None, :], params)[0]
    return StateVector.from_array(d)


def _rk4_step(
    X: FloatArray, U: FloatArray, h: float, params: ModelParams
) -> FloatArray:
    k1 = _rhs(X, U, params)
    k2 = _rhs(X + 0.5 * h * k1, U, params)
    k3 = _rhs(X + 0.5 * h * k2, U, params)
    k4 = _rhs(X + h * k3, U, params)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _segment_grid(
    end_time: float, breaks: Sequence[float], h: float
) -> Tuple[FloatArray, List[int]]:
    # Grid that contains every breakpoint, and the index where each segment starts
    edges = [0.0] + [b for b in breaks if 0.0 < b < end_time] + [end_time]
    times: List[float] = [0.0]
    starts: List[int] = []
    for t0, t1 in zip(edges, edges[1:]):
        starts.append(len(times) - 1)
        n = max(1, int(math.ceil((t1 - t0) / h - 1e-9)))
        step = (t1 - t0) / n
        times += [t0 + step * k for k in range(1, n)] + [t1]
    return np.array(times), starts


def _admissible(values: FloatArray) -> bool:
    fractions = values[:, :-1]
    return bool(
        np.all(np.isfinite(values))
        and fractions.min() >= -NEG_TOL
        and np.all(np.abs(fractions.sum(axis=1) - 1) <= NORM_TOL)
        and np.all(np.diff(values[:, -1]) >= 0)
    )


def _run_segments(
    control: Callable[[float], FloatArray],
    times: FloatArray,
    starts: List[int],
    x0: FloatArray,
    params: ModelParams,
) -> Tuple[FloatArray, FloatArray]:
    values = np.empty((len(times), len(x0)))
    controls = np.empty((len(times) - 1, params.n_controls))
    values[0] = x0
    bounds = starts + [len(times) - 1]
    X = x0[None, :]
    for k0, k1 in zip(bounds, bounds[1:]):
        # Piecewise-constant control, so sample once per segment
        U = np.asarray(control(float(times[k0])), dtype=np.float64)[None, :]
        for k in range(k0, k1):
            X = _rk4_step(X, U, float(times[k + 1] - times[k]), params)
            values[k + 1] = X[0]
            controls[k] = U[0]
    return values, controls


def integrate(
    policy: "ForwardingPolicy",
    params: ModelParams,
    init: StateVector,
    end_time: Optional[float] = None,
    steps: int = DEFAULT_STEPS,
) -> Trajectory:
    """Integrate the mean-field dynamics under a forwarding policy

    Classical 4th order Runge-Kutta with a nominal step of
    ``params.horizon / steps``, restarted at every breakpoint of the
    policy so the control is constant within each step.

    Args:
        policy: Any `ForwardingPolicy`, feedback variants are compiled first
        params: Model constants
        init: Initial state, must have E = 0
        end_time: Terminal time, defaults to ``params.horizon``
        steps: Nominal number of steps across the horizon

    Raises:
        AdmissibilityError: If the result still leaves the simplex after
            halving the step `MAX_HALVINGS` times
    """
    init.check(params)
    if init.E != 0:
        raise ParameterError(f"Initial exposure must be 0, got {init.E}")
    if end_time is None:
        end_time = params.horizon
    if not end_time > 0:
        raise ParameterError(f"end_time must be positive, got {end_time}")
    timed = policy.compile(params, init, steps)
    control = timed.timed_control(params)
    breaks = timed.breakpoints(params, init, steps)
    x0 = init.as_array()
    for halving in range(MAX_HALVINGS + 1):
        h = params.horizon / (steps * 2**halving)
        times, starts = _segment_grid(end_time, breaks, h)
        values, controls = _run_segments(control, times, starts, x0, params)
        if _admissible(values):
            return Trajectory(times, values, controls, B=params.B)
        if not np.all(np.isfinite(values)):
            raise AdmissibilityError(f"Non-finite state while integrating {policy}")
        logging.debug(f"Trajectory left the simplex with h={h}, halving the step")
    raise AdmissibilityError(
        f"Trajectory for {policy} not admissible after {MAX_HALVINGS} step halvings"
    )


def integrate_feedback(
    policy: "ForwardingPolicy",
    params: ModelParams,
    init: StateVector,
    end_time: Optional[float] = None,
    steps: int = DEFAULT_STEPS,
) -> Trajectory:
    """Integrate on a uniform grid, re-evaluating the control from the state
    at the start of every step. This is the reference for feedback policies;
    `integrate` compiles them to a time schedule instead.
    """
    from .policy import FeedbackLatch, control_at

    init.check(params)
    if end_time is None:
        end_time = params.horizon
    h = params.horizon / steps
    times, starts = _segment_grid(end_time, [], h)
    latch = FeedbackLatch()
    values = np.empty((len(times), params.dim))
    controls = np.empty((len(times) - 1, params.n_controls))
    X = init.as_array()[None, :]
    values[0] = X[0]
    for k in range(len(times) - 1):
        state = StateVector.from_array(X[0])
        U = control_at(policy, float(times[k]), state, params, latch)[None, :]
        X = _rk4_step(X, U, float(times[k + 1] - times[k]), params)
        values[k + 1] = X[0]
        controls[k] = U[0]
    return Trajectory(times, values, controls, B=params.B)


def integrate_batch(
    values: FloatArray,
    cutoffs: npt.NDArray[np.int_],
    params: ModelParams,
    init: StateVector,
    steps: int,
    chunk: int = 4096,
) -> FloatArray:
    """Integrate many gated-constant policies at once on a uniform grid

    Candidate n forwards at level s+j with probability ``values[n, j]`` for
    grid steps k < ``cutoffs[n, j]`` and not at all afterwards. Every
    heuristic family and every threshold vector whose times lie on the grid
    ``k * horizon / steps`` is of this form.

    Args:
        values: Control value per candidate and level, shape (n, L)
        cutoffs: Step index at which each control drops to 0, shape (n, L)
        params: Model constants
        init: Shared initial state
        steps: Number of uniform steps across the horizon
        chunk: Candidates integrated together

    Returns:
        Terminal (S, I, E) of each candidate, shape (n, dim)
    """
    values = np.asarray(values, dtype=np.float64)
    cutoffs = np.asarray(cutoffs)
    _check_control(values, params)
    h = params.horizon / steps
    out = np.empty((len(values), params.dim))
    x0 = init.as_array()
    for lo in range(0, len(values), chunk):
        V = values[lo : lo + chunk]
        C = cutoffs[lo : lo + chunk]
        X = np.repeat(x0[None, :], len(V), axis=0)
        for k in range(steps):
            X = _rk4_step(X, V * (k < C), h, params)
        out[lo : lo + chunk] = X
    return out
