import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .metrics import ACTIVE_TOL, StoppingPenalty
from .model import (
    DEFAULT_STEPS,
    AdmissibilityError,
    FloatArray,
    ModelParams,
    ParameterError,
    StateVector,
    Trajectory,
    _rhs,
    integrate,
)
from .policy import ForwardingPolicy, Threshold

# Define the public API of this module
__all__ = [
    "VerificationError",
    "HamiltonianMismatch",
    "CoState",
    "CoStateTrajectory",
    "VerificationReport",
    "costate_rhs",
    "integrate_costates",
    "switching_function",
    "hamiltonian",
    "verify_pmp",
]

#: Allowed disagreement between the two forms of the Hamiltonian
HAMILTONIAN_TOL = 1e-10
#: Switching values below this fraction of their level's maximum have no sign
SIGN_FLOOR = 1e-6
#: Pointwise slack for forwarding while the switching function is negative
POINTWISE_TOL = 1e-9
#: Candidate co-states lambda_E scanned before the bounded refinement
LAMBDA_E_SCAN = (0.0,) + tuple(10.0**k for k in range(-3, 5))


class VerificationError(Exception):
    """Raised if the verifier is given a policy that is not a threshold policy"""


class HamiltonianMismatch(Exception):
    """Raised if the expanded and switching-function forms of H disagree"""


@dataclass
class CoState:
    """Adjoint variables at one instant

    Attributes:
        lam: Adjoints lambda_0..lambda_B of the susceptible fractions
        rho: Adjoints rho_0..rho_B of the infective fractions
        lambdaE: Adjoint of the exposure, constant in time
    """

    lam: FloatArray
    rho: FloatArray
    lambdaE: float = 0.0

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.lambdaE = float(self.lambdaE)
        if self.lam.shape != self.rho.shape or self.lam.ndim != 1:
            raise ParameterError(
                f"lam and rho must be 1D and equally long, got {self.lam.shape} "
                f"and {self.rho.shape}"
            )

    def as_array(self) -> FloatArray:
        return np.concatenate([self.lam, self.rho])


@dataclass
class CoStateTrajectory:
    """Co-states along the grid of a `Trajectory`

    Attributes:
        times: The trajectory's grid
        lam: lambda_0..lambda_B at each grid point, shape (n, B + 1)
        rho: rho_0..rho_B at each grid point, shape (n, B + 1)
        lambdaE: Constant adjoint of the exposure
        lambda0bar: Multiplier of the cost, 1 in the normal case
    """

    times: FloatArray
    lam: FloatArray
    rho: FloatArray
    lambdaE: float
    lambda0bar: int

    @property
    def values(self) -> FloatArray:
        return np.concatenate([self.lam, self.rho], axis=1)

    def at(self, k: int) -> CoState:
        return CoState(self.lam[k], self.rho[k], self.lambdaE)


def _check_dims(state: StateVector, costate: CoState, params: ModelParams):
    n = params.B + 1
    if len(state.S) != n or len(costate.lam) != n:
        raise ParameterError(
            f"Expected {n} levels, got state {len(state.S)} and co-state "
            f"{len(costate.lam)}"
        )


def _control(u: Sequence[float], params: ModelParams) -> FloatArray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (params.n_controls,):
        raise ParameterError(
            f"Control has shape {u.shape}, expected ({params.n_controls},)"
        )
    return u


def _pieces(X: FloatArray, P: FloatArray, params: ModelParams):
    # Terms shared by the co-state equations and the switching functions
    B, s, r = params.B, params.s, params.r
    S = X[:, : B + 1]
    I = X[:, B + 1 : 2 * B + 2]  # noqa: E741
    lam = P[:, : B + 1]
    rho = P[:, B + 1 :]
    # gain[j] for j >= r: value of turning a susceptible at j into an infective
    gain = -lam[:, r:] + rho[:, : B + 1 - r]
    # drop[i] for i >= s: value of a sender at i falling to i - s
    drop = rho[:, : B + 1 - s] - rho[:, s:]
    Sr = S[:, r:].sum(axis=1)[:, None]
    gainS = (gain * S[:, r:]).sum(axis=1)[:, None]
    return S, I, gain, drop, Sr, gainS


def _costate_rhs(
    P: FloatArray,
    X: FloatArray,
    U: FloatArray,
    lambdaE: FloatArray,
    params: ModelParams,
) -> FloatArray:
    # P is (n, 2B + 2), X is (n, dim), U is (n, L), lambdaE is (n,)
    B, s, r, beta = params.B, params.s, params.r, params.beta
    S, I, gain, drop, Sr, gainS = _pieces(X, P, params)
    uI = U * I[:, s:]
    A = uI.sum(axis=1)[:, None]
    dP = np.zeros_like(P)
    dP[:, r : B + 1] = -beta * (A * gain + (uI * drop).sum(axis=1)[:, None])
    dP[:, B + 1 + s :] = -lambdaE[:, None] - beta * U * (gainS + Sr * drop)
    return dP


def _switching(X: FloatArray, P: FloatArray, params: ModelParams) -> FloatArray:
    S, I, gain, drop, Sr, gainS = _pieces(X, P, params)
    return params.beta * I[:, params.s :] * (gainS + Sr * drop)


def costate_rhs(
    costate: CoState, state: StateVector, u: Sequence[float], params: ModelParams
) -> CoState:
    """Time derivative of the co-states, minus the gradient of H in (S, I)

    Args:
        costate: Current (lambda, rho, lambda_E)
        state: Current (S, I, E)
        u: Forwarding controls for levels s..B
        params: Model constants

    Returns:
        The derivative as a `CoState`, whose lambdaE is always 0
    """
    _check_dims(state, costate, params)
    u = _control(u, params)
    dP = _costate_rhs(
        costate.as_array()[None, :],
        state.as_array()[None, :],
        u[None, :],
        np.array([costate.lambdaE]),
        params,
    )[0]
    n = params.B + 1
    return CoState(dP[:n], dP[n:], 0.0)


def switching_function(
    level: int, state: StateVector, costate: CoState, params: ModelParams
) -> float:
    """Switching function phi_i, the derivative of H with respect to u_i

    Raises:
        ParameterError: If level is outside s..B
    """
    if level not in params.levels:
        raise ParameterError(
            f"Level {level} has no control, expected {params.s}..{params.B}"
        )
    _check_dims(state, costate, params)
    phi = _switching(state.as_array()[None, :], costate.as_array()[None, :], params)
    return float(phi[0, level - params.s])


def _hamiltonians(
    X: FloatArray, P: FloatArray, U: FloatArray, lambdaE: float, params: ModelParams
) -> FloatArray:
    # Both forms of H at each row, raising if they disagree
    dX = _rhs(X, U, params)
    n = 2 * (params.B + 1)
    expanded = (P * dX[:, :n]).sum(axis=1) + lambdaE * dX[:, -1]
    spreaders = X[:, params.B + 1 + params.s : n].sum(axis=1)
    switched = lambdaE * spreaders + (_switching(X, P, params) * U).sum(axis=1)
    gap = np.abs(expanded - switched)
    worst = int(np.argmax(gap / (1 + np.abs(expanded))))
    if gap[worst] > HAMILTONIAN_TOL * (1 + abs(expanded[worst])):
        raise HamiltonianMismatch(
            f"Hamiltonian forms differ by {gap[worst]}: {expanded[worst]} vs "
            f"{switched[worst]}"
        )
    return switched


def hamiltonian(
    state: StateVector, costate: CoState, u: Sequence[float], params: ModelParams
) -> float:
    """Hamiltonian of the energy cost problem at one instant

    Computes the costate-weighted dynamics and the switching-function form
    ``lambda_E * sum_{i>=s} I_i + sum_i phi_i u_i`` and returns the latter.

    Raises:
        HamiltonianMismatch: If the two forms differ by more than
            `HAMILTONIAN_TOL`
    """
    _check_dims(state, costate, params)
    u = _control(u, params)
    H = _hamiltonians(
        state.as_array()[None, :],
        costate.as_array()[None, :],
        u[None, :],
        costate.lambdaE,
        params,
    )
    return float(H[0])


def _backward(
    traj: Trajectory, terminal: FloatArray, lambdaE: FloatArray, params: ModelParams
) -> FloatArray:
    # RK4 from T back to 0 for every row of terminal at once, shape (m, n, 2B + 2)
    n = len(traj.times)
    m = len(terminal)
    out = np.empty((m, n, terminal.shape[1]))
    out[:, -1] = terminal
    P = terminal.copy()
    for k in range(n - 2, -1, -1):
        h = float(traj.times[k + 1] - traj.times[k])
        U = np.repeat(traj.controls[k][None, :], m, axis=0)
        x0, x1 = traj.values[k][None, :], traj.values[k + 1][None, :]
        f0 = _rhs(x0, traj.controls[k][None, :], params)
        f1 = _rhs(x1, traj.controls[k][None, :], params)
        # Cubic Hermite midpoint, as accurate as the forward RK4 step
        xm = 0.5 * (x0 + x1) + h / 8 * (f0 - f1)
        X0, Xm, X1 = (np.repeat(x, m, axis=0) for x in (x0, xm, x1))
        k1 = _costate_rhs(P, X1, U, lambdaE, params)
        k2 = _costate_rhs(P - 0.5 * h * k1, Xm, U, lambdaE, params)
        k3 = _costate_rhs(P - 0.5 * h * k2, Xm, U, lambdaE, params)
        k4 = _costate_rhs(P - h * k3, X0, U, lambdaE, params)
        P = P - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, k] = P
    if not np.all(np.isfinite(out)):
        raise AdmissibilityError("Non-finite co-states in backward integration")
    return out


def _check_consistent(traj: Trajectory, policy: ForwardingPolicy, params):
    try:
        control = policy.timed_control(params)
    except NotImplementedError:
        # Feedback policies are only known through the recorded controls
        return
    for k, t in enumerate(traj.times[:-1]):
        if not np.array_equal(control(float(t)), traj.controls[k]):
            raise ParameterError(
                f"Trajectory control at t={t} does not match {policy}"
            )


def integrate_costates(
    traj: Trajectory,
    policy: ForwardingPolicy,
    lambdaE_T: float,
    lambda0bar: int,
    params: ModelParams,
) -> CoStateTrajectory:
    """Integrate the co-states backward along a forward trajectory

    Uses the trajectory's own segmented grid and recorded controls, with
    states at step midpoints from cubic Hermite interpolation.

    Args:
        traj: Forward trajectory produced by `integrate`
        policy: The policy that produced it
        lambdaE_T: Exposure adjoint, must be >= 0
        lambda0bar: Cost multiplier, 0 or 1
        params: Model constants

    Raises:
        ParameterError: On a negative lambdaE_T, a bad lambda0bar or a policy
            that does not match the trajectory
        AdmissibilityError: If the co-states become non-finite
    """
    if lambdaE_T < 0:
        raise ParameterError(f"lambda_E must be >= 0, got {lambdaE_T}")
    if lambda0bar not in (0, 1):
        raise ParameterError(f"lambda0bar must be 0 or 1, got {lambda0bar}")
    _check_consistent(traj, policy, params)
    terminal = -lambda0bar * np.concatenate([params.a, params.a])
    P = _backward(traj, terminal[None, :], np.array([float(lambdaE_T)]), params)[0]
    n = params.B + 1
    return CoStateTrajectory(
        times=traj.times,
        lam=P[:, :n],
        rho=P[:, n:],
        lambdaE=float(lambdaE_T),
        lambda0bar=lambda0bar,
    )


@dataclass
class VerificationReport:
    """Outcome of checking a threshold policy against the maximum principle

    Attributes:
        status: "pass", "fail" or "constraint-inactive"
        lambdaE: Fitted (or, if the constraint is slack, zero) exposure adjoint
        violation: Integrated mismatch V between the controls and the signs of
            the switching functions
        tol_violation: Bound on V for the violation check
        band: Half-width around breakpoints skipped by the pointwise sign check
        sign_changes: Sign changes of each populated phi_i, by level
        crossings: Time of the + to - zero crossing of each phi_i, by level
        hamiltonian_T: H at the terminal time
        hamiltonian_deviation: max_t |H(t) - H(T)|
        terminal_switching: phi_j(T) by level
        spreader_bound: Max over interior grid points of
            ``H - lambda_E * (sum_{j>=s} I_j + sum_{j>=r} S_j)``
        psi: Terminal (i, k, psi_{i,k}) for strictly convex penalties
        checks: Outcome of each individual check by name
        abnormal_candidate: All thresholds equal the horizon
    """

    status: str
    lambdaE: float
    violation: float
    tol_violation: float
    band: float
    sign_changes: Dict[int, int]
    crossings: Dict[int, Optional[float]]
    hamiltonian_T: float
    hamiltonian_deviation: float
    terminal_switching: Dict[int, float]
    spreader_bound: float
    psi: List[Tuple[int, int, float]] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    abnormal_candidate: bool = False

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _violation(
    phi: FloatArray, controls: FloatArray, times: FloatArray
) -> float:
    # Trapezoid of sum_i [phi_i^+ (1 - u_i) + phi_i^- u_i] with the step's control
    def integrand(p: FloatArray) -> FloatArray:
        wrong = np.maximum(p, 0) * (1 - controls) + np.maximum(-p, 0) * controls
        return wrong.sum(axis=1)

    h = np.diff(times)
    return float(np.sum(0.5 * h * (integrand(phi[:-1]) + integrand(phi[1:]))))


def _fit_lambda_e(
    phi_cost: FloatArray, phi_exposure: FloatArray, traj: Trajectory
) -> Tuple[float, float]:
    # V is convex in lambda_E, so bracket its minimum on a log scan then refine
    def V(x: float) -> float:
        return _violation(phi_cost + x * phi_exposure, traj.controls, traj.times)

    scan = [V(x) for x in LAMBDA_E_SCAN]
    i = int(np.argmin(scan))
    lo = LAMBDA_E_SCAN[i - 1] if i > 0 else 0.0
    hi = LAMBDA_E_SCAN[i + 1] if i + 1 < len(LAMBDA_E_SCAN) else 10 * LAMBDA_E_SCAN[i]
    logging.debug(f"lambda_E bracket [{lo}, {hi}] around scan value {scan[i]:.6g}")
    best_x, best_v = LAMBDA_E_SCAN[i], scan[i]
    if hi > lo:
        found = minimize_scalar(
            V, bounds=(lo, hi), method="bounded", options=dict(xatol=1e-12 * hi)
        )
        if found.fun < best_v:
            best_x, best_v = float(found.x), float(found.fun)
    return best_x, best_v


def _sign_profile(phi: FloatArray) -> Tuple[int, bool, Optional[int]]:
    # Sign changes of one switching function, ignoring values near zero
    floor = SIGN_FLOOR * np.abs(phi).max()
    signed = np.flatnonzero(np.abs(phi) > floor)
    signs = np.sign(phi[signed])
    changes = np.flatnonzero(signs[1:] != signs[:-1])
    plus_to_minus = all(signs[c] > 0 for c in changes)
    first = int(signed[changes[0]]) if len(changes) else None
    return len(changes), plus_to_minus, first


def _crossing_time(phi: FloatArray, times: FloatArray, k: Optional[int]):
    if k is None:
        return None
    # Linear interpolation between the last positive and next negative sample
    j = k + 1 + int(np.argmax(phi[k + 1 :] < 0))
    p0, p1 = phi[j - 1], phi[j]
    t0, t1 = times[j - 1], times[j]
    return float(t0 + (t1 - t0) * p0 / (p0 - p1)) if p0 != p1 else float(t0)


def _near(times: FloatArray, breaks: Sequence[float], band: float) -> np.ndarray:
    near = np.zeros(len(times), dtype=bool)
    for b in breaks:
        near |= np.abs(times - b) <= band
    return near


def verify_pmp(
    policy: ForwardingPolicy,
    params: ModelParams,
    init: StateVector,
    steps: int = DEFAULT_STEPS,
    end_time: Optional[float] = None,
    fpen: Optional[StoppingPenalty] = None,
    tol_violation: Optional[float] = None,
    tol_hamiltonian: float = 1e-3,
    band: Optional[float] = None,
) -> VerificationReport:
    """Check a threshold policy against the necessary optimality conditions

    Integrates the co-states for the normal case (lambda0bar = 1), fits the
    exposure adjoint lambda_E >= 0 by minimising the violation measure V
    and then checks:

    - ``violation``: V <= tol_violation
    - ``single_switch``: every populated phi_i changes sign at most once,
      from + to -
    - ``sign_consistent``: phi_i * u_i >= 0 away from breakpoints
    - ``hamiltonian_constant``: max_t |H(t) - H(T)| <= tol * (1 + |H(T)|)
    - ``terminal_switching``: phi_j(T) < 0 wherever I_j(T) > 0
    - ``spreader_bound``: H - lambda_E * (sum_{j>=s} I_j + sum_{j>=r} S_j) < 0
    - ``penalty_ordering``: for strictly convex penalties, psi_{i,k}(T) < 0
      and thresholds of populated levels nondecreasing in the level
    - ``transversality``: with a stopping penalty,
      f'(T) = lambda_E * sum_{i>=s} I_i(T)

    If E(T) exceeds the requirement the constraint is slack, lambda_E is 0
    and the status is "constraint-inactive" rather than pass or fail.

    Args:
        policy: A `Threshold` policy
        params: Model constants, ``params.horizon`` sets the nominal step
        init: Initial state
        steps: Nominal integration steps across the horizon
        end_time: Terminal time, defaults to the horizon
        fpen: Stopping penalty for stopping-time candidates
        tol_violation: Bound on V, defaults to 1e-2 times the terminal time
        tol_hamiltonian: Relative bound on the drift of H
        band: Half-width around breakpoints excluded from the pointwise sign
            check, defaults to the larger of 1e-2 times the terminal time and
            four integration steps

    Raises:
        VerificationError: If policy is not a `Threshold`
    """
    if not isinstance(policy, Threshold):
        raise VerificationError(f"Can only verify threshold policies, got {policy}")
    traj = integrate(policy, params, init, end_time=end_time, steps=steps)
    T = traj.end_time
    if tol_violation is None:
        tol_violation = 1e-2 * T
    if band is None:
        band = max(1e-2 * T, 4 * params.horizon / steps)
    B, s, r = params.B, params.s, params.r
    _check_consistent(traj, policy, params)

    # Co-states are linear in (lambda0bar, lambda_E): integrate both parts once
    a2 = np.concatenate([params.a, params.a])
    P = _backward(
        traj,
        np.stack([-a2, np.zeros_like(a2)]),
        np.array([0.0, 1.0]),
        params,
    )
    phi_cost = _switching(traj.values, P[0], params)
    phi_exposure = _switching(traj.values, P[1], params)
    inactive = traj.E[-1] > params.required_exposure + ACTIVE_TOL
    if inactive:
        lambdaE = 0.0
        violation = _violation(phi_cost, traj.controls, traj.times)
    else:
        lambdaE, violation = _fit_lambda_e(phi_cost, phi_exposure, traj)
    costates = P[0] + lambdaE * P[1]
    phi = phi_cost + lambdaE * phi_exposure

    # Right-continuous controls at every grid point
    U = np.concatenate([traj.controls, traj.controls[-1:]])
    H = _hamiltonians(traj.values, costates, U, lambdaE, params)
    checks: Dict[str, bool] = {"violation": violation <= tol_violation}

    sign_changes: Dict[int, int] = {}
    crossings: Dict[int, Optional[float]] = {}
    single = True
    for j, level in enumerate(params.levels):
        if traj.I[:, level].max() <= 0:
            continue
        count, plus_to_minus, k = _sign_profile(phi[:, j])
        sign_changes[level] = count
        crossings[level] = _crossing_time(phi[:, j], traj.times, k)
        single &= count <= 1 and plus_to_minus
    checks["single_switch"] = single

    away = ~_near(traj.times, policy.breakpoints(params), band)
    checks["sign_consistent"] = bool(
        np.all((phi * U)[away] >= -POINTWISE_TOL)
    )

    deviation = float(np.abs(H - H[-1]).max())
    checks["hamiltonian_constant"] = deviation <= tol_hamiltonian * (1 + abs(H[-1]))

    terminal = {level: float(phi[-1, j]) for j, level in enumerate(params.levels)}
    Sr_T = float(traj.S[-1, r:].sum())
    populated_T = [
        level for level in params.levels if traj.I[-1, level] > 1e-12 and Sr_T > 1e-12
    ]
    checks["terminal_switching"] = all(terminal[level] < 0 for level in populated_T)

    spreaders = traj.I[:, s:].sum(axis=1) + traj.S[:, r:].sum(axis=1)
    bound = (H - lambdaE * spreaders)[1:-1]
    spreader_max = float(bound.max()) if len(bound) else 0.0
    forwarding = bool(traj.controls.any())
    checks["spreader_bound"] = spreader_max < 0 if forwarding else True

    psi: List[Tuple[int, int, float]] = []
    if params.penalties_strictly_convex():
        a = params.a
        for i in params.levels:
            for k in range(s, i):
                psi.append((i, k, float(a[i - s] - a[i] - (a[k - s] - a[k]))))
        h = params.horizon / steps
        times = [policy.times[i - s] for i in params.levels if i in sign_changes]
        ordered = all(t0 <= t1 + h for t0, t1 in zip(times, times[1:]))
        checks["penalty_ordering"] = ordered and all(v < 0 for _, _, v in psi)

    if fpen is not None:
        slope = fpen.derivative(T)
        target = lambdaE * float(traj.I[-1, s:].sum())
        checks["transversality"] = abs(slope - target) <= tol_hamiltonian * (
            1 + abs(slope)
        )

    abnormal = all(t >= T for t in policy.times)
    if abnormal:
        logging.warning(
            f"All thresholds of {policy} reach the terminal time {T}, the "
            "candidate may be abnormal"
        )
    if inactive:
        status = "constraint-inactive"
    else:
        status = "pass" if all(checks.values()) else "fail"
    logging.info(
        f"PMP verification of {policy}: {status}, lambda_E={lambdaE:.6g}, "
        f"V={violation:.3g}"
    )
    return VerificationReport(
        status=status,
        lambdaE=lambdaE,
        violation=violation,
        tol_violation=tol_violation,
        band=band,
        sign_changes=sign_changes,
        crossings=crossings,
        hamiltonian_T=float(H[-1]),
        hamiltonian_deviation=deviation,
        terminal_switching=terminal,
        spreader_bound=spreader_max,
        psi=psi,
        checks=checks,
        abnormal_candidate=abnormal,
    )
