import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .mcsim import MCConfig, run_ensemble
from .metrics import energy_cost
from .model import ModelParams, ParameterError, StateVector
from .optimize import (
    InfeasibleError,
    OptimizationReport,
    SearchConfig,
    optimize_fixed_T,
    optimize_heuristic,
)
from .policy import ForwardingPolicy, HeuristicClass
from .utils import config_hash

# Define the public API of this module
__all__ = [
    "MYOPIC_OPTIMAL",
    "ErrorModel",
    "MultiMessageConfig",
    "ExperimentResult",
    "spread_message",
    "run_validation",
    "run_heuristic_sweep",
    "run_robustness",
    "run_multi_message",
]

#: Family tag of the multi-message strategy that reuses the optimal policy
MYOPIC_OPTIMAL = "myopic-optimal"

Row = List[Optional[float]]
T = TypeVar("T")
R = TypeVar("R")


class ErrorModel(Enum):
    """Protocol error swept by `run_robustness`"""

    #: Half-range of the uniform clock offsets
    THETA_STAR = "theta_star"
    #: Probability of misjudging the energy level by one unit either way
    P_STAR = "p_star"


@dataclass(frozen=True)
class MultiMessageConfig:
    """Settings of the successive message experiment

    Attributes:
        M: Maximum number of messages sent
        Upsilon: Fraction of the population the source seeds each message to
        ttl: Time to live of every message
        family: `MYOPIC_OPTIMAL` or a `HeuristicClass` value
        p: Mandated delivery probability of every message
    """

    M: int = 50
    Upsilon: float = 0.001
    ttl: float = 100.0
    family: str = MYOPIC_OPTIMAL
    p: float = 0.95

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError(f"M must be >= 1, got {self.M}")
        if not 0 < self.Upsilon < 1:
            raise ParameterError(f"Upsilon must be in (0, 1), got {self.Upsilon}")
        if not self.ttl > 0:
            raise ParameterError(f"ttl must be positive, got {self.ttl}")
        families = [MYOPIC_OPTIMAL] + [c.value for c in HeuristicClass]
        if self.family not in families:
            raise ParameterError(
                f"Unknown family {self.family!r}, expected one of {families}"
            )


@dataclass
class ExperimentResult:
    """A table of results with provenance

    Attributes:
        name: Experiment name
        columns: Column names
        rows: One row per sweep point, None where a value is absent
        metadata: Seed, configuration hash and experiment specific notes
    """

    name: str
    columns: List[str]
    rows: List[Row]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> List[Optional[float]]:
        """All values of one column"""
        j = self.columns.index(name)
        return [row[j] for row in self.rows]


def _sweep(work: Callable[[T], R], points: Sequence[T], threads: int) -> List[R]:
    # Sweep points are independent, map keeps their order
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, points))


def _check_points(name: str, points: Sequence[float]):
    if len(points) == 0:
        raise ParameterError(f"{name} sweep needs at least one value")


def run_validation(
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig,
    mc: MCConfig,
    p_values: Sequence[float],
) -> ExperimentResult:
    """Compare the mean-field model against Monte Carlo ensembles

    For each mandated probability the optimal thresholds are found on the
    mean-field model, then evaluated both by the model and by simulation.
    """
    _check_points("Validation", p_values)

    def point(p: float) -> Row:
        sub = replace(params, p=p)
        report = optimize_fixed_T(sub, init, cfg)
        stats = run_ensemble(report.policy, sub, init, mc)
        logging.info(
            f"Validation p={p}: model cost {report.unbiased_cost:.6g}, "
            f"simulated {stats.cost_mean:.6g}"
        )
        return [
            p,
            report.unbiased_cost,
            stats.cost_mean,
            stats.cost_std,
            report.delivery,
            stats.delivery_mean,
            stats.delivery_std,
        ]

    return ExperimentResult(
        name="validation",
        columns=[
            "p",
            "ode_cost",
            "mc_cost_mean",
            "mc_cost_std",
            "ode_delivery",
            "mc_delivery_mean",
            "mc_delivery_std",
        ],
        rows=_sweep(point, list(p_values), cfg.threads),
        metadata=dict(
            seed=mc.seed,
            config_hash=config_hash([params, init, cfg, mc, list(p_values)]),
        ),
    )


def _heuristic_cost(
    cls: HeuristicClass, params: ModelParams, init: StateVector, cfg: SearchConfig
) -> Optional[float]:
    try:
        report = optimize_heuristic(cls, params, init, cfg)
    except InfeasibleError as e:
        logging.warning(f"{cls.value} infeasible at beta={params.beta}: {e}")
        return None
    if not report.feasible:
        logging.warning(
            f"{cls.value} misses p={params.p} at beta={params.beta} with delivery "
            f"{report.delivery:.6g}"
        )
        return None
    return report.unbiased_cost


def run_heuristic_sweep(
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig,
    beta_values: Sequence[float] = tuple(np.linspace(1, 4, 7)),
    classes: Sequence[HeuristicClass] = tuple(HeuristicClass),
) -> ExperimentResult:
    """Unbiased cost of the optimal policy and of each heuristic class optimum

    At each point both contact rates are set to the swept beta. A class
    without a feasible member leaves its cell empty. The One policy is
    listed under ``metadata["flagged"]``, being far worse than the rest.
    """
    _check_points("Heuristic", beta_values)

    def point(beta: float) -> Row:
        sub = replace(params, beta=beta, beta0=beta)
        try:
            optimal: Optional[float] = optimize_fixed_T(sub, init, cfg).unbiased_cost
        except InfeasibleError as e:
            logging.warning(f"No feasible threshold policy at beta={beta}: {e}")
            optimal = None
        costs = [_heuristic_cost(c, sub, init, cfg) for c in classes]
        logging.info(f"Heuristic sweep beta={beta}: optimal {optimal}, {costs}")
        return [beta, optimal] + costs

    return ExperimentResult(
        name="heuristic-sweep",
        columns=["beta", "optimal"] + [c.value for c in classes],
        rows=_sweep(point, [float(b) for b in beta_values], cfg.threads),
        metadata=dict(
            flagged=[HeuristicClass.ONE.value],
            config_hash=config_hash([params, init, cfg, list(beta_values)]),
        ),
    )


def run_robustness(
    params: ModelParams,
    init: StateVector,
    policy: ForwardingPolicy,
    mc: MCConfig,
    variable: ErrorModel,
    values: Sequence[float],
) -> ExperimentResult:
    """Monte Carlo cost and delivery of a fixed policy under protocol errors

    Every point reuses the ensemble seeds, so a zero error reproduces the
    error-free ensemble exactly.

    Args:
        params: Model constants
        init: Initial fractions
        policy: Policy found on the error-free mean-field model
        mc: Ensemble settings, the swept field is overridden per point
        variable: Which error is swept
        values: Error magnitudes
    """
    _check_points("Robustness", values)

    def point(value: float) -> Row:
        swept = replace(mc, **{variable.value: value})
        stats = run_ensemble(policy, params, init, swept)
        logging.info(
            f"Robustness {variable.value}={value}: cost {stats.cost_mean:.6g}, "
            f"delivery {stats.delivery_mean:.6g}"
        )
        return [
            value,
            stats.cost_mean,
            stats.cost_std,
            stats.delivery_mean,
            stats.delivery_std,
        ]

    return ExperimentResult(
        name=f"robustness-{variable.value}",
        columns=[
            variable.value,
            "cost_mean",
            "cost_std",
            "delivery_mean",
            "delivery_std",
        ],
        rows=_sweep(point, [float(v) for v in values], 1),
        metadata=dict(
            seed=mc.seed,
            config_hash=config_hash([params, init, policy, mc, list(values)]),
        ),
    )


def spread_message(
    mass: Sequence[float], params: ModelParams, Upsilon: float
) -> Optional[StateVector]:
    """Seed a new message to a fraction Upsilon of the population

    Every level j >= s + r gives up a share of Upsilon proportional to its
    mass, and those nodes become infectives at level j - r.

    >>> state = spread_message([0.2, 0, 0, 0.1, 0.5, 0.2], ModelParams(
    ...     B=5, s=2, r=1, beta=1, beta0=1, horizon=1,
    ...     penalties=(5, 4, 3, 2, 1, 0)), 0.01)
    >>> round(float(state.S[4]), 6), round(float(state.I[3]), 6)
    (0.49375, 0.00625)

    Args:
        mass: Fraction of nodes at each energy level 0..B
        params: Model constants
        Upsilon: Fraction of the whole population to seed

    Returns:
        The seeded state, or None if levels >= s + r hold less than Upsilon
    """
    mass = np.asarray(mass, dtype=np.float64)
    lowest = params.s + params.r
    eligible = float(mass[lowest:].sum())
    if eligible < Upsilon or eligible <= 0:
        return None
    moved = np.zeros_like(mass)
    moved[lowest:] = Upsilon * mass[lowest:] / eligible
    S = mass - moved
    I = np.zeros_like(mass)  # noqa: E741
    I[lowest - params.r : len(mass) - params.r] = moved[lowest:]
    return StateVector(S=S, I=I, E=0.0)


def _single_message(
    family: str, params: ModelParams, init: StateVector, cfg: SearchConfig
) -> Optional[OptimizationReport]:
    # None when no member of the family can carry the message
    try:
        if family == MYOPIC_OPTIMAL:
            report = optimize_fixed_T(params, init, cfg)
        else:
            report = optimize_heuristic(HeuristicClass(family), params, init, cfg)
    except InfeasibleError as e:
        logging.info(f"{family} exhausted: {e}")
        return None
    return report if report.feasible else None


def run_multi_message(
    params: ModelParams,
    start: Sequence[float],
    mm: MultiMessageConfig,
    cfg: SearchConfig,
) -> ExperimentResult:
    """Send messages one after another until the network is exhausted

    Each message is seeded with `spread_message`, forwarded with the best
    policy of the chosen family, and dropped at its TTL, when every
    infective becomes susceptible again at its residual energy. The
    cumulative unbiased cost is measured from the state just after the
    first message was seeded. The run stops after M messages or at the
    first message no member of the family can deliver, which is reported
    as a final row with the feasible flag 0.

    Args:
        params: Model constants, horizon and p are replaced by the message's
        start: Fraction of nodes at each energy level before the first message
        mm: Experiment settings
        cfg: Search settings for each message
    """
    sub = replace(params, horizon=mm.ttl, p=mm.p)
    mass = np.asarray(start, dtype=np.float64)
    if len(mass) != params.B + 1:
        raise ParameterError(f"Expected {params.B + 1} levels, got {len(mass)}")
    StateVector(S=mass, I=np.zeros_like(mass)).check(params)
    rows: List[Row] = []
    baseline: Optional[float] = None
    cumulative = 0.0
    for k in range(1, mm.M + 1):
        init = spread_message(mass, sub, mm.Upsilon)
        report = None if init is None else _single_message(mm.family, sub, init, cfg)
        if init is None or report is None:
            rows.append([k, cumulative, 0])
            logging.info(f"{mm.family} exhausted at message {k}")
            break
        if baseline is None:
            baseline = energy_cost(init, sub)
        final = report.trajectory(sub, init).final.clamped()
        cumulative = energy_cost(final, sub) - baseline
        mass = final.mass()
        rows.append([k, cumulative, 1])
        logging.info(f"{mm.family} message {k}: cumulative cost {cumulative:.6g}")
    return ExperimentResult(
        name="multi-message",
        columns=["k", "cumulative_cost", "feasible"],
        rows=rows,
        metadata=dict(
            family=mm.family,
            messages=sum(int(row[2] or 0) for row in rows),
            config_hash=config_hash([params, list(start), mm, cfg]),
        ),
    )
