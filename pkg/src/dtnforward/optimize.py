import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations, product
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .metrics import (
    ACTIVE_TOL,
    THROUGHPUT_TOL,
    ConstraintInactiveError,
    StoppingPenalty,
    delivery_from_exposure,
    delivery_probability,
    energy_cost,
    hitting_time,
    stopping_objective,
    throughput_ok,
    zero_control_horizon,
)
from .model import (
    FloatArray,
    ModelParams,
    StateVector,
    Trajectory,
    integrate,
    integrate_batch,
)
from .policy import (
    ForwardingPolicy,
    HeuristicClass,
    InfectionThreshold,
    One,
    ProbabilityThreshold,
    StaticEnergy,
    StaticTime,
    Threshold,
    Zero,
)

# Define the public API of this module
__all__ = [
    "InfeasibleError",
    "SearchConfig",
    "SearchTrace",
    "OptimizationReport",
    "optimize_fixed_T",
    "optimize_stopping",
    "optimize_heuristic",
]

Key = Tuple[float, ...]
#: Cost, feasibility, delivery probability and exposure of one evaluated point
Entry = Tuple[float, bool, float, float]
Score = Callable[[Entry], Optional[float]]


class InfeasibleError(Exception):
    """Raised if no member of a searched policy family meets the mandated
    delivery probability

    Attributes:
        max_delivery: Highest delivery probability seen during the search
    """

    def __init__(self, message: str, max_delivery: float):
        super().__init__(message)
        self.max_delivery = max_delivery


@dataclass(frozen=True)
class SearchConfig:
    """Settings of the grid plus pattern search

    Attributes:
        resolution: Coarse grid points per dimension
        max_grid_points: Cap on the coarse grid size, the per-dimension
            resolution is lowered until the full product fits
        shrink: Pattern-search mesh shrink factor
        min_mesh: Smallest mesh as a fraction of each coordinate's range
        max_evaluations: Stop refining after this many distinct evaluations
        multistart: Number of best coarse-grid points refined
        steps: Integration steps across the horizon for every evaluation
        threads: Worker threads sharing each batch of evaluations
        stopping_grid: Outer grid points over (0, T0] for the stopping time
        stopping_refine: Bounded scalar iterations refining the stopping time
        multiplier_rounds: Updates of the exposure multiplier in the
            Lagrangian stage of the threshold search, 0 skips the stage
        polish: Move one threshold off the grid to make a slack constraint active
        tie_break: How equal objectives are ordered, only "lexicographic"
    """

    resolution: int = 41
    max_grid_points: int = 20000
    shrink: float = 0.5
    min_mesh: float = 1e-4
    max_evaluations: int = 50000
    multistart: int = 8
    steps: int = 400
    threads: int = 1
    stopping_grid: int = 9
    stopping_refine: int = 12
    multiplier_rounds: int = 10
    polish: bool = True
    tie_break: str = "lexicographic"

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink must be in (0, 1), got {self.shrink}")
        if self.multistart < 1 or self.steps < 1 or self.threads < 1:
            raise ValueError(f"multistart, steps and threads must be >= 1: {self}")
        if self.multiplier_rounds < 0:
            raise ValueError(
                f"multiplier_rounds must be >= 0, got {self.multiplier_rounds}"
            )
        if self.stopping_grid < 1:
            raise ValueError(f"stopping_grid must be >= 1, got {self.stopping_grid}")
        if self.tie_break != "lexicographic":
            raise ValueError(f"Unknown tie_break {self.tie_break!r}")


@dataclass
class SearchTrace:
    """Path of one pattern-search start

    Attributes:
        start: Coordinates of the seed
        finish: Coordinates where the start stopped
        objective: Objective at finish
        iterations: Poll rounds made
    """

    start: Key
    finish: Key
    objective: float
    iterations: int = 0


@dataclass
class OptimizationReport:
    """Best policy found by a search and how it was found

    Attributes:
        family: Searched family, "threshold" or a `HeuristicClass` value
        policy: Best policy
        objective: Energy cost at the terminal time, plus f(T) for stopping
        feasible: Whether the policy meets the mandated delivery probability
        delivery: Its delivery probability
        unbiased_cost: Its energy cost change over the horizon
        evaluations: Distinct policies evaluated
        steps: Integration steps across ``horizon`` used for every evaluation
        horizon: Horizon that defines the integration step
        end_time: Terminal time of the reported trajectory
        traces: One entry per pattern-search start
    """

    family: str
    policy: ForwardingPolicy
    objective: float
    feasible: bool
    delivery: float
    unbiased_cost: float
    evaluations: int
    steps: int
    horizon: float
    end_time: float
    traces: List[SearchTrace] = field(default_factory=list)

    @property
    def stopping_time(self) -> float:
        return self.end_time

    def trajectory(self, params: ModelParams, init: StateVector) -> Trajectory:
        """Re-integrate the reported policy exactly as the search did"""
        return integrate(
            self.policy,
            replace(params, horizon=self.horizon),
            init,
            end_time=self.end_time,
            steps=self.steps,
        )


class _Family:
    # A policy family as a box of coordinates; time coordinates are step indices
    name = ""
    exhaustive = False

    def __init__(self, params: ModelParams, steps: int):
        self.params = params
        self.steps = steps
        self.L = params.n_controls
        self.lower = np.zeros(0)
        self.upper = np.zeros(0)
        self.is_time = np.zeros(0, dtype=bool)

    @property
    def dims(self) -> int:
        return len(self.lower)

    def controls(self, X: FloatArray) -> Tuple[FloatArray, np.ndarray]:
        raise NotImplementedError(self)

    def policy(self, x: Sequence[float]) -> ForwardingPolicy:
        raise NotImplementedError(self)

    def grid(self, cfg: SearchConfig) -> FloatArray:
        if self.dims == 0:
            return np.zeros((1, 0))
        res = cfg.resolution
        while res > 2 and res**self.dims > cfg.max_grid_points:
            res -= 1
        axes = [np.linspace(lo, hi, res) for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(product(*axes)), dtype=np.float64).reshape(-1, self.dims)

    def mesh(self, cfg: SearchConfig, res: int) -> Tuple[FloatArray, FloatArray]:
        span = self.upper - self.lower
        start = span / (res - 1)
        smallest = np.where(
            self.is_time, np.maximum(1.0, cfg.min_mesh * span), cfg.min_mesh * span
        )
        return start, smallest

    def snap(self, X: FloatArray) -> FloatArray:
        X = np.clip(X, self.lower, self.upper)
        X[:, self.is_time] = np.rint(X[:, self.is_time])
        return X

    def time_of(self, index: float) -> float:
        return float(index) * self.params.horizon / self.steps


class _ThresholdFamily(_Family):
    name = "threshold"

    def __init__(self, params: ModelParams, steps: int, free: Sequence[bool]):
        super().__init__(params, steps)
        self.free = np.array(free, dtype=bool)
        d = int(self.free.sum())
        self.lower = np.zeros(d)
        self.upper = np.full(d, float(steps))
        self.is_time = np.ones(d, dtype=bool)

    def controls(self, X):
        cutoffs = np.zeros((len(X), self.L), dtype=np.int64)
        cutoffs[:, self.free] = X.astype(np.int64)
        return np.ones((len(X), self.L)), cutoffs

    def policy(self, x):
        times = np.zeros(self.L)
        times[self.free] = [self.time_of(m) for m in x]
        return Threshold(tuple(times))


class _StaticEnergyFamily(_Family):
    name = HeuristicClass.STATIC_ENERGY.value

    def __init__(self, params, steps):
        super().__init__(params, steps)
        self.lower = np.zeros(2)
        self.upper = np.array([float(steps), 1.0])
        self.is_time = np.array([True, False])

    def controls(self, X):
        values = np.repeat(X[:, 1:2], self.L, axis=1)
        cutoffs = np.repeat(X[:, 0:1].astype(np.int64), self.L, axis=1)
        return values, cutoffs

    def policy(self, x):
        return StaticEnergy(jump=self.time_of(x[0]), value=float(x[1]))


class _StaticTimeFamily(_Family):
    name = HeuristicClass.STATIC_TIME.value

    def __init__(self, params, steps):
        super().__init__(params, steps)
        self.lower = np.zeros(self.L)
        self.upper = np.ones(self.L)
        self.is_time = np.zeros(self.L, dtype=bool)

    def controls(self, X):
        return X.copy(), np.full(X.shape, self.steps, dtype=np.int64)

    def policy(self, x):
        return StaticTime(tuple(float(v) for v in x))


class _StaticUniformFamily(_Family):
    name = HeuristicClass.STATIC_UNIFORM.value

    def __init__(self, params, steps):
        super().__init__(params, steps)
        self.lower = np.zeros(1)
        self.upper = np.ones(1)
        self.is_time = np.zeros(1, dtype=bool)

    def controls(self, X):
        values = np.repeat(X, self.L, axis=1)
        return values, np.full(values.shape, self.steps, dtype=np.int64)

    def policy(self, x):
        return StaticTime((float(x[0]),) * self.L)


class _SingletonFamily(_Family):
    exhaustive = True

    def __init__(self, params, steps, cls: HeuristicClass):
        super().__init__(params, steps)
        self.name = cls.value
        self.value = 1.0 if cls is HeuristicClass.ONE else 0.0

    def controls(self, X):
        values = np.full((len(X), self.L), self.value)
        return values, np.full(values.shape, self.steps, dtype=np.int64)

    def policy(self, x):
        return One() if self.value else Zero()


class _DropTimeFamily(_Family):
    # Feedback heuristics searched through the drop times they can induce
    exhaustive = True

    def __init__(self, params, steps, cls: HeuristicClass, init: StateVector):
        super().__init__(params, steps)
        self.name = cls.value
        self.cls = cls
        traj = integrate(One(), params, init, steps=steps)
        if cls is HeuristicClass.PROBABILITY_THRESHOLD:
            metric = np.array([delivery_from_exposure(e, params) for e in traj.E])
        else:
            metric = traj.I[:, params.s :].sum(axis=1)
        # Read back on the search grid in case integrate had to halve the step
        grid = np.linspace(0.0, params.horizon, steps + 1)
        self.metric = np.interp(grid, traj.times, metric)
        # Only drop times where the metric first reaches a new level are reachable
        running = np.maximum.accumulate(self.metric)
        record = np.concatenate([[True], self.metric[1:] > running[:-1]])
        self.reachable = np.flatnonzero(record)
        self.lower = np.zeros(1)
        self.upper = np.array([float(steps)])
        self.is_time = np.ones(1, dtype=bool)

    def grid(self, cfg):
        drops = np.concatenate([self.reachable, [self.steps]])
        return np.unique(drops).astype(np.float64)[:, None]

    def controls(self, X):
        cutoffs = np.repeat(X.astype(np.int64), self.L, axis=1)
        return np.ones(cutoffs.shape), cutoffs

    def policy(self, x):
        k = int(x[0])
        level = 1.0 if k >= self.steps else float(self.metric[k])
        if self.cls is HeuristicClass.PROBABILITY_THRESHOLD:
            return ProbabilityThreshold(q=level)
        return InfectionThreshold(c=level)


class _Evaluator:
    # Cached batch evaluation of snapped candidates, deterministic in thread count

    def __init__(
        self,
        family: _Family,
        params: ModelParams,
        init: StateVector,
        cfg: SearchConfig,
    ):
        self.family = family
        self.params = params
        self.init = init
        self.cfg = cfg
        self.cache: Dict[Key, Entry] = {}

    @property
    def count(self) -> int:
        return len(self.cache)

    def _integrate(self, X: FloatArray) -> FloatArray:
        values, cutoffs = self.family.controls(X)
        n = len(X)
        threads = min(self.cfg.threads, n)
        if threads <= 1:
            return integrate_batch(
                values, cutoffs, self.params, self.init, self.cfg.steps
            )
        bounds = np.linspace(0, n, threads + 1).astype(int)
        chunks = [(lo, hi) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(
                lambda c: integrate_batch(
                    values[c[0] : c[1]],
                    cutoffs[c[0] : c[1]],
                    self.params,
                    self.init,
                    self.cfg.steps,
                ),
                chunks,
            )
            return np.concatenate(list(parts))

    def __call__(self, X: FloatArray) -> List[Tuple[Key, Entry]]:
        X = self.family.snap(np.array(X, dtype=np.float64))
        keys = [tuple(float(v) for v in row) for row in X]
        new = sorted({k for k in keys if k not in self.cache})
        if new:
            B = self.params.B
            finals = self._integrate(np.array(new).reshape(len(new), -1))
            mass = finals[:, : B + 1] + finals[:, B + 1 : 2 * B + 2]
            costs = mass @ self.params.a
            exposure = finals[:, -1]
            need = self.params.required_exposure - THROUGHPUT_TOL
            for k, cost, e in zip(new, costs, exposure):
                self.cache[k] = (
                    float(cost),
                    bool(e >= need),
                    delivery_from_exposure(float(e), self.params),
                    float(e),
                )
        return [(k, self.cache[k]) for k in keys]

    def best(
        self, n: int = 1, score: Optional[Score] = None
    ) -> List[Tuple[Key, float]]:
        score = score or _feasible_cost
        ranked = []
        for key, entry in self.cache.items():
            value = score(entry)
            if value is not None:
                ranked.append((value, key))
        ranked.sort()
        return [(key, value) for value, key in ranked[:n]]

    def max_delivery(self) -> float:
        return max((entry[2] for entry in self.cache.values()), default=0.0)


def _feasible_cost(entry: Entry) -> Optional[float]:
    cost, ok, _, _ = entry
    return cost if ok else None


def _lagrangian(multiplier: float, target: float) -> Score:
    # Slack or shortfall in exposure is priced instead of forbidden
    def score(entry: Entry) -> float:
        cost, _, _, exposure = entry
        return cost - multiplier * (exposure - target)

    return score


def _poll_directions(d: int) -> FloatArray:
    directions = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        directions += [e, -e]
    # Diagonal moves let the search slide along an active constraint
    for i, j in combinations(range(d), 2):
        for si, sj in product((1.0, -1.0), repeat=2):
            e = np.zeros(d)
            e[i], e[j] = si, sj
            directions.append(e)
    return np.array(directions).reshape(-1, d)


def _pattern_search(
    evaluator: _Evaluator,
    seeds: List[Tuple[Key, float]],
    cfg: SearchConfig,
    res: int,
    score: Score = _feasible_cost,
) -> List[SearchTrace]:
    family = evaluator.family
    start_mesh, smallest = family.mesh(cfg, res)
    directions = _poll_directions(family.dims)
    traces = [SearchTrace(start=k, finish=k, objective=f) for k, f in seeds]
    scale = [1.0] * len(seeds)
    active = [family.dims > 0] * len(seeds)
    while any(active) and evaluator.count < cfg.max_evaluations:
        polls = []
        for i, trace in enumerate(traces):
            if active[i]:
                step = directions * start_mesh * scale[i]
                polls.append((i, np.array(trace.finish) + step))
        results = evaluator(np.concatenate([p for _, p in polls]))
        offset = 0
        for i, P in polls:
            chunk = results[offset : offset + len(P)]
            offset += len(P)
            trace = traces[i]
            trace.iterations += 1
            better = []
            for key, entry in chunk:
                value = score(entry)
                if value is not None and value < trace.objective:
                    better.append((value, key))
            if better:
                trace.objective, trace.finish = min(better)
            else:
                scale[i] *= cfg.shrink
                if np.all(start_mesh * scale[i] < smallest):
                    active[i] = False
                    logging.debug(f"Start {trace.start} converged at {trace.finish}")
    return traces


def _initial_multiplier(evaluator: _Evaluator) -> float:
    # Cost per unit of exposure between the cheapest point and the cheapest
    # feasible one
    (cheapest, _), = evaluator.best(1, lambda entry: entry[0])
    (feasible, _), = evaluator.best(1)
    cost0, _, _, e0 = evaluator.cache[cheapest]
    cost1, _, _, e1 = evaluator.cache[feasible]
    if e1 - e0 > THROUGHPUT_TOL and cost1 > cost0:
        return (cost1 - cost0) / (e1 - e0)
    return 1.0


def _multiplier_starts(
    evaluator: _Evaluator, cfg: SearchConfig, res: int
) -> List[Tuple[Key, float]]:
    """Feasible points found by minimising ``cost - lam * (E - target)``

    The multiplier is doubled until the unconstrained minimiser meets the
    requirement and then bisected, each minimisation being a multistart
    pattern search at full resolution. Every feasible minimiser is returned
    as a seed for the constrained search.
    """
    target = evaluator.params.required_exposure
    lam = _initial_multiplier(evaluator)
    lo, hi = 0.0, math.inf
    found: Dict[Key, float] = {}
    for _ in range(cfg.multiplier_rounds):
        if evaluator.count >= cfg.max_evaluations:
            break
        score = _lagrangian(lam, target)
        seeds = evaluator.best(cfg.multistart, score)
        traces = _pattern_search(evaluator, seeds, cfg, res, score)
        key = min((t.objective, t.finish) for t in traces)[1]
        cost, ok, _, exposure = evaluator.cache[key]
        logging.debug(
            f"Multiplier {lam:.6g}: cost {cost:.6g}, exposure {exposure:.6g}"
        )
        if ok:
            found[key] = cost
            hi = lam
        else:
            lo = lam
        lam = 2 * lam if math.isinf(hi) else 0.5 * (lo + hi)
    return sorted(found.items(), key=lambda item: (item[1], item[0]))


def _search(
    family: _Family,
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig,
    multiplier: bool = False,
) -> Tuple[_Evaluator, List[SearchTrace]]:
    evaluator = _Evaluator(family, params, init, cfg)
    grid = family.grid(cfg)
    evaluator(grid)
    seeds = evaluator.best(cfg.multistart)
    if not seeds:
        raise InfeasibleError(
            f"No {family.name} policy reaches delivery probability {params.p}, best "
            f"is {evaluator.max_delivery():.6g}",
            evaluator.max_delivery(),
        )
    traces: List[SearchTrace] = []
    if not family.exhaustive:
        res = len(np.unique(grid[:, 0])) if family.dims else 2
        res = max(res, 2)
        if multiplier and params.p > 0 and family.dims > 0:
            merged = dict(seeds)
            merged.update(_multiplier_starts(evaluator, cfg, res)[: cfg.multistart])
            seeds = sorted(merged.items(), key=lambda item: (item[1], item[0]))
        traces = _pattern_search(evaluator, seeds, cfg, res)
    return evaluator, traces


def _report(
    family_name: str,
    policy: ForwardingPolicy,
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig,
    evaluations: int,
    traces: List[SearchTrace],
) -> OptimizationReport:
    traj = integrate(policy, params, init, steps=cfg.steps)
    final_cost = energy_cost(traj.final, params)
    return OptimizationReport(
        family=family_name,
        policy=policy,
        objective=final_cost,
        feasible=throughput_ok(traj, params),
        delivery=delivery_probability(traj, params),
        unbiased_cost=final_cost - energy_cost(init, params),
        evaluations=evaluations,
        steps=cfg.steps,
        horizon=params.horizon,
        end_time=params.horizon,
        traces=traces,
    )


def _free_levels(params: ModelParams, init: StateVector, steps: int) -> List[bool]:
    # A level never holding infectives under all-ones never does under any policy
    traj = integrate(One(), params, init, steps=steps)
    return [bool(traj.I[:, i].max() > 0) for i in params.levels]


def _activate_constraint(
    policy: Threshold,
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig,
) -> Threshold:
    # Grid thresholds leave some slack in E(T); slide one threshold down within
    # its last grid step until the constraint holds with equality
    target = params.required_exposure
    h = params.horizon / cfg.steps

    def with_time(j: int, t: float) -> Threshold:
        times = list(policy.times)
        times[j] = t
        return Threshold(tuple(times))

    def gap(j: int, t: float) -> float:
        traj = integrate(with_time(j, t), params, init, steps=cfg.steps)
        return float(traj.E[-1]) - target

    traj = integrate(policy, params, init, steps=cfg.steps)
    if traj.E[-1] - target <= ACTIVE_TOL:
        return policy
    best, best_cost = policy, energy_cost(traj.final, params)
    for j, t in enumerate(policy.times):
        lo = max(0.0, t - h)
        if t <= 0 or gap(j, lo) >= 0:
            continue
        root = float(brentq(lambda x: gap(j, x), lo, t, xtol=1e-13))
        candidate = with_time(j, root)
        cand = integrate(candidate, params, init, steps=cfg.steps)
        if throughput_ok(cand, params) and energy_cost(cand.final, params) < best_cost:
            best, best_cost = candidate, energy_cost(cand.final, params)
    return best


def optimize_fixed_T(
    params: ModelParams, init: StateVector, cfg: SearchConfig = SearchConfig()
) -> OptimizationReport:
    """Best threshold policy for the fixed terminal time problem

    Searches threshold vectors over [0, T] for every level that can ever hold
    infectives (others are pinned to 0). A coarse grid on the integration
    grid seeds a Lagrangian stage, which prices exposure with a bisected
    multiplier so the search can cross the constraint boundary. The best
    feasible grid points and Lagrangian minimisers then start a constrained
    pattern search at full resolution, and an off-grid polish finally makes
    a slack constraint active.

    Raises:
        InfeasibleError: If no searched threshold vector, all-ones included,
            meets the mandated delivery probability
    """
    free = _free_levels(params, init, cfg.steps)
    family = _ThresholdFamily(params, cfg.steps, free)
    evaluator, traces = _search(family, params, init, cfg, multiplier=True)
    (key, _), = evaluator.best(1)
    policy = family.policy(key)
    assert isinstance(policy, Threshold)
    if cfg.polish and params.p > 0:
        policy = _activate_constraint(policy, params, init, cfg)
    report = _report("threshold", policy, params, init, cfg, evaluator.count, traces)
    logging.info(
        f"Threshold search over {family.dims} levels: {report.evaluations} "
        f"evaluations, cost {report.objective:.6g}, thresholds {policy.times}"
    )
    return report


def optimize_heuristic(
    cls: HeuristicClass,
    params: ModelParams,
    init: StateVector,
    cfg: SearchConfig = SearchConfig(),
) -> OptimizationReport:
    """Best member of a heuristic class under the same delivery requirement

    One and Zero are single policies and are always reported, with their
    feasibility flag. Every other class must have a feasible member.

    Raises:
        InfeasibleError: If a searched class has no feasible member
    """
    family: _Family
    if cls in (HeuristicClass.ONE, HeuristicClass.ZERO):
        family = _SingletonFamily(params, cfg.steps, cls)
        policy = family.policy(())
        return _report(cls.value, policy, params, init, cfg, 1, [])
    elif cls is HeuristicClass.STATIC_ENERGY:
        family = _StaticEnergyFamily(params, cfg.steps)
    elif cls is HeuristicClass.STATIC_TIME:
        family = _StaticTimeFamily(params, cfg.steps)
    elif cls is HeuristicClass.STATIC_UNIFORM:
        family = _StaticUniformFamily(params, cfg.steps)
    else:
        family = _DropTimeFamily(params, cfg.steps, cls, init)
    evaluator, traces = _search(family, params, init, cfg)
    (key, _), = evaluator.best(1)
    report = _report(
        cls.value, family.policy(key), params, init, cfg, evaluator.count, traces
    )
    logging.info(
        f"Best {cls.value} policy {report.policy}: cost {report.objective:.6g} "
        f"after {report.evaluations} evaluations"
    )
    return report


@dataclass
class _StopCandidate:
    objective: float
    report: OptimizationReport


def _stopping_candidate(
    T: float,
    params: ModelParams,
    init: StateVector,
    fpen: StoppingPenalty,
    cfg: SearchConfig,
) -> Optional[_StopCandidate]:
    sub = replace(params, horizon=T)
    try:
        inner = optimize_fixed_T(sub, init, cfg)
    except InfeasibleError:
        return None
    t_hit = hitting_time(inner.policy, sub, init, steps=cfg.steps)
    if t_hit is None or t_hit <= 0:
        return None
    assert isinstance(inner.policy, Threshold)
    policy = Threshold(tuple(min(t, t_hit) for t in inner.policy.times))
    traj = integrate(policy, sub, init, end_time=t_hit, steps=cfg.steps)
    try:
        objective = stopping_objective(traj, params, fpen)
    except ConstraintInactiveError as e:
        logging.debug(f"Dropping stopping candidate T={T:.6g}: {e}")
        return None
    final_cost = energy_cost(traj.final, params)
    report = OptimizationReport(
        family="threshold-stopping",
        policy=policy,
        objective=objective,
        feasible=True,
        delivery=delivery_probability(traj, params),
        unbiased_cost=final_cost - energy_cost(init, params),
        evaluations=inner.evaluations,
        steps=cfg.steps,
        horizon=T,
        end_time=t_hit,
        traces=inner.traces,
    )
    return _StopCandidate(objective, report)


def optimize_stopping(
    params: ModelParams,
    init: StateVector,
    fpen: StoppingPenalty = StoppingPenalty(),
    cfg: SearchConfig = SearchConfig(),
) -> OptimizationReport:
    """Best threshold policy and stopping time for ``f(T) + energy cost``

    Every candidate stops when the throughput constraint first holds with
    equality. The outer search runs a grid over (0, T0], T0 being the
    zero-control horizon, and refines the best cell by bounded scalar
    minimisation; each outer point solves the fixed terminal time problem.
    The zero-control policy stopped at T0 is always a candidate.

    Raises:
        InfeasibleHorizonError: If no initial infective has s units of energy
    """
    T0 = zero_control_horizon(params, init)
    zero = Threshold((0.0,) * params.n_controls)
    base = energy_cost(init, params)
    if T0 <= 0:
        return OptimizationReport(
            family="threshold-stopping",
            policy=zero,
            objective=fpen(0.0) + base,
            feasible=True,
            delivery=0.0,
            unbiased_cost=0.0,
            evaluations=0,
            steps=cfg.steps,
            horizon=params.horizon,
            end_time=0.0,
        )
    zero_traj = integrate(zero, replace(params, horizon=T0), init, steps=cfg.steps)
    candidates: Dict[float, Optional[_StopCandidate]] = {
        T0: _StopCandidate(
            fpen(T0) + base,
            OptimizationReport(
                family="threshold-stopping",
                policy=zero,
                objective=fpen(T0) + base,
                feasible=True,
                delivery=delivery_probability(zero_traj, params),
                unbiased_cost=0.0,
                evaluations=1,
                steps=cfg.steps,
                horizon=T0,
                end_time=T0,
            ),
        )
    }

    def objective(T: float) -> float:
        if T not in candidates:
            candidates[T] = _stopping_candidate(T, params, init, fpen, cfg)
            logging.info(f"Stopping search at T={T:.6g}: {candidates[T]}")
        found = candidates[T]
        return found.objective if found else math.inf

    grid = [T0 * (k + 1) / cfg.stopping_grid for k in range(cfg.stopping_grid)]
    values = [objective(T) for T in grid]
    k = int(np.argmin(values))
    lo = grid[k - 1] if k > 0 else 0.5 * grid[0]
    hi = grid[k + 1] if k + 1 < len(grid) else grid[k]
    if cfg.stopping_refine > 0 and hi > lo:
        minimize_scalar(
            objective,
            bounds=(lo, hi),
            method="bounded",
            options=dict(maxiter=cfg.stopping_refine, xatol=1e-4 * T0),
        )
    found = [c for c in candidates.values() if c is not None]
    best = min(found, key=lambda c: (c.objective, c.report.end_time))
    best.report.evaluations = sum(c.report.evaluations for c in found)
    logging.info(
        f"Stopping time {best.report.end_time:.6g} with objective "
        f"{best.objective:.6g}"
    )
    return best.report
