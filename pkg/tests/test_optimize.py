from dataclasses import replace
from itertools import product

import numpy as np
import pytest

from dtnforward import optimize
from dtnforward.metrics import (
    ConstraintInactiveError,
    StoppingPenalty,
    energy_cost,
    stopping_objective,
    throughput_ok,
    zero_control_horizon,
)
from dtnforward.model import (
    ModelParams,
    StateVector,
    integrate,
    integrate_batch,
    power_penalties,
)
from dtnforward.optimize import (
    InfeasibleError,
    SearchConfig,
    optimize_fixed_T,
    optimize_heuristic,
    optimize_stopping,
)
from dtnforward.pmp import verify_pmp
from dtnforward.policy import HeuristicClass, One, Threshold, Zero
from tests.conftest import (
    EVEN_SPLIT_INIT,
    FAST_SEARCH,
    FIVE_LEVEL_INIT,
    SMALL_INIT,
    even_split_params,
    five_level_params,
    small_params,
)


def test_report_matches_re_evaluation(small):
    params, init = small
    report = optimize_fixed_T(params, init, FAST_SEARCH)
    assert isinstance(report.policy, Threshold)
    assert report.feasible
    assert report.delivery >= params.p - 1e-12
    traj = report.trajectory(params, init)
    assert energy_cost(traj.final, params) == pytest.approx(
        report.objective, abs=1e-10
    )
    assert throughput_ok(traj, params)
    assert report.unbiased_cost == pytest.approx(
        report.objective - energy_cost(init, params), abs=1e-12
    )
    assert report.evaluations > 1
    assert len(report.traces) >= 1


def test_polish_makes_constraint_active(small):
    params, init = small
    report = optimize_fixed_T(params, init, FAST_SEARCH)
    traj = report.trajectory(params, init)
    assert traj.E[-1] == pytest.approx(params.required_exposure, abs=1e-6)


def test_p_zero_gives_zero_control(small):
    params, init = small
    report = optimize_fixed_T(replace(params, p=0.0), init, FAST_SEARCH)
    assert report.policy == Threshold((0.0, 0.0))
    assert report.objective == pytest.approx(energy_cost(init, params))
    assert report.unbiased_cost == pytest.approx(0, abs=1e-12)


def test_infeasible_problem_reports_best_delivery(small):
    params, init = small
    with pytest.raises(InfeasibleError) as info:
        optimize_fixed_T(replace(params, p=0.999, horizon=0.5), init, FAST_SEARCH)
    assert 0 < info.value.max_delivery < 0.999


def test_result_independent_of_threads(small):
    params, init = small
    one = optimize_fixed_T(params, init, FAST_SEARCH)
    two = optimize_fixed_T(params, init, replace(FAST_SEARCH, threads=3))
    assert one.policy == two.policy
    assert one.objective == two.objective


def test_optimal_beats_heuristics(small):
    params, init = small
    optimal = optimize_fixed_T(params, init, FAST_SEARCH)
    one = optimize_heuristic(HeuristicClass.ONE, params, init, FAST_SEARCH)
    energy = optimize_heuristic(
        HeuristicClass.STATIC_ENERGY, params, init, FAST_SEARCH
    )
    uniform = optimize_heuristic(
        HeuristicClass.STATIC_UNIFORM, params, init, FAST_SEARCH
    )
    assert optimal.unbiased_cost <= one.unbiased_cost + 1e-6
    for report in (energy, uniform):
        assert report.feasible
        assert optimal.unbiased_cost <= 1.02 * report.unbiased_cost + 1e-6


def test_singleton_heuristics(small):
    params, init = small
    one = optimize_heuristic(HeuristicClass.ONE, params, init, FAST_SEARCH)
    assert one.policy == One()
    assert one.evaluations == 1
    assert one.feasible
    zero = optimize_heuristic(HeuristicClass.ZERO, params, init, FAST_SEARCH)
    assert zero.policy == Zero()
    assert not zero.feasible
    assert zero.unbiased_cost == 0
    assert zero.delivery == pytest.approx(1 - np.exp(-2 * 0.1 * 5))


@pytest.mark.parametrize(
    "cls",
    [HeuristicClass.PROBABILITY_THRESHOLD, HeuristicClass.INFECTION_THRESHOLD],
)
def test_drop_time_heuristics(small, cls):
    params, init = small
    report = optimize_heuristic(cls, params, init, FAST_SEARCH)
    assert report.feasible
    assert report.family == cls.value
    traj = report.trajectory(params, init)
    assert energy_cost(traj.final, params) == pytest.approx(report.objective)


def test_heuristic_class_without_feasible_member(small):
    params, init = small
    with pytest.raises(InfeasibleError):
        optimize_heuristic(
            HeuristicClass.STATIC_TIME,
            replace(params, p=0.999, horizon=0.5),
            init,
            FAST_SEARCH,
        )


def test_thresholds_increase_with_level():
    params = five_level_params()
    report = optimize_fixed_T(params, FIVE_LEVEL_INIT, FAST_SEARCH)
    times = report.policy.times
    assert report.feasible
    assert all(t0 <= t1 + 0.5 for t0, t1 in zip(times, times[1:]))
    assert times[-1] > times[0]


@pytest.mark.slow
@pytest.mark.parametrize(
    "alpha, late_schedule", [(0.5, (5.75, 1.75)), (2.0, (2.5, 2.75))]
)
def test_even_split_needs_only_a_short_burst_at_the_top(alpha, late_schedule):
    # Zero control already delivers 1 - exp(-2), so a brief spell of forwarding
    # from the fully charged infectives beats any schedule that keeps the two
    # top levels forwarding for several time units
    params = even_split_params(alpha)
    cfg = replace(FAST_SEARCH, max_evaluations=20000)
    report = optimize_fixed_T(params, EVEN_SPLIT_INIT, cfg)
    assert report.feasible
    assert report.policy.times[-1] > 0
    assert max(report.policy.times) <= 1.0
    late = Threshold((0.0, 0.0) + late_schedule)
    traj = integrate(late, params, EVEN_SPLIT_INIT, steps=cfg.steps)
    assert throughput_ok(traj, params)
    assert report.objective < energy_cost(traj.final, params)


def test_unpopulated_levels_are_pinned_to_zero():
    params = five_level_params()
    # Nothing can ever reach level 5 again once everyone starts below it
    init = StateVector(S=[0, 0, 0, 0.6, 0.35, 0], I=[0, 0, 0, 0, 0.05, 0])
    report = optimize_fixed_T(replace(params, p=0.5), init, FAST_SEARCH)
    assert report.policy.times[3] == 0


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(resolution=1)
    with pytest.raises(ValueError):
        SearchConfig(shrink=1.0)
    with pytest.raises(ValueError):
        SearchConfig(tie_break="random")


def test_stopping_with_p_zero(small):
    params, init = small
    fpen = StoppingPenalty()
    report = optimize_stopping(replace(params, p=0.0), init, fpen, FAST_SEARCH)
    assert report.stopping_time == 0
    assert report.objective == pytest.approx(energy_cost(init, params))


def test_stopping_is_no_worse_than_zero_control(small):
    params, init = small
    fpen = StoppingPenalty(exponent=2, scale=0.01)
    report = optimize_stopping(params, init, fpen, FAST_SEARCH)
    T0 = zero_control_horizon(params, init)
    assert report.objective <= fpen(T0) + energy_cost(init, params) + 1e-9
    assert 0 < report.stopping_time <= T0 + 1e-9
    traj = report.trajectory(params, init)
    assert traj.end_time == report.stopping_time
    assert stopping_objective(traj, params, fpen) == pytest.approx(
        report.objective, abs=1e-9
    )


def test_stopping_grid_oracle():
    params = small_params(p=0.7, horizon=5.0)
    fpen = StoppingPenalty(exponent=2, scale=0.05)
    cfg = replace(FAST_SEARCH, stopping_grid=5, stopping_refine=6)
    report = optimize_stopping(params, SMALL_INIT, fpen, cfg)
    # Any grid point of the outer search is a valid upper bound
    T0 = zero_control_horizon(params, SMALL_INIT)
    for T in [T0 * (k + 1) / cfg.stopping_grid for k in range(cfg.stopping_grid)]:
        try:
            inner = optimize_fixed_T(replace(params, horizon=T), SMALL_INIT, cfg)
        except InfeasibleError:
            continue
        assert report.objective <= fpen(T) + inner.objective + 1e-6


def test_stopping_skips_candidates_off_the_constraint(small, monkeypatch):
    params, init = small

    def inactive(traj, params, fpen):
        raise ConstraintInactiveError("E(T) is above the requirement")

    monkeypatch.setattr(optimize, "stopping_objective", inactive)
    fpen = StoppingPenalty(exponent=2, scale=0.01)
    report = optimize_stopping(params, init, fpen, FAST_SEARCH)
    T0 = zero_control_horizon(params, init)
    assert report.policy == Threshold((0.0, 0.0))
    assert report.end_time == T0
    assert report.objective == pytest.approx(fpen(T0) + energy_cost(init, params))


def test_drop_times_read_on_the_search_grid(monkeypatch):
    params = five_level_params()
    steps = 200
    plain = optimize._DropTimeFamily(
        params, steps, HeuristicClass.INFECTION_THRESHOLD, FIVE_LEVEL_INIT
    )
    fine = optimize.integrate

    def refined(policy, params, init, steps):
        # As if the admissibility check had halved the step
        return fine(policy, params, init, steps=2 * steps)

    monkeypatch.setattr(optimize, "integrate", refined)
    family = optimize._DropTimeFamily(
        params, steps, HeuristicClass.INFECTION_THRESHOLD, FIVE_LEVEL_INIT
    )
    assert len(family.metric) == steps + 1
    assert family.metric == pytest.approx(plain.metric, abs=1e-4)
    assert family.reachable.max() <= steps


def grid_minimum(params, init, steps, cutoffs):
    # Cheapest feasible candidate among threshold step indices
    finals = integrate_batch(np.ones(cutoffs.shape), cutoffs, params, init, steps)
    B = params.B
    costs = (finals[:, : B + 1] + finals[:, B + 1 : 2 * B + 2]) @ params.a
    costs[finals[:, -1] < params.required_exposure - 1e-12] = np.inf
    k = int(np.argmin(costs))
    return costs[k], cutoffs[k]


def exhaustive_threshold_cost(params, init, steps):
    coarse = np.arange(0, steps + 1, steps // 40)
    cutoffs = np.array(list(product(coarse, coarse)))
    cost, (k1, k2) = grid_minimum(params, init, steps, cutoffs)
    assert np.isfinite(cost)
    # One refinement at single-step resolution around the best coarse cell
    half = steps // 40
    fine = [np.arange(max(k - half, 0), min(k + half, steps) + 1) for k in (k1, k2)]
    cost, _ = grid_minimum(params, init, steps, np.array(list(product(*fine))))
    return cost


@pytest.mark.slow
@pytest.mark.parametrize(
    "params, init",
    [
        (small_params(), SMALL_INIT),
        (
            ModelParams(
                B=3,
                s=2,
                r=1,
                beta=2.0,
                beta0=2.0,
                horizon=5.0,
                penalties=power_penalties(3, 2.0),
                p=0.5,
            ),
            StateVector(S=[0, 0, 0.3, 0.6], I=[0, 0, 0, 0.1]),
        ),
    ],
)
def test_search_matches_exhaustive_grid(params, init):
    cfg = SearchConfig(steps=200, polish=False)
    report = optimize_fixed_T(params, init, cfg)
    assert report.objective == pytest.approx(
        exhaustive_threshold_cost(params, init, cfg.steps), abs=1e-3
    )


@pytest.fixture(scope="module")
def five_level_optimum():
    params = five_level_params()
    return params, optimize_fixed_T(params, FIVE_LEVEL_INIT, SearchConfig())


@pytest.mark.slow
def test_five_level_optimum_is_ordered_and_stationary(five_level_optimum):
    params, report = five_level_optimum
    times = report.policy.times
    assert all(t0 < t1 for t0, t1 in zip(times, times[1:]))
    verification = verify_pmp(
        report.policy, params, FIVE_LEVEL_INIT, steps=report.steps
    )
    assert verification.passed, verification.checks
    # Forwarding longer from the top level breaks the conditions
    late = Threshold(times[:-1] + (min(1.2 * times[-1], params.horizon),))
    perturbed = verify_pmp(late, params, FIVE_LEVEL_INIT, steps=report.steps)
    assert perturbed.violation > verification.violation
    assert perturbed.status != "pass"


@pytest.mark.slow
def test_cheap_low_levels_give_an_early_middle_threshold():
    params = replace(five_level_params(), penalties=(4.4, 4.2, 4.0, 1.2, 1.1, 1.0))
    init = StateVector(S=FIVE_LEVEL_INIT.S, I=[0, 0, 0, 0, 0.025, 0.025])
    report = optimize_fixed_T(params, init, SearchConfig())
    t2, t3, t4, t5 = report.policy.times
    assert report.feasible
    assert t3 < min(t2, t4, t5)
