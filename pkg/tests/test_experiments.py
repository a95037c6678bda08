from dataclasses import replace

import numpy as np
import pytest

from dtnforward.experiments import (
    ErrorModel,
    MultiMessageConfig,
    run_heuristic_sweep,
    run_multi_message,
    run_robustness,
    run_validation,
    spread_message,
)
from dtnforward.mcsim import MCConfig, run_ensemble
from dtnforward.model import ModelParams, ParameterError, StateVector, power_penalties
from dtnforward.optimize import SearchConfig, optimize_fixed_T
from dtnforward.policy import HeuristicClass, Threshold
from tests.conftest import (
    FAST_SEARCH,
    FIVE_LEVEL_INIT,
    SMALL_INIT,
    five_level_params,
    small_params,
)

SMALL_MC = MCConfig(N=50, runs=4, report_points=11, seed=2)


def multi_params() -> ModelParams:
    return ModelParams(
        B=5,
        s=2,
        r=1,
        beta=3.0,
        beta0=3.0,
        horizon=100.0,
        penalties=power_penalties(5, 2.0),
    )


MULTI_START = [0, 0, 0, 0.33, 0.33, 0.34]


def test_spread_message_moves_upsilon():
    params = multi_params()
    state = spread_message(MULTI_START, params, 0.001)
    assert state is not None
    assert state.I.sum() == pytest.approx(0.001)
    assert state.S.sum() + state.I.sum() == pytest.approx(1.0)
    # Seeded nodes pay r units to receive the message
    assert state.I[2] == pytest.approx(0.001 * 0.33)
    assert state.I[4] == pytest.approx(0.001 * 0.34)
    assert state.I[5] == 0


def test_spread_message_needs_enough_eligible_nodes():
    params = multi_params()
    assert spread_message([0.9995, 0, 0, 0.0005, 0, 0], params, 0.001) is None
    assert spread_message([1.0, 0, 0, 0, 0, 0], params, 0.001) is None


def test_multi_message_exhausts_the_network():
    params = multi_params()
    mm = MultiMessageConfig(M=20, Upsilon=0.001, ttl=100, family="one", p=0.95)
    cfg = replace(FAST_SEARCH, steps=400)
    result = run_multi_message(params, MULTI_START, mm, cfg)
    assert result.columns == ["k", "cumulative_cost", "feasible"]
    feasible = result.column("feasible")
    costs = result.column("cumulative_cost")
    assert feasible[-1] == 0
    assert all(f == 1 for f in feasible[:-1])
    assert len(result.rows) <= 20
    assert result.metadata["messages"] == len(result.rows) - 1
    assert result.metadata["family"] == "one"
    assert costs[0] >= 0
    assert all(c0 <= c1 + 1e-12 for c0, c1 in zip(costs, costs[1:]))
    assert result.column("k") == list(range(1, len(result.rows) + 1))


def test_multi_message_stops_at_m():
    params = multi_params()
    mm = MultiMessageConfig(M=1, family="one")
    result = run_multi_message(params, MULTI_START, mm, FAST_SEARCH)
    assert result.rows == [[1, result.rows[0][1], 1]]


def test_multi_message_checks_start():
    params = multi_params()
    with pytest.raises(ParameterError):
        run_multi_message(
            params, [0.5, 0.5], MultiMessageConfig(family="one"), FAST_SEARCH
        )


@pytest.mark.parametrize(
    "kwargs", [dict(M=0), dict(Upsilon=0.0), dict(ttl=-1.0), dict(family="flood")]
)
def test_multi_message_config_invariants(kwargs):
    with pytest.raises(ParameterError):
        MultiMessageConfig(**kwargs)


def test_heuristic_sweep_columns():
    params = small_params()
    classes = [HeuristicClass.ONE, HeuristicClass.ZERO]
    result = run_heuristic_sweep(params, SMALL_INIT, FAST_SEARCH, [2.0], classes)
    assert result.columns == ["beta", "optimal", "one", "zero"]
    (row,) = result.rows
    assert row[0] == 2.0
    # Zero cannot meet p=0.7 on this instance, its cell stays empty
    assert row[3] is None
    assert row[1] <= row[2]
    assert result.metadata["flagged"] == ["one"]
    assert len(result.metadata["config_hash"]) == 64


def test_heuristic_sweep_sets_both_rates():
    params = replace(small_params(), beta0=0.5)
    result = run_heuristic_sweep(
        params, SMALL_INIT, FAST_SEARCH, [3.0], [HeuristicClass.ZERO]
    )
    # With beta0 = 3 zero control delivers 1 - exp(-1.5) > 0.7
    assert result.rows[0][2] == 0


def test_empty_sweeps_are_rejected():
    params = small_params()
    with pytest.raises(ParameterError):
        run_heuristic_sweep(params, SMALL_INIT, FAST_SEARCH, [])
    with pytest.raises(ParameterError):
        run_validation(params, SMALL_INIT, FAST_SEARCH, SMALL_MC, [])


def test_validation_compares_model_and_simulation():
    params = small_params()
    result = run_validation(params, SMALL_INIT, FAST_SEARCH, SMALL_MC, [0.7])
    assert result.columns[:3] == ["p", "ode_cost", "mc_cost_mean"]
    (row,) = result.rows
    assert row[0] == 0.7
    assert row[4] >= 0.7 - 1e-9
    assert all(v is not None and np.isfinite(v) for v in row)
    assert result.metadata["seed"] == 2


def test_robustness_zero_error_matches_plain_ensemble():
    params = small_params()
    policy = Threshold((1.0, 2.0))
    result = run_robustness(
        params, SMALL_INIT, policy, SMALL_MC, ErrorModel.THETA_STAR, [0.0, 1.0]
    )
    assert result.name == "robustness-theta_star"
    assert result.columns[0] == "theta_star"
    plain = run_ensemble(policy, params, SMALL_INIT, SMALL_MC)
    assert result.rows[0][1] == plain.cost_mean
    assert result.rows[0][3] == plain.delivery_mean


def test_robustness_over_energy_errors():
    params = small_params()
    result = run_robustness(
        params,
        SMALL_INIT,
        Threshold((1.0, 2.0)),
        SMALL_MC,
        ErrorModel.P_STAR,
        [0.0, 0.25],
    )
    assert result.column("p_star") == [0.0, 0.25]
    assert all(0 <= d <= 1 for d in result.column("delivery_mean"))


def test_cumulative_cost_starts_after_seeding():
    params = multi_params()
    mm = MultiMessageConfig(M=1, family="zero", p=0.01)
    result = run_multi_message(params, MULTI_START, mm, FAST_SEARCH)
    # Zero control spends nothing beyond the seeding itself
    assert result.rows == [[1, 0.0, 1]]


@pytest.mark.slow
def test_optimal_policy_undercuts_every_heuristic():
    params = five_level_params()
    cfg = SearchConfig(steps=200, multistart=4, max_evaluations=20000)
    classes = [c for c in HeuristicClass if c is not HeuristicClass.ZERO]
    result = run_heuristic_sweep(params, FIVE_LEVEL_INIT, cfg, [1.5, 2.0, 3.0], classes)
    for row in result.rows:
        optimal, heuristics = row[1], [c for c in row[2:] if c is not None]
        assert optimal is not None
        assert all(optimal <= c * (1 + 1e-3) + 1e-6 for c in heuristics)
    (row,) = [row for row in result.rows if row[0] == 2.0]
    rest = [
        cost
        for cls, cost in zip(classes, row[2:])
        if cls is not HeuristicClass.ONE and cost is not None
    ]
    assert row[1] <= 0.9 * min(rest)


ROBUSTNESS_INIT = StateVector(
    S=[0, 0, 0, 0.3, 0.3, 0.35], I=[0, 0, 0, 0.0125, 0.0125, 0.025]
)


@pytest.fixture(scope="module")
def robustness_setup():
    params = replace(five_level_params(p=0.75), horizon=5.0)
    policy = optimize_fixed_T(params, ROBUSTNESS_INIT, FAST_SEARCH).policy
    return params, policy, MCConfig(N=500, runs=200, seed=4)


@pytest.mark.slow
def test_clock_offsets_keep_delivery_near_the_target(robustness_setup):
    params, policy, mc = robustness_setup
    result = run_robustness(
        params, ROBUSTNESS_INIT, policy, mc, ErrorModel.THETA_STAR, [0.25, 0.5]
    )
    assert all(d >= 0.70 for d in result.column("delivery_mean"))


@pytest.mark.slow
def test_energy_misreads_barely_move_the_cost(robustness_setup):
    params, policy, mc = robustness_setup
    result = run_robustness(
        params, ROBUSTNESS_INIT, policy, mc, ErrorModel.P_STAR, [0.0, 0.05, 0.1]
    )
    exact, *noisy = result.column("cost_mean")
    assert all(c == pytest.approx(exact, rel=0.1) for c in noisy)


@pytest.mark.slow
def test_myopic_optimal_sends_more_messages_for_less():
    params = multi_params()
    cfg = replace(FAST_SEARCH, steps=400)
    mm = MultiMessageConfig(M=6, Upsilon=0.001, ttl=100, p=0.95)
    optimal = run_multi_message(params, MULTI_START, mm, cfg)
    for cls in HeuristicClass:
        if cls is HeuristicClass.ZERO:
            continue
        other = run_multi_message(
            params, MULTI_START, replace(mm, family=cls.value), cfg
        )
        assert optimal.metadata["messages"] >= other.metadata["messages"], cls
        for mine, theirs in zip(optimal.rows, other.rows):
            if mine[2] and theirs[2]:
                assert mine[1] <= theirs[1] + 1e-9, (cls, mine[0])
                if cls is HeuristicClass.ONE:
                    assert mine[1] < theirs[1]
