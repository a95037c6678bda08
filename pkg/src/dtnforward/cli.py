import functools
import logging
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Optional

import click
import numpy as np
from click.exceptions import ClickException

from dtnforward.config import ConfigError, RunConfig, load_config
from dtnforward.experiments import (
    ErrorModel,
    ExperimentResult,
    run_heuristic_sweep,
    run_multi_message,
    run_robustness,
    run_validation,
)
from dtnforward.mcsim import run_ensemble
from dtnforward.metrics import (
    InfeasibleHorizonError,
    delivery_probability,
    energy_cost,
    throughput_ok,
)
from dtnforward.model import ParameterError, integrate
from dtnforward.optimize import (
    InfeasibleError,
    OptimizationReport,
    optimize_fixed_T,
    optimize_heuristic,
    optimize_stopping,
)
from dtnforward.pmp import VerificationError, verify_pmp
from dtnforward.policy import ForwardingPolicy, HeuristicClass, policy_to_dict
from dtnforward.utils import (
    to_jsonable,
    write_csv,
    write_json,
    write_trajectory_csv,
)

EXPERIMENTS = ["validation", "heuristic-sweep", "robustness", "multi-message"]


class ConfigProblem(ClickException):
    """Raised if the configuration is invalid, exits with code 2"""

    exit_code = 2


class InfeasibleProblem(ClickException):
    """Raised if no policy meets the mandated delivery probability, exits with
    code 3"""

    exit_code = 3


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except (ConfigError, ParameterError, VerificationError) as e:
        raise ConfigProblem(str(e)) from e
    except (InfeasibleError, InfeasibleHorizonError) as e:
        raise InfeasibleProblem(str(e)) from e


def _with_config(f: Callable) -> Callable:
    # Shared --config/--out/--seed/--threads handling, passes a RunConfig
    @click.option(
        "--config",
        "config_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="JSON configuration document",
    )
    @click.option(
        "--out",
        default=".",
        show_default=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Directory to write results to",
    )
    @click.option("--seed", type=int, default=None, help="Override the root seed")
    @click.option("--threads", type=int, default=None, help="Worker threads")
    @functools.wraps(f)
    def wrapper(
        config_path: Path,
        out: Path,
        seed: Optional[int],
        threads: Optional[int],
        **kwargs,
    ):
        with _exit_codes():
            cfg = load_config(config_path).with_overrides(seed=seed, threads=threads)
            out.mkdir(parents=True, exist_ok=True)
            f(cfg, out, **kwargs)

    return wrapper


def _write_summary(out: Path, payload: Dict[str, Any]):
    write_json(out / "summary.json", payload)
    logging.info(f"Wrote {out / 'summary.json'}")


def _require_policy(cfg: RunConfig) -> ForwardingPolicy:
    if cfg.policy is None:
        raise ConfigError("This command needs a policy section in the config")
    return cfg.policy


def _report_summary(report: OptimizationReport) -> Dict[str, Any]:
    return dict(
        family=report.family,
        policy=policy_to_dict(report.policy),
        objective=report.objective,
        feasible=report.feasible,
        delivery=report.delivery,
        unbiased_cost=report.unbiased_cost,
        evaluations=report.evaluations,
        steps=report.steps,
        horizon=report.horizon,
        stopping_time=report.stopping_time,
    )


def _write_report(
    cfg: RunConfig, out: Path, report: OptimizationReport, verify: bool, **kwargs
):
    params = replace(cfg.model, horizon=report.horizon)
    if report.end_time > 0:
        traj = report.trajectory(cfg.model, cfg.init)
        write_trajectory_csv(out / "trajectory.csv", traj, params)
    summary = _report_summary(report)
    if verify and report.end_time > 0:
        summary["verification"] = to_jsonable(
            verify_pmp(
                report.policy,
                params,
                cfg.init,
                steps=report.steps,
                end_time=report.end_time,
                **kwargs,
            )
        )
    _write_summary(out, summary)


@click.group(invoke_without_command=True)
@click.option(
    "--log-level",
    default="INFO",
    type=click.Choice(
        ["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"], case_sensitive=False
    ),
)
@click.version_option()
@click.pass_context
def cli(ctx, log_level: str):
    """Energy-aware epidemic forwarding command line interface."""

    level = getattr(logging, log_level.upper(), None)
    logging.basicConfig(format="%(levelname)s:%(message)s", level=level)

    # if no command is supplied, print the help message
    if ctx.invoked_subcommand is None:
        click.echo(cli.get_help(ctx))


@cli.command()
@_with_config
def simulate(cfg: RunConfig, out: Path):
    """Integrate the mean-field model under the configured policy"""
    policy = _require_policy(cfg)
    traj = integrate(policy, cfg.model, cfg.init)
    write_trajectory_csv(out / "trajectory.csv", traj, cfg.model)
    _write_summary(
        out,
        dict(
            policy=policy_to_dict(policy),
            delivery=delivery_probability(traj, cfg.model),
            feasible=throughput_ok(traj, cfg.model),
            initial_cost=energy_cost(traj.initial, cfg.model),
            final_cost=energy_cost(traj.final, cfg.model),
            unbiased_cost=energy_cost(traj.final, cfg.model)
            - energy_cost(traj.initial, cfg.model),
            end_time=traj.end_time,
        ),
    )


@cli.command()
@click.option("--verify", is_flag=True, help="Attach a PMP verification report")
@_with_config
def optimize(cfg: RunConfig, out: Path, verify: bool):
    """Find the best threshold policy for the fixed terminal time"""
    report = optimize_fixed_T(cfg.model, cfg.init, cfg.search)
    _write_report(cfg, out, report, verify)


@cli.command("optimize-stopping")
@click.option("--verify", is_flag=True, help="Attach a PMP verification report")
@_with_config
def optimize_stopping_command(cfg: RunConfig, out: Path, verify: bool):
    """Find the best threshold policy and stopping time"""
    report = optimize_stopping(cfg.model, cfg.init, cfg.stopping, cfg.search)
    _write_report(cfg, out, report, verify, fpen=cfg.stopping)


@cli.command()
@click.argument(
    "heuristic_class", type=click.Choice([c.value for c in HeuristicClass])
)
@_with_config
def heuristic(cfg: RunConfig, out: Path, heuristic_class: str):
    """Find the best member of HEURISTIC_CLASS"""
    report = optimize_heuristic(
        HeuristicClass(heuristic_class), cfg.model, cfg.init, cfg.search
    )
    _write_report(cfg, out, report, verify=False)
    if not report.feasible:
        raise InfeasibleError(
            f"{heuristic_class} reaches delivery {report.delivery:.6g} < "
            f"{cfg.model.p}",
            report.delivery,
        )


@cli.command()
@_with_config
def verify(cfg: RunConfig, out: Path):
    """Check the configured threshold policy against the PMP conditions"""
    report = verify_pmp(_require_policy(cfg), cfg.model, cfg.init)
    _write_summary(out, to_jsonable(report))
    if not report.passed:
        click.echo(f"Verification status: {report.status}")


@cli.command()
@_with_config
def montecarlo(cfg: RunConfig, out: Path):
    """Simulate the configured policy over a Monte Carlo ensemble"""
    stats = run_ensemble(_require_policy(cfg), cfg.model, cfg.init, cfg.montecarlo)
    B = cfg.model.B
    columns = (
        ["t"]
        + [f"S{i}" for i in range(B + 1)]
        + [f"I{i}" for i in range(B + 1)]
    )
    rows = np.column_stack([stats.times, stats.curve_mean]).tolist()
    write_csv(out / "curves.csv", columns, rows)
    summary = to_jsonable(stats)
    for name in ("times", "curve_mean", "curve_std"):
        summary.pop(name)
    _write_summary(out, summary)


def _write_result(out: Path, result: ExperimentResult, suffix: str = ""):
    path = out / f"{result.name}{suffix}.csv"
    write_csv(path, result.columns, result.rows)
    logging.info(f"Wrote {path}")


@cli.command()
@click.argument("name", type=click.Choice(EXPERIMENTS))
@_with_config
def experiment(cfg: RunConfig, out: Path, name: str):
    """Run the scripted experiment NAME"""
    values = cfg.experiment.values
    if name != "multi-message" and not values:
        raise ConfigError(f"Experiment {name} needs experiment.values")
    results = []
    if name == "validation":
        results.append(
            run_validation(cfg.model, cfg.init, cfg.search, cfg.montecarlo, values)
        )
    elif name == "heuristic-sweep":
        classes = [HeuristicClass(c) for c in cfg.experiment.classes]
        results.append(
            run_heuristic_sweep(cfg.model, cfg.init, cfg.search, values, classes)
        )
    elif name == "robustness":
        policy = cfg.policy
        if policy is None:
            policy = optimize_fixed_T(cfg.model, cfg.init, cfg.search).policy
        variable = ErrorModel(cfg.experiment.variable)
        results.append(
            run_robustness(
                cfg.model, cfg.init, policy, cfg.montecarlo, variable, values
            )
        )
    else:
        start = cfg.init.mass()
        for family in cfg.experiment.families:
            mm = replace(cfg.multi_message, family=family)
            result = run_multi_message(cfg.model, start, mm, cfg.search)
            _write_result(out, result, f"-{family}")
            results.append(result)
    if name != "multi-message":
        _write_result(out, results[0])
    _write_summary(
        out,
        dict(
            experiment=name,
            seed=cfg.seed,
            results=[
                dict(name=r.name, rows=len(r.rows), **r.metadata) for r in results
            ],
        ),
    )
