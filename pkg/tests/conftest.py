import json
from pathlib import Path
from typing import Any, Dict

import pytest

from dtnforward.model import ModelParams, StateVector, power_penalties
from dtnforward.optimize import SearchConfig

# Search settings small enough for the test suite
FAST_SEARCH = SearchConfig(
    resolution=11,
    max_grid_points=2000,
    multistart=2,
    max_evaluations=3000,
    steps=200,
    stopping_grid=3,
    stopping_refine=3,
)


def five_level_params(p: float = 0.9) -> ModelParams:
    return ModelParams(
        B=5,
        s=2,
        r=1,
        beta=2.0,
        beta0=2.0,
        horizon=10.0,
        penalties=power_penalties(5, 2.0),
        p=p,
    )


FIVE_LEVEL_INIT = StateVector(S=[0, 0, 0, 0.55, 0.3, 0.1], I=[0, 0, 0, 0, 0, 0.05])


def even_split_params(alpha: float) -> ModelParams:
    return ModelParams(
        B=5,
        s=2,
        r=1,
        beta=2.0,
        beta0=2.0,
        horizon=10.0,
        penalties=power_penalties(5, alpha),
        p=0.9,
    )


EVEN_SPLIT_INIT = StateVector(S=[0, 0, 0, 0.3, 0.3, 0.3], I=[0, 0, 0, 0, 0, 0.1])


def small_params(p: float = 0.7, horizon: float = 5.0) -> ModelParams:
    # B=2 with s=1 keeps the threshold search two dimensional, and a level 2
    # sender is still capable after forwarding
    return ModelParams(
        B=2,
        s=1,
        r=1,
        beta=2.0,
        beta0=2.0,
        horizon=horizon,
        penalties=power_penalties(2, 2.0),
        p=p,
    )


SMALL_INIT = StateVector(S=[0, 0, 0.9], I=[0, 0, 0.1])


SMALL_CONFIG: Dict[str, Any] = {
    "schema_version": 1,
    "seed": 3,
    "model": {
        "B": 2,
        "s": 1,
        "r": 1,
        "beta": 2.0,
        "beta0": 2.0,
        "horizon": 5.0,
        "p": 0.7,
        "penalties": {"form": "power", "alpha": 2},
    },
    "init": {"S": [0, 0, 0.9], "I": [0, 0, 0.1]},
    "search": {
        "resolution": 11,
        "max_grid_points": 2000,
        "multistart": 2,
        "max_evaluations": 3000,
        "steps": 200,
        "stopping_grid": 3,
        "stopping_refine": 3,
    },
    "montecarlo": {"N": 40, "runs": 4, "report_points": 11},
}


@pytest.fixture
def small():
    return small_params(), SMALL_INIT


@pytest.fixture
def write_config(tmp_path: Path):
    def write(**sections) -> Path:
        doc = json.loads(json.dumps(SMALL_CONFIG))
        for key, value in sections.items():
            if value is None:
                doc.pop(key, None)
            else:
                doc[key] = value
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return path

    return write
