import math

import numpy as np
import pytest

from dtnforward.model import integrate
from dtnforward.policy import Threshold
from dtnforward.utils import (
    config_hash,
    format_number,
    read_csv,
    to_jsonable,
    trajectory_header,
    write_csv,
    write_trajectory_csv,
)
from tests.conftest import SMALL_INIT, small_params


@pytest.mark.parametrize(
    "value, text",
    [(None, ""), (3, "3"), (True, "1"), (np.int64(7), "7"), (2.5, "2.5")],
)
def test_format_number(value, text):
    assert format_number(value) == text


def test_format_number_keeps_every_bit():
    value = 1 / 3
    assert float(format_number(value)) == value


def test_format_number_refuses_nan():
    with pytest.raises(ValueError):
        format_number(math.nan)


def test_csv_with_missing_cells(tmp_path):
    path = tmp_path / "rows.csv"
    write_csv(path, ["beta", "cost"], [[1.0, None], [2, 0.25]])
    assert path.read_text().splitlines() == ["beta,cost", "1,", "2,0.25"]
    assert read_csv(path) == [[1.0, None], [2.0, 0.25]]


def test_to_jsonable():
    payload = to_jsonable({1: (np.float64(0.5), np.arange(2)), "p": Threshold((1,))})
    assert payload == {
        "1": [0.5, [0, 1]],
        "p": {"type": "Threshold", "times": [1.0]},
    }
    with pytest.raises(ValueError):
        to_jsonable([math.inf])


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_trajectory_csv(tmp_path):
    params = small_params()
    assert trajectory_header(params) == (
        "t S0 S1 S2 I0 I1 I2 E u_1 u_2".split()
    )
    traj = integrate(Threshold((1.0, 2.0)), params, SMALL_INIT, steps=50)
    path = tmp_path / "trajectory.csv"
    write_trajectory_csv(path, traj, params)
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert table.shape == (len(traj.times), 10)
    assert table[:, 0] == pytest.approx(traj.times)
    # Controls are right-continuous, the last row repeats the final one
    assert list(table[0, -2:]) == [1, 1]
    assert list(table[-1, -2:]) == [0, 0]
