import csv
import dataclasses
import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Sequence, Union

import numpy as np

from .model import ModelParams, Trajectory

# Define the public API of this module
__all__ = [
    "format_number",
    "to_jsonable",
    "config_hash",
    "write_csv",
    "read_csv",
    "write_json",
    "trajectory_header",
    "write_trajectory_csv",
]

Cell = Optional[Union[float, int]]


def format_number(value: Cell) -> str:
    """17 significant digits, which read back as exactly the same float

    >>> format_number(0.1)
    '0.10000000000000001'
    >>> format_number(None)
    ''

    Raises:
        ValueError: If value is not finite
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if not math.isfinite(value):
        raise ValueError(f"Refusing to write non-finite value {value}")
    return f"{float(value):.17g}"


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums, tuples and numpy values for `json.dumps`"""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        payload = {"type": type(obj).__name__}
        for f in dataclasses.fields(obj):
            payload[f.name] = to_jsonable(getattr(obj, f.name))
        return payload
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"Refusing to write non-finite value {obj}")
    return obj


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON of a configuration"""
    text = json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Cell]]):
    """Write rows under a header, absent values as empty fields"""
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            assert len(row) == len(columns), f"Row {row} does not match {columns}"
            writer.writerow([format_number(v) for v in row])


def read_csv(path: Path) -> List[List[Optional[float]]]:
    """Read back the rows written by `write_csv`, empty fields as None"""
    with open(path, newline="") as stream:
        rows = list(csv.reader(stream))
    return [[float(v) if v else None for v in row] for row in rows[1:]]


def write_json(path: Path, payload: Any):
    with open(path, "w") as stream:
        json.dump(to_jsonable(payload), stream, indent=2, sort_keys=True)
        stream.write("\n")


def trajectory_header(params: ModelParams) -> List[str]:
    """Column names ``t, S0..SB, I0..IB, E, u_s..u_B``"""
    B = params.B
    return (
        ["t"]
        + [f"S{i}" for i in range(B + 1)]
        + [f"I{i}" for i in range(B + 1)]
        + ["E"]
        + [f"u_{i}" for i in params.levels]
    )


def write_trajectory_csv(path: Path, traj: Trajectory, params: ModelParams):
    """Write one row per grid point with the right-continuous control"""
    controls = np.concatenate([traj.controls, traj.controls[-1:]])
    table = np.column_stack([traj.times, traj.values, controls])
    if not np.all(np.isfinite(table)):
        raise ValueError("Refusing to write a trajectory with non-finite values")
    np.savetxt(
        path,
        table,
        fmt="%.17g",
        delimiter=",",
        header=",".join(trajectory_header(params)),
        comments="",
    )
