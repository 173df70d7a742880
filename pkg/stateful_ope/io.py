# Copyright (c) 2024 stateful-ope contributors
# This file is part of stateful-ope.
#
#     stateful-ope is free software: you can redistribute it and/or modify
#     it under the terms of the GNU General Public License as published by
#     the Free Software Foundation, either version 3 of the License, or
#     (at your option) any later version.
#
#     stateful-ope is distributed in the hope that it will be useful,
#     but WITHOUT ANY WARRANTY; without even the implied warranty of
#     MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#     GNU General Public License for more details.
#
#     You should have received a copy of the GNU General Public License
#     along with stateful-ope.  If not, see <https:#www.gnu.org/licenses/>.
#
"""Reading and writing trajectories, result tables and JSON documents."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from stateful_ope.env import TrajectoryBatch

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


def trajectory_columns(dim: int) -> list[str]:
    """Header of a trajectory CSV with ``dim`` context columns."""
    return ["traj_id", "t", "s", *[f"x_{j}" for j in range(dim)], "a", "y", "r"]


def trajectories_to_frame(data: TrajectoryBatch) -> pd.DataFrame:
    """One row per (trajectory, timestep), ordered by trajectory then time."""
    n, T, d = data.n, data.horizon, data.dim
    frame = pd.DataFrame(
        {
            "traj_id": np.repeat(np.arange(n), T),
            "t": np.tile(np.arange(T), n),
            "s": data.s.ravel(),
            **{f"x_{j}": data.x[:, :, j].ravel() for j in range(d)},
            "a": data.a.ravel(),
            "y": data.y.ravel(),
            "r": data.r.ravel(),
        }
    )
    return frame[trajectory_columns(d)]


def write_trajectories(data: TrajectoryBatch, path: PathLike) -> Path:
    """Write trajectories as CSV, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectories_to_frame(data).to_csv(path, index=False, float_format="%.17g")
    log.debug(f"Wrote {data.n} trajectories to {path}")
    return path


def read_trajectories(path: PathLike) -> TrajectoryBatch:
    """Read a trajectory CSV written by ``write_trajectories``."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IOError(f"Could not read trajectories from {path}") from e

    dim = sum(1 for col in frame.columns if col.startswith("x_"))
    expected = trajectory_columns(dim)
    if list(frame.columns) != expected:
        msg = (
            f"Unexpected trajectory columns {list(frame.columns)}, "
            f"expected {expected}"
        )
        log.error(msg)
        raise ValueError(msg)

    frame = frame.sort_values(["traj_id", "t"], kind="stable")
    n, T = frame["traj_id"].nunique(), frame["t"].nunique()
    if len(frame) != n * T:
        msg = f"Trajectories have unequal lengths ({len(frame)} rows for {n} x {T})"
        log.error(msg)
        raise ValueError(msg)

    def grid(column: str, dtype) -> np.ndarray:
        return frame[column].to_numpy(dtype=dtype).reshape(n, T)

    x = np.stack([grid(f"x_{j}", float) for j in range(dim)], axis=-1)
    return TrajectoryBatch(
        s=grid("s", np.int64),
        x=x,
        a=grid("a", np.int64),
        y=grid("y", np.int64),
        r=grid("r", float),
    )


def write_results(
    rows: Union[pd.DataFrame, list], path: PathLike, columns=None
) -> Path:
    """Write result rows as CSV with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(rows, pd.DataFrame):
        frame = rows
    else:
        frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False)
    log.info(f"Wrote {len(frame)} rows to {path}")
    return path


def _default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(document: dict, path: PathLike) -> Path:
    """Write a JSON document with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as jsonfile:
        json.dump(document, jsonfile, indent=2, sort_keys=True, default=_default)
    log.debug(f"Wrote {path}")
    return path


def load_json(path: PathLike) -> dict:
    """Load a JSON document, chaining parse errors as IOError."""
    with open(path, "r") as jsonfile:
        try:
            return json.load(jsonfile)
        except json.decoder.JSONDecodeError as e:
            raise IOError(f"File exists, but content is invalid JSON: {path}") from e


def config_hash(document: dict) -> str:
    """SHA-256 of the canonical JSON form of ``document``."""
    canonical = json.dumps(document, sort_keys=True, default=_default)
    return hashlib.sha256(canonical.encode()).hexdigest()
