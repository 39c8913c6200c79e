import csv
import json
import os
from typing import Iterable, List

import numpy as np

from particle_filter import BeliefState

STEP_SCALARS_HEAD = ["t"]
STEP_SCALARS_MID = ["h_x_true", "h_b", "cvar_hat", "cvar_true", "e_hat", "e_bar"]
STEP_FLAGS = ["feasible", "collision", "jump_flag"]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return repr(float(value))


def step_header(n_x: int, m: int) -> List[str]:
    return (
        STEP_SCALARS_HEAD
        + [f"x_true_{i}" for i in range(n_x)]
        + STEP_SCALARS_MID
        + [f"u_ref_{i}" for i in range(m)]
        + [f"u_star_{i}" for i in range(m)]
        + STEP_FLAGS
    )


def write_steps_csv(path: str, records: Iterable) -> str:
    records = list(records)
    if not records:
        raise ValueError("no step records to write")
    n_x = records[0].x_true.size
    m = records[0].u_ref.size
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(step_header(n_x, m))
        for r in records:
            writer.writerow(
                [_fmt(r.t)]
                + [_fmt(v) for v in r.x_true]
                + [_fmt(getattr(r, name)) for name in STEP_SCALARS_MID]
                + [_fmt(v) for v in r.u_ref]
                + [_fmt(v) for v in r.u_star]
                + [_fmt(getattr(r, name)) for name in STEP_FLAGS]
            )
    return path


def write_belief_csv(path: str, belief: BeliefState, append: bool = False) -> str:
    """Columns t, i, x_0..x_{n-1}, w; one row per particle."""
    fresh = not append or not os.path.exists(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if fresh:
            writer.writerow(["t", "i"] + [f"x_{k}" for k in range(belief.state_dim)] + ["w"])
        for i in range(belief.N):
            writer.writerow(
                [_fmt(belief.t), str(i)]
                + [_fmt(v) for v in belief.particles[i]]
                + [_fmt(belief.weights[i])]
            )
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path: str, data) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True)
    return path


def load_json(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as f:
        return json.load(f)
