import csv

import numpy as np
import pytest

from particle_filter import BeliefState
from services.records_io import load_json, step_header, write_belief_csv, write_json, write_steps_csv
from sim_harness import StepRecord


def _record(t, collision=False):
    return StepRecord(
        t=t, x_true=np.array([0.1, 0.2, 0.3]), h_x_true=0.5, h_b=0.25, cvar_hat=0.4,
        cvar_true=float("nan"), e_hat=float("nan"), e_bar=float("nan"),
        u_ref=np.array([1.0, 0.0]), u_star=np.array([0.5, 0.1]),
        feasible=True, collision=collision, jump_flag=np.bool_(False),
    )


def test_step_header():
    assert step_header(3, 2) == [
        "t", "x_true_0", "x_true_1", "x_true_2", "h_x_true", "h_b", "cvar_hat", "cvar_true",
        "e_hat", "e_bar", "u_ref_0", "u_ref_1", "u_star_0", "u_star_1",
        "feasible", "collision", "jump_flag",
    ]


def test_steps_csv_values(tmp_path):
    path = write_steps_csv(str(tmp_path / "steps.csv"), [_record(0.0), _record(0.05, True)])
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert rows[1]["t"] == "0.05"
    assert rows[0]["cvar_true"] == "nan"
    assert (rows[0]["feasible"], rows[0]["collision"], rows[0]["jump_flag"]) == ("1", "0", "0")
    assert rows[1]["collision"] == "1"
    assert float(rows[0]["u_star_1"]) == 0.1


def test_empty_records_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_steps_csv(str(tmp_path / "steps.csv"), [])


def test_belief_csv_appends_without_repeating_header(tmp_path):
    path = str(tmp_path / "belief.csv")
    belief = BeliefState.uniform(np.zeros((4, 2)), t=0.5)
    write_belief_csv(path, belief, append=True)
    write_belief_csv(path, belief, append=True)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "t,i,x_0,x_1,w"
    assert len(lines) == 1 + 8
    assert lines[1] == "0.5,0,0.0,0.0,0.25"


def test_json_converts_numpy(tmp_path):
    path = write_json(str(tmp_path / "nested" / "s.json"),
                      {"a": np.float64(1.5), "b": np.arange(3), "c": np.bool_(True), 4: None})
    assert load_json(path) == {"a": 1.5, "b": [0, 1, 2], "c": True, "4": None}


def test_load_json_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_json(str(tmp_path / "none.json"))
