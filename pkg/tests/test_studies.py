import numpy as np
import pytest

from scenario_config import ScenarioConfigError, with_risk
from studies.bound_checks import bench, validate_bound
from studies.table_studies import (
    dropout_scenario,
    table1_study,
    table1_verdict,
    table2_study,
    table2_verdict,
)


# ============================================================
# BOUND COVERAGE
# ============================================================
def test_validate_bound_default_case():
    report = validate_bound(trials=2000, alpha=0.2, delta=0.05, n=100, seed=0)
    assert report["passed"]
    assert report["violation_rate"] <= 0.07
    assert report["limit"] == pytest.approx(0.07)


def test_validate_bound_loose_confidence():
    report = validate_bound(trials=2000, alpha=0.2, delta=0.5, n=100, seed=1)
    assert report["violation_rate"] <= 0.52


def test_validate_bound_single_sample():
    report = validate_bound(trials=500, alpha=0.2, delta=0.05, n=1, seed=2)
    assert report["violations"] == 0
    assert report["redrawn"] == 0


# ============================================================
# LATENCY
# ============================================================
def test_bench_rows():
    rows = bench(ns=(50, 200), repeats=3)
    assert [r["N"] for r in rows] == [50, 200]
    for r in rows:
        assert r["mean_s"] > 0.0
        assert r["std_s"] >= 0.0
        assert isinstance(r["within_budget"], bool)


@pytest.mark.slow
def test_bench_meets_budget_at_5000():
    (row,) = bench(ns=(5000,), repeats=100)
    assert row["within_budget"], row


# ============================================================
# VERDICTS
# ============================================================
def _table1_row(n, e_bar_mean, pr_e_bar_le0=0.0, pr_e_hat_lt0=0.95):
    return {"N": n, "aborted": 0, "e_bar_mean": e_bar_mean,
            "pr_e_bar_le0": pr_e_bar_le0, "pr_e_hat_lt0": pr_e_hat_lt0}


def test_table1_verdict_passes_on_tightening_sound_bound():
    stats = {"100": _table1_row(100, 0.18), "1000": _table1_row(1000, 0.06),
             "5000": _table1_row(5000, 0.03)}
    verdict = table1_verdict(stats)
    assert verdict["passed"]
    assert set(verdict["criteria"]) == {"bound_soundness", "empirical_unsoundness", "tightness_trend"}


def test_table1_verdict_flags_each_failure():
    overshoot = {"100": _table1_row(100, 0.18, pr_e_bar_le0=0.05)}
    assert not table1_verdict(overshoot)["criteria"]["bound_soundness"]["passed"]

    sound_estimator = {"100": _table1_row(100, 0.18, pr_e_hat_lt0=0.5)}
    assert not table1_verdict(sound_estimator)["criteria"]["empirical_unsoundness"]["passed"]

    loosening = {"100": _table1_row(100, 0.18), "1000": _table1_row(1000, 0.2)}
    assert not table1_verdict(loosening)["criteria"]["tightness_trend"]["passed"]

    too_loose = {"100": _table1_row(100, 0.5)}
    assert not table1_verdict(too_loose)["criteria"]["tightness_trend"]["passed"]


def _table2_row(collisions, clearance, safe_runs=100, reps=100):
    return {"reps": reps, "collisions": collisions, "clearance_mean": clearance,
            "runs_safe_at_var_level": safe_runs}


def test_table2_verdict():
    stats = {
        "ours_alpha_0.2": _table2_row(3, 0.4),
        "ours_alpha_0.05": _table2_row(0, 0.6),
        "mu_scbf": _table2_row(30, 0.2),
        "ml_scbf": _table2_row(25, 0.25),
        "be_scbf": _table2_row(1, 0.9),
    }
    assert table2_verdict(stats)["passed"]

    stats["mu_scbf"] = _table2_row(5, 0.2)
    verdict = table2_verdict(stats)
    assert not verdict["passed"]
    assert not verdict["criteria"]["baseline_ordering"]["passed"]
    assert verdict["criteria"]["var_implication"]["passed"]


def test_table2_verdict_needs_rows():
    assert not table2_verdict({})["passed"]


# ============================================================
# STUDIES (small runs)
# ============================================================
@pytest.mark.slow
def test_table1_small(drone_scenario):
    stats = table1_study(ns=(50, 200), reps=4, horizon_s=0.5, seed=0, workers=1,
                         scenario=drone_scenario)
    assert set(stats) == {"50", "200"}
    for row in stats.values():
        assert row["steps"] == 4 * 51
        assert row["aborted"] == 0
        assert row["pr_e_bar_le0"] <= 0.05
        assert np.isfinite(row["t_c_mean"])


@pytest.mark.slow
def test_table2_small(unicycle_scenario):
    variants = (("ours", "ours", 0.2), ("mu_scbf", "mu_scbf", None))
    stats = table2_study(reps=2, variants=variants, seed=0, workers=1,
                         scenario=unicycle_scenario)
    assert set(stats) == {"ours", "mu_scbf"}
    assert stats["ours"]["alpha"] == 0.2
    assert stats["mu_scbf"]["alpha"] == unicycle_scenario.risk.alpha
    for row in stats.values():
        assert 0 <= row["collisions"] <= 2
        assert row["aborted"] == 0


def test_dropout_spread_grows_without_measurements(omni_scenario):
    trace = dropout_scenario(omni_scenario, t_fail=0.0, seed=0)
    assert len(trace.position_spread) == omni_scenario.steps + 1
    assert trace.position_spread[-1] > trace.position_spread[0]
    assert not trace.summary["aborted"]
    assert set(trace.as_dict()) == {"summary", "t", "position_spread", "inside_fraction",
                                    "mean_clearance"}


def test_dropout_measurements_keep_spread_small(omni_scenario):
    blind = dropout_scenario(omni_scenario, t_fail=0.0, seed=0)
    seeing = dropout_scenario(omni_scenario, t_fail=100.0, seed=0)
    assert seeing.position_spread[-1] < blind.position_spread[-1]


def test_dropout_filter_keeps_particles_out_of_the_obstacle(omni_scenario):
    s = omni_scenario.model_copy(update={"horizon_s": 10.0})
    trace = dropout_scenario(s, variant="ours", seed=0)
    assert not trace.summary["aborted"]
    assert not trace.summary["collided"]
    assert max(trace.inside_fraction) <= s.risk.alpha


def test_dropout_without_filter_drives_into_the_obstacle(omni_scenario):
    s = omni_scenario.model_copy(update={"horizon_s": 10.0})
    trace = dropout_scenario(s, variant="none", seed=0)
    assert trace.summary["collided"]
    assert max(trace.inside_fraction) > 0.5


def test_dropout_refuses_an_uncertified_support(omni_scenario):
    s = with_risk(omni_scenario, b_min_policy="spread")
    with pytest.raises(ScenarioConfigError) as info:
        dropout_scenario(s, seed=0)
    assert info.value.field_path == "risk.b_min_policy"


@pytest.mark.slow
def test_table2_full_study_passes():
    verdict = table2_verdict(table2_study(reps=100, workers=None))
    assert verdict["passed"], verdict
