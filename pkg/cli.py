#!/usr/bin/env python3
"""
riskfilter command line.

    python cli.py simulate data/scenarios/example1_drone.yaml --seed 0 --out runs/ex1
    python cli.py table1 --out runs/table1
    python cli.py table2 --out runs/table2
    python cli.py validate-bound --trials 2000 --N 100
    python cli.py bench --N 100 --N 1000 --N 5000
    python cli.py schema

Exit codes: 0 success, 1 acceptance failure or aborted repetition,
2 usage or scenario error.
"""

import json
import logging
import os
import sys

import click

from log_utils import recent_events, setup_logging
from scenario_config import ScenarioConfigError, load_scenario, scenario_schema, with_controller
from services.records_io import write_belief_csv, write_json, write_steps_csv
from sim_harness import run_repetitions, run_scenario
from studies.bound_checks import BENCH_NS, BENCH_REPEATS, bench, validate_bound
from studies.table_studies import (
    TABLE1_HORIZON_S,
    TABLE1_NS,
    TABLE1_REPS,
    TABLE2_REPS,
    dropout_scenario,
    table1_study,
    table1_verdict,
    table2_study,
    table2_verdict,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EVENTS_FILE = "events.json"


def _finish(out_dir, code: int):
    if out_dir:
        write_json(os.path.join(out_dir, EVENTS_FILE), recent_events())
    sys.exit(code)


def _load(path):
    try:
        return load_scenario(path)
    except ScenarioConfigError as exc:
        click.echo(f"scenario error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Risk-aware particle-belief safety filter."""
    setup_logging(level=logging.DEBUG if verbose else logging.INFO)


@cli.command()
@click.argument("config")
@click.option("--seed", type=int, default=None, help="Seed of the first repetition.")
@click.option("--reps", type=int, default=None, help="Repetitions (default from config).")
@click.option("--out", "out_dir", default="runs", show_default=True)
@click.option("--variant", type=click.Choice(["ours", "mu_scbf", "ml_scbf", "be_scbf", "none"]),
              default=None)
@click.option("--workers", type=int, default=None)
@click.option("--snapshot-every", type=int, default=0,
              help="Write the belief every k control periods (single repetition).")
def simulate(config, seed, reps, out_dir, variant, workers, snapshot_every):
    """Run a scenario and write per-step CSV and JSON summaries."""
    s = _load(config)
    if variant is not None:
        s = with_controller(s, variant=variant)
    seed = s.seed if seed is None else seed
    reps = s.repetitions if reps is None else reps
    setup_logging(out_dir)

    if snapshot_every > 0:
        belief_path = os.path.join(out_dir, f"belief_seed{seed}.csv")
        if os.path.exists(belief_path):
            os.remove(belief_path)

        def snapshot(k, belief, _record):
            if k % snapshot_every == 0:
                write_belief_csv(belief_path, belief, append=True)

        runs = [run_scenario(s, seed, on_step=snapshot)]
        if reps > 1:
            runs += [(r.records, r.summary) for r in run_repetitions(s, reps - 1, seed + 1, workers)]
    else:
        runs = [(r.records, r.summary) for r in run_repetitions(s, reps, seed, workers)]

    summaries = []
    for records, summary in runs:
        if records:
            write_steps_csv(os.path.join(out_dir, f"steps_seed{summary['seed']}.csv"), records)
        write_json(os.path.join(out_dir, f"summary_seed{summary['seed']}.json"), summary)
        summaries.append(summary)
    write_json(os.path.join(out_dir, "run_summary.json"), summaries)

    aborted = [x["seed"] for x in summaries if x["aborted"]]
    click.echo(json.dumps({"runs": len(summaries), "aborted": aborted,
                           "collided": sum(x["collided"] for x in summaries)}))
    _finish(out_dir, EXIT_FAILED if aborted else EXIT_OK)


@cli.command()
@click.option("--out", "out_dir", default="runs/table1", show_default=True)
@click.option("--N", "ns", type=int, multiple=True, default=TABLE1_NS, show_default=True)
@click.option("--reps", type=int, default=TABLE1_REPS, show_default=True)
@click.option("--horizon", type=float, default=TABLE1_HORIZON_S, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--workers", type=int, default=None)
def table1(out_dir, ns, reps, horizon, seed, workers):
    """CVaR mismatch study on the 1D drone."""
    setup_logging(out_dir)
    stats = table1_study(ns, reps, horizon, seed, workers)
    verdict = table1_verdict(stats)
    write_json(os.path.join(out_dir, "table1.json"), {"stats": stats, "verdict": verdict})
    click.echo(json.dumps(verdict, indent=2))
    _finish(out_dir, EXIT_OK if verdict["passed"] else EXIT_FAILED)


@cli.command()
@click.option("--out", "out_dir", default="runs/table2", show_default=True)
@click.option("--reps", type=int, default=TABLE2_REPS, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--workers", type=int, default=None)
def table2(out_dir, reps, seed, workers):
    """Baseline comparison on the multimodal unicycle."""
    setup_logging(out_dir)
    stats = table2_study(reps, seed=seed, workers=workers)
    verdict = table2_verdict(stats)
    write_json(os.path.join(out_dir, "table2.json"), {"stats": stats, "verdict": verdict})
    click.echo(json.dumps(verdict, indent=2))
    _finish(out_dir, EXIT_OK if verdict["passed"] else EXIT_FAILED)


@cli.command()
@click.option("--out", "out_dir", default="runs/dropout", show_default=True)
@click.option("--config", default=None, help="Scenario file (default: bundled omni_dropout).")
@click.option("--t-fail", type=float, default=None)
@click.option("--variant", type=click.Choice(["ours", "mu_scbf", "ml_scbf", "be_scbf", "none"]),
              default=None)
@click.option("--seed", type=int, default=None)
def dropout(out_dir, config, t_fail, variant, seed):
    """Omnidirectional base with the position sensor failing at t_fail."""
    setup_logging(out_dir)
    s = _load(config) if config else None
    try:
        trace = dropout_scenario(s, t_fail, variant, seed)
    except ScenarioConfigError as exc:
        click.echo(f"scenario error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if trace.records:
        write_steps_csv(os.path.join(out_dir, "steps.csv"), trace.records)
    write_json(os.path.join(out_dir, "dropout.json"), trace.as_dict())
    click.echo(json.dumps(trace.summary))
    _finish(out_dir, EXIT_FAILED if trace.summary["aborted"] else EXIT_OK)


@cli.command("validate-bound")
@click.option("--trials", type=int, default=2000, show_default=True)
@click.option("--alpha", type=float, default=0.2, show_default=True)
@click.option("--delta", type=float, default=0.05, show_default=True)
@click.option("--N", "n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", default=None)
def validate_bound_cmd(trials, alpha, delta, n, seed, out_dir):
    """Empirical violation rate of the CVaR lower bound on Normal samples."""
    if not (0.0 < alpha <= 1.0 and 0.0 < delta <= 0.5 and n >= 1 and trials >= 1):
        click.echo("need 0 < alpha <= 1, 0 < delta <= 0.5, N >= 1, trials >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    report = validate_bound(trials, alpha, delta, n, seed)
    if out_dir:
        write_json(os.path.join(out_dir, "validate_bound.json"), report)
    click.echo(json.dumps(report, indent=2))
    _finish(out_dir, EXIT_OK if report["passed"] else EXIT_FAILED)


@cli.command("bench")
@click.option("--N", "ns", type=int, multiple=True, default=BENCH_NS, show_default=True)
@click.option("--repeats", type=int, default=BENCH_REPEATS, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", default=None)
def bench_cmd(ns, repeats, seed, out_dir):
    """Latency of the full filter call per particle count."""
    rows = bench(ns, repeats, seed)
    if out_dir:
        write_json(os.path.join(out_dir, "bench.json"), rows)
    click.echo(json.dumps(rows, indent=2))
    _finish(out_dir, EXIT_OK if all(r["within_budget"] for r in rows) else EXIT_FAILED)


@cli.command()
def schema():
    """Print the JSON schema of scenario documents."""
    click.echo(json.dumps(scenario_schema(), indent=2))


if __name__ == "__main__":
    cli()
