"""
Coverage check of the CVaR lower bound against the Normal closed form, and
latency benchmark of the full filter call.
"""

import time
from typing import List, Sequence

import numpy as np

from barrier import LookaheadUnicycleBarrier
from log_utils import get_logger
from particle_filter import BeliefState
from risk_measures import RiskConfig, cvar_lower_bound, gaussian_cvar
from safety_filter import filter_input
from sde_models import UnicycleModel

logger = get_logger("bound_checks")

COVERAGE_SLACK = 0.02
BENCH_NS = (100, 1000, 5000)
BENCH_REPEATS = 100
BENCH_BUDGET_S = 0.01


def validate_bound(trials: int = 2000, alpha: float = 0.2, delta: float = 0.05,
                   n: int = 100, seed: int = 0, b_min: float = -10.0) -> dict:
    """
    Fraction of Normal(0, 1) sample sets of size n whose CVaR lower bound lies
    above the true CVaR. Draws with a sample below b_min are redrawn.
    """
    cfg = RiskConfig(alpha=alpha, delta=delta, b_min=b_min)
    truth = gaussian_cvar(0.0, 1.0, alpha)
    rng = np.random.default_rng(seed)
    violations = 0
    redrawn = 0
    for _ in range(trials):
        y = rng.standard_normal(n)
        while y.min() < b_min:
            redrawn += 1
            y = rng.standard_normal(n)
        if cvar_lower_bound(y, cfg) > truth:
            violations += 1
    rate = violations / trials if trials else 0.0
    limit = delta + COVERAGE_SLACK
    logger.info("VALIDATE_BOUND | N=%d trials=%d rate=%.4f limit=%.4f", n, trials, rate, limit)
    return {
        "N": n,
        "alpha": alpha,
        "delta": delta,
        "trials": trials,
        "violations": violations,
        "redrawn": redrawn,
        "violation_rate": rate,
        "limit": limit,
        "passed": rate <= limit,
    }


def _bench_belief(n: int, rng: np.random.Generator) -> BeliefState:
    mean = np.array([0.7, 0.7, np.pi / 4])
    particles = mean + rng.normal(0.0, [0.3, 0.3, 0.1], size=(n, 3))
    return BeliefState.uniform(particles)


def bench(ns: Sequence[int] = BENCH_NS, repeats: int = BENCH_REPEATS,
          seed: int = 0) -> List[dict]:
    """Wall-clock time of filter_input on a unicycle belief, per particle count."""
    model = UnicycleModel()
    barrier = LookaheadUnicycleBarrier([1.8, 3.2], 0.5)
    cfg = RiskConfig(alpha=0.2, delta=0.05, b_min=barrier.infimum)
    box = (np.array([-1.0, -2.0]), np.array([1.0, 2.0]))
    u_ref = np.array([1.0, 0.0])
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        belief = _bench_belief(int(n), rng)
        filter_input(belief, barrier, cfg, model, u_ref, box=box)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            filter_input(belief, barrier, cfg, model, u_ref, box=box)
            times.append(time.perf_counter() - start)
        row = {
            "N": int(n),
            "mean_s": float(np.mean(times)),
            "std_s": float(np.std(times)),
            "within_budget": bool(np.mean(times) < BENCH_BUDGET_S),
        }
        logger.info("BENCH | N=%d mean=%.6fs std=%.6fs", n, row["mean_s"], row["std_s"])
        rows.append(row)
    return rows
