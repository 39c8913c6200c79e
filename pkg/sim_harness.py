"""
Closed-loop simulation: a ground-truth robot driven through its SDE, a particle
filter tracking it, a reference controller and one of the safety filter
variants in between. Every control period produces one StepRecord.
"""

import math
import os
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from barrier import HalfspaceBarrier, StateBarrier, belief_barrier_value
from log_utils import get_logger
from particle_filter import (
    BeliefState,
    DegenerateUpdateError,
    ParticleNoise,
    PropagationDivergedError,
    euler_maruyama,
    mean_state,
    measurement_update,
    propagate,
    sample_mixture,
)
from risk_measures import RiskConfig, SupportViolationError, empirical_cvar, gaussian_cvar
from safety_filter import (
    SafetyFilterResult,
    baseline_be_scbf,
    baseline_ml_scbf,
    baseline_mu_scbf,
    filter_input,
)
from scenario_config import (
    CERTIFIED_POLICIES,
    Scenario,
    build_barrier,
    build_model,
    build_observation,
    build_risk_config,
    input_box,
    weight_matrix,
)
from sde_models import Integrator1D, sample_observation

logger = get_logger("sim")

# ==========================
# CONFIGURATION
# ==========================
THREADS_ENV = "RISKFILTER_THREADS"
INVARIANCE_TOL_FACTOR = 10.0
HEADING_GAIN = 2.0


@dataclass
class StepRecord:
    t: float
    x_true: np.ndarray
    h_x_true: float
    h_b: float
    cvar_hat: float
    cvar_true: float
    e_hat: float
    e_bar: float
    u_ref: np.ndarray
    u_star: np.ndarray
    feasible: bool
    collision: bool
    jump_flag: bool
    t_c: float = 0.0


@dataclass
class RunResult:
    records: List[StepRecord]
    summary: dict = field(default_factory=dict)


# ============================================================
# KALMAN ORACLE (1D integrator, no measurements)
# ============================================================
class KFOracle:
    """mu' = u, var' = sigma_w^2; exact for dx = u dt + sigma_w dW."""

    def __init__(self, mu0: float, var0: float, sigma_w: float):
        self.mu = float(mu0)
        self.var = float(var0)
        self.sigma_w = float(sigma_w)

    def advance(self, u: float, dt: float):
        self.mu += float(u) * dt
        self.var += self.sigma_w ** 2 * dt

    def cvar(self, barrier: HalfspaceBarrier, alpha: float) -> float:
        """CVaR of h = c - a x under Normal(mu, var)."""
        a = float(barrier.a[0])
        return gaussian_cvar(barrier.c - a * self.mu, abs(a) * math.sqrt(self.var), alpha)


def kf_oracle_cvar(t: float, u_history: Sequence[float], control_dt: float, alpha: float,
                   mu0: float = 0.0, var0: float = 0.01, sigma_w: float = 0.1,
                   barrier: Optional[HalfspaceBarrier] = None) -> float:
    """
    CVaR of h_x = 2 - x at time t, given the inputs applied in each control
    period before t.
    """
    barrier = barrier or HalfspaceBarrier([1.0], 2.0)
    oracle = KFOracle(mu0, var0, sigma_w)
    steps = int(round(t / control_dt))
    if steps > len(u_history):
        raise ValueError(f"u_history covers {len(u_history)} periods, t needs {steps}")
    for u in u_history[:steps]:
        oracle.advance(u, control_dt)
    return oracle.cvar(barrier, alpha)


def _oracle_for(s: Scenario, model) -> Optional[KFOracle]:
    comps = s.initial_belief.components
    if (not isinstance(model, Integrator1D) or s.barrier.kind != "halfspace"
            or s.observation.kind != "none" or len(comps) != 1):
        return None
    return KFOracle(comps[0].mean[0], comps[0].cov[0][0], model.sigma * model.noise_scale)


# ============================================================
# REFERENCE CONTROLLERS
# ============================================================
def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def reference_input(s: Scenario, belief: BeliefState) -> np.ndarray:
    """Constant input or a proportional goal-seeker on the mean state."""
    ctrl = s.controller
    if ctrl.reference == "constant":
        u = np.asarray(ctrl.u_const, dtype=float)
    else:
        x = mean_state(belief)
        err = np.asarray(ctrl.goal, dtype=float) - x[:2]
        phi = x[2]
        if s.model.kind == "unicycle":
            heading = np.array([np.cos(phi), np.sin(phi)])
            turn = _wrap(math.atan2(err[1], err[0]) - phi) if np.any(err) else 0.0
            u = np.array([ctrl.gain * float(err @ heading), HEADING_GAIN * turn])
        else:
            c, sn = np.cos(phi), np.sin(phi)
            body = np.array([c * err[0] + sn * err[1], -sn * err[0] + c * err[1]])
            u = np.array([ctrl.gain * body[0], ctrl.gain * body[1], 0.0])
    box = input_box(s)
    return u if box is None else np.clip(u, box[0], box[1])


# ============================================================
# CLOSED LOOP
# ============================================================
class _Loop:
    """Objects built once per scenario and shared by every step."""

    def __init__(self, s: Scenario):
        self.s = s
        self.model = build_model(s)
        self.observation = build_observation(s)
        self.barrier = build_barrier(s)
        self.risk = build_risk_config(s, self.barrier)
        self.Q = weight_matrix(s)
        self.box = input_box(s)
        self.eps_int = INVARIANCE_TOL_FACTOR * s.pf.dt_sde

    def h_b(self, belief: BeliefState) -> float:
        return belief_barrier_value(belief.particles, self.barrier, self.risk)

    def apply(self, belief: BeliefState, u_ref) -> SafetyFilterResult:
        ctrl = self.s.controller
        if ctrl.variant == "ours":
            return filter_input(belief, self.barrier, self.risk, self.model, u_ref,
                                self.Q, self.box, ctrl.gamma_cbf)
        if ctrl.variant == "mu_scbf":
            return baseline_mu_scbf(belief, self.barrier, self.model, u_ref,
                                    self.Q, self.box, ctrl.gamma_cbf)
        if ctrl.variant == "ml_scbf":
            return baseline_ml_scbf(belief, self.barrier, self.model, self.observation,
                                    u_ref, self.Q, self.box, ctrl.gamma_cbf)
        if ctrl.variant == "be_scbf":
            return baseline_be_scbf(belief, self.barrier, self.model, u_ref,
                                    self.Q, self.box, ctrl.gamma_cbf, ctrl.eta)
        return SafetyFilterResult(np.asarray(u_ref, float).copy(), feasible=True, active=False)


def _initial_conditions(s: Scenario, rng: np.random.Generator):
    comps = s.initial_belief.components
    weights = [c.weight for c in comps]
    means = [c.mean for c in comps]
    covs = [c.cov for c in comps]
    if s.initial_state is not None:
        x_true = np.asarray(s.initial_state, dtype=float)
    else:
        x_true = sample_mixture(weights, means, covs, 1, rng)[0]
    particles = sample_mixture(weights, means, covs, s.pf.N, rng)
    return x_true, BeliefState.uniform(particles)


def _summarize(s: Scenario, seed: int, records: List[StepRecord], counters: dict,
               reason: Optional[str]) -> dict:
    clearance = np.array([r.h_x_true for r in records]) if records else np.zeros(0)
    h_b = np.array([r.h_b for r in records if np.isfinite(r.h_b)])
    t_c = np.array([r.t_c for r in records])
    summary = {
        "scenario": s.name,
        "variant": s.controller.variant,
        "seed": seed,
        "steps": len(records),
        "collision_steps": int(sum(r.collision for r in records)),
        "collided": bool(any(r.collision for r in records)),
        "clearance_mean": float(clearance.mean()) if clearance.size else float("nan"),
        "clearance_std": float(clearance.std()) if clearance.size else float("nan"),
        "safe_fraction": float(np.mean(clearance >= 0.0)) if clearance.size else float("nan"),
        "min_h_b": float(h_b.min()) if h_b.size else float("nan"),
        "t_c_mean": float(t_c.mean()) if t_c.size else float("nan"),
        "certified_support": s.risk.b_min_policy in CERTIFIED_POLICIES,
        "aborted": reason is not None,
        "reason": reason,
    }
    summary.update(counters)
    return summary


def run_scenario(s: Scenario, seed: Optional[int] = None,
                 on_step: Optional[Callable[[int, BeliefState, StepRecord], None]] = None
                 ) -> Tuple[List[StepRecord], dict]:
    """
    Simulate one repetition. Truth, filter, sensor, initial and particle-noise
    draws use independent streams spawned from the seed, so a rerun with the
    same seed reproduces every number. Particle noise comes in per-block
    substreams, so the first particles move the same way for any N.
    """
    seed = s.seed if seed is None else int(seed)
    loop = _Loop(s)
    *streams, ss_noise = np.random.SeedSequence(seed).spawn(5)
    rng_init, rng_truth, rng_pf, rng_obs = (np.random.default_rng(ss) for ss in streams)
    noise = ParticleNoise(ss_noise, s.pf.N)
    x_true, belief = _initial_conditions(s, rng_init)
    oracle = _oracle_for(s, loop.model)
    dt, dt_sde = s.control_dt, s.pf.dt_sde
    alpha = loop.risk.alpha
    ours = s.controller.variant == "ours"

    counters = {"invariance_violations": 0, "jumps": 0, "infeasible_steps": 0,
                "degenerate_updates": 0, "be_infeasible_starts": 0}
    records: List[StepRecord] = []
    excursion = False

    try:
        for k in range(s.steps + 1):
            t = k * dt
            jump = False
            measure = (
                loop.observation is not None and k > 0 and k % s.observation_every == 0
                and (s.observation_cutoff_s is None or t < s.observation_cutoff_s - 1e-12)
            )
            if measure:
                z = sample_observation(loop.observation, x_true, rng_obs)
                before = loop.h_b(belief) if ours else float("nan")
                try:
                    belief = measurement_update(belief, z, loop.observation, rng_pf,
                                                s.pf.ess_threshold)
                except DegenerateUpdateError as exc:
                    counters["degenerate_updates"] += 1
                    logger.warning("DEGENERATE_UPDATE | t=%.3f %s", t, exc)
                else:
                    if ours:
                        after = loop.h_b(belief)
                        if before >= 0.0 > after:
                            jump = True
                            excursion = True
                            counters["jumps"] += 1
                            logger.warning("UPDATE_JUMP | t=%.3f before=%.4g after=%.4g",
                                           t, before, after)

            u_ref = reference_input(s, belief)
            start = time.perf_counter()
            result = loop.apply(belief, u_ref)
            t_c = time.perf_counter() - start
            if not result.feasible:
                counters["infeasible_steps"] += 1
                logger.warning("QP_INFEASIBLE | t=%.3f slack=%.4g", t, result.slack_used)
            if result.diagnostics.get("infeasible_start"):
                counters["be_infeasible_starts"] += 1

            h_values = loop.barrier.value(belief.particles)
            if ours:
                h_b = float(result.diagnostics["h_b"])
            else:
                try:
                    h_b = loop.h_b(belief)
                except SupportViolationError:
                    h_b = float("nan")
            if ours and np.isfinite(h_b):
                if h_b >= 0.0:
                    excursion = False
                elif h_b < -loop.eps_int and not excursion:
                    counters["invariance_violations"] += 1
                    logger.warning("INVARIANCE_VIOLATION | t=%.3f h_b=%.4g", t, h_b)

            cvar_hat = empirical_cvar(h_values, alpha)
            cvar_true = oracle.cvar(loop.barrier, alpha) if oracle else float("nan")
            h_true = loop.barrier.value(x_true)
            record = StepRecord(
                t=t,
                x_true=x_true.copy(),
                h_x_true=h_true,
                h_b=h_b,
                cvar_hat=cvar_hat,
                cvar_true=cvar_true,
                e_hat=cvar_true - cvar_hat,
                e_bar=cvar_true - h_b,
                u_ref=np.asarray(u_ref, float),
                u_star=np.asarray(result.u_star, float),
                feasible=bool(result.feasible),
                collision=bool(h_true < 0.0),
                jump_flag=jump,
                t_c=t_c,
            )
            records.append(record)
            if on_step is not None:
                on_step(k, belief, record)
            if k == s.steps:
                break

            u = record.u_star
            x_true = euler_maruyama(x_true[None, :], u, dt, loop.model, rng_truth, dt_sde, t)[0]
            belief = propagate(belief, u, dt, loop.model, noise, dt_sde)
            if oracle is not None:
                oracle.advance(float(u[0]), dt)
    except (PropagationDivergedError, SupportViolationError) as exc:
        reason = f"{type(exc).__name__}: {exc}"
        logger.error("REP_ABORTED | seed=%d reason=%s", seed, reason)
        return records, _summarize(s, seed, records, counters, reason)

    return records, _summarize(s, seed, records, counters, None)


# ============================================================
# REPETITIONS
# ============================================================
def worker_count(reps: int, requested: Optional[int] = None) -> int:
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        requested = None
        if env:
            try:
                requested = int(env)
            except ValueError:
                logger.warning("BAD_THREADS_ENV | %s=%r, using cpu count", THREADS_ENV, env)
        if requested is None:
            requested = os.cpu_count() or 1
    return max(1, min(int(requested), reps))


def _run_one(args) -> RunResult:
    s, seed = args
    records, summary = run_scenario(s, seed)
    return RunResult(records, summary)


def run_repetitions(s: Scenario, reps: Optional[int] = None, seed: Optional[int] = None,
                    workers: Optional[int] = None) -> List[RunResult]:
    """Repetition i runs with seed + i; results come back in seed order."""
    reps = s.repetitions if reps is None else reps
    base = s.seed if seed is None else seed
    jobs = [(s, base + i) for i in range(reps)]
    n = worker_count(reps, workers)
    logger.info("REPS_START | scenario=%s reps=%d workers=%d", s.name, reps, n)
    if n == 1:
        results = [_run_one(job) for job in jobs]
    else:
        with Pool(n) as pool:
            results = pool.map(_run_one, jobs)
    aborted = sum(r.summary["aborted"] for r in results)
    logger.info("REPS_DONE | scenario=%s reps=%d aborted=%d", s.name, reps, aborted)
    return results
