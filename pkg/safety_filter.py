"""
Belief-space safety filter.

The barrier condition on the particle belief is one linear inequality in the
input, a.u >= c, and the filter returns the input closest to the reference
(in the Q-norm) that satisfies it inside the input box. The mean-state,
most-likely-particle and Chebyshev-ball baselines reuse the same QP.
"""

from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple, Optional, Tuple

import numpy as np

from barrier import BeliefBarrierTerms, StateBarrier, belief_barrier
from log_utils import get_logger
from particle_filter import (
    BeliefState,
    NoObservationError,
    covariance,
    mean_state,
    most_likely_particle,
)
from risk_measures import RiskConfig
from sde_models import ObservationModel, ProcessModel, drift_input_diffusion

logger = get_logger("safety_filter")

# ==========================
# DEFAULTS
# ==========================
DEFAULT_GAMMA_CBF = 1.0
DEFAULT_ETA = 0.05
FEAS_TOL = 1e-9


class BarrierConstraint(NamedTuple):
    """a.u >= c; lf is the drift term already folded into c."""

    a: np.ndarray
    c: float
    lf: float


@dataclass
class QPProblem:
    """min (u - u_ref)' Q (u - u_ref)  s.t.  a.u >= c,  lower <= u <= upper"""

    Q: np.ndarray
    u_ref: np.ndarray
    a: np.ndarray
    c: float
    box: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.u_ref = np.atleast_1d(np.asarray(self.u_ref, dtype=float))
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.c = float(self.c)
        m = self.u_ref.size
        if self.Q.shape != (m, m) or self.a.shape != (m,):
            raise ValueError(f"QP dimensions disagree: Q {self.Q.shape}, a {self.a.shape}, m={m}")
        if not np.allclose(self.Q, self.Q.T):
            raise ValueError("Q must be symmetric")
        try:
            np.linalg.cholesky(self.Q)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Q must be positive definite") from exc
        if self.box is not None:
            lo = np.broadcast_to(np.asarray(self.box[0], dtype=float), (m,)).copy()
            hi = np.broadcast_to(np.asarray(self.box[1], dtype=float), (m,)).copy()
            if np.any(lo > hi):
                raise ValueError("input box has lower > upper")
            self.box = (lo, hi)

    @property
    def m(self) -> int:
        return self.u_ref.size

    def objective(self, u) -> float:
        d = np.asarray(u, dtype=float) - self.u_ref
        return float(d @ self.Q @ d)

    def clamp(self, u) -> np.ndarray:
        if self.box is None:
            return np.asarray(u, dtype=float).copy()
        return np.clip(u, self.box[0], self.box[1])


@dataclass
class SafetyFilterResult:
    u_star: np.ndarray
    feasible: bool
    active: bool
    slack_used: float = 0.0
    multiplier: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ChebyshevBall:
    """Ball around the mean holding the position with probability >= 1 - eta."""

    center: np.ndarray
    radius: float
    eta: float


# ============================================================
# QP
# ============================================================
def _best_effort(p: QPProblem) -> SafetyFilterResult:
    """Input in the box that pushes a.u as high as possible."""
    u = p.clamp(p.u_ref)
    if p.box is not None:
        lo, hi = p.box
        u = np.where(p.a > 0, hi, np.where(p.a < 0, lo, u))
    slack = max(0.0, p.c - float(p.a @ u))
    logger.debug("QP_INFEASIBLE | slack=%.4g", slack)
    return SafetyFilterResult(u, feasible=False, active=True, slack_used=slack)


def _closed_form(p: QPProblem) -> SafetyFilterResult:
    if float(p.a @ p.u_ref) >= p.c:
        return SafetyFilterResult(p.u_ref.copy(), feasible=True, active=False)
    if not np.any(p.a):
        return _best_effort(p)
    qa = np.linalg.solve(p.Q, p.a)
    scale = (p.c - float(p.a @ p.u_ref)) / float(p.a @ qa)
    # stationarity 2Q(u - u_ref) = nu * a
    return SafetyFilterResult(p.u_ref + scale * qa, feasible=True, active=True,
                              multiplier=2.0 * scale)


def _solve_equality(p: QPProblem, E: np.ndarray, d: np.ndarray):
    """Minimize the objective on {E u = d}; None when E is rank deficient."""
    m = p.m
    k = E.shape[0]
    if k and np.linalg.matrix_rank(E) < k:
        return None
    K = np.zeros((m + k, m + k))
    K[:m, :m] = 2.0 * p.Q
    K[:m, m:] = -E.T
    K[m:, :m] = E
    rhs = np.concatenate([2.0 * p.Q @ p.u_ref, d])
    sol = np.linalg.solve(K, rhs)
    return sol[:m], sol[m:]


def _box_active_set(p: QPProblem) -> SafetyFilterResult:
    """
    Exhaustive active-set enumeration: every box face pattern (free, at lower,
    at upper) combined with the linear constraint on or off. The best primal
    feasible candidate is the optimum of the convex problem.
    """
    lo, hi = p.box
    m = p.m
    eye = np.eye(m)
    best = None
    for pattern in product((0, -1, 1), repeat=m):
        fixed = [i for i, s in enumerate(pattern) if s != 0]
        bounds = [lo[i] if pattern[i] < 0 else hi[i] for i in fixed]
        for linear in (False, True):
            rows = [eye[i] for i in fixed]
            rhs = list(bounds)
            if linear:
                rows.append(p.a)
                rhs.append(p.c)
            E = np.array(rows).reshape(len(rows), m)
            solved = _solve_equality(p, E, np.array(rhs, dtype=float))
            if solved is None:
                continue
            u, nu = solved
            if np.any(u < lo - FEAS_TOL) or np.any(u > hi + FEAS_TOL):
                continue
            if float(p.a @ u) < p.c - FEAS_TOL:
                continue
            obj = p.objective(u)
            if best is None or obj < best[0] - 1e-15:
                best = (obj, np.clip(u, lo, hi), linear, float(nu[-1]) if linear else 0.0)
    if best is None:
        return _best_effort(p)
    _, u, linear, nu = best
    tight = linear or float(p.a @ u) - p.c <= FEAS_TOL
    return SafetyFilterResult(u, feasible=True, active=bool(tight), multiplier=max(nu, 0.0))


def solve_qp(p: QPProblem) -> SafetyFilterResult:
    if p.box is None:
        return _closed_form(p)
    u0 = p.clamp(p.u_ref)
    if float(p.a @ u0) >= p.c and np.array_equal(u0, p.u_ref):
        return SafetyFilterResult(u0, feasible=True, active=False)
    if not np.any(p.a):
        if p.c <= 0.0:
            return SafetyFilterResult(u0, feasible=True, active=False)
        return _best_effort(p)
    return _box_active_set(p)


# ============================================================
# CONSTRAINT ASSEMBLY
# ============================================================
def assemble_constraint(terms: BeliefBarrierTerms, belief: BeliefState,
                        model: ProcessModel, gamma_cbf: float = DEFAULT_GAMMA_CBF
                        ) -> BarrierConstraint:
    """
    dh_b/db (f_b + g_b u) + trace_term >= -gamma_cbf * h_b, rearranged as a.u >= c.
    """
    X = belief.particles
    f = model.drift(X)
    G = model.input_matrix(X)
    a = np.einsum("ni,nij->j", terms.grad_b, G)
    lf = float(np.einsum("ni,ni->", terms.grad_b, f))
    c = -gamma_cbf * terms.h_b - lf - terms.trace_term
    return BarrierConstraint(a, float(c), lf)


def _weights_matrix(Q, m):
    return np.eye(m) if Q is None else np.asarray(Q, dtype=float)


def _run_qp(a, c, u_ref, Q, box, diagnostics) -> SafetyFilterResult:
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    problem = QPProblem(_weights_matrix(Q, u_ref.size), u_ref, a, c, box)
    result = solve_qp(problem)
    result.diagnostics.update(diagnostics)
    return result


def filter_input(belief: BeliefState, barrier: StateBarrier, cfg: RiskConfig,
                 model: ProcessModel, u_ref, Q=None, box=None,
                 gamma_cbf: float = DEFAULT_GAMMA_CBF) -> SafetyFilterResult:
    """belief_barrier -> assemble_constraint -> solve_qp"""
    terms = belief_barrier(belief, barrier, cfg, model)
    row = assemble_constraint(terms, belief, model, gamma_cbf)
    return _run_qp(row.a, row.c, u_ref, Q, box, {
        "h_b": terms.h_b,
        "Lf": row.lf,
        "Lg": row.a.copy(),
        "trace_term": terms.trace_term,
        "gamma_cbf": gamma_cbf,
        "b_min": terms.b_min,
    })


# ============================================================
# BASELINES
# ============================================================
def _state_scbf(x, barrier: StateBarrier, model: ProcessModel, u_ref, Q, box,
                gamma_cbf: float, extra=None) -> SafetyFilterResult:
    """Stochastic CBF condition evaluated at a single state estimate."""
    f, G, S = drift_input_diffusion(model, x)
    h = barrier.value(x)
    grad = barrier.grad(x)
    trace = 0.5 * float(np.trace(S.T @ barrier.hess(x) @ S))
    a = grad @ G
    lf = float(grad @ f)
    c = -gamma_cbf * h - lf - trace
    diagnostics = {"h_b": h, "Lf": lf, "Lg": a.copy(), "trace_term": trace,
                   "gamma_cbf": gamma_cbf}
    diagnostics.update(extra or {})
    return _run_qp(a, c, u_ref, Q, box, diagnostics)


def baseline_mu_scbf(belief: BeliefState, barrier: StateBarrier, model: ProcessModel,
                     u_ref, Q=None, box=None,
                     gamma_cbf: float = DEFAULT_GAMMA_CBF) -> SafetyFilterResult:
    return _state_scbf(mean_state(belief), barrier, model, u_ref, Q, box, gamma_cbf)


def baseline_ml_scbf(belief: BeliefState, barrier: StateBarrier, model: ProcessModel,
                     observation: ObservationModel, u_ref, Q=None, box=None,
                     gamma_cbf: float = DEFAULT_GAMMA_CBF) -> SafetyFilterResult:
    try:
        x = most_likely_particle(belief, belief.last_z, observation)
        fallback = False
    except NoObservationError:
        logger.debug("ML_FALLBACK | t=%.3f no observation, using mean", belief.t)
        x = mean_state(belief)
        fallback = True
    return _state_scbf(x, barrier, model, u_ref, Q, box, gamma_cbf,
                       {"ml_fallback": fallback})


def chebyshev_ball(belief: BeliefState, eta: float = DEFAULT_ETA, dims=(0, 1)) -> ChebyshevBall:
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    dims = list(dims)
    cov = covariance(belief, dims)
    radius = float(np.sqrt(max(np.trace(cov), 0.0) / eta))
    return ChebyshevBall(mean_state(belief)[dims], radius, eta)


def baseline_be_scbf(belief: BeliefState, barrier: StateBarrier, model: ProcessModel,
                     u_ref, Q=None, box=None, gamma_cbf: float = DEFAULT_GAMMA_CBF,
                     eta: float = DEFAULT_ETA) -> SafetyFilterResult:
    """
    Mean-state SCBF on the stay-out circle grown by the Chebyshev radius
    sqrt(tr Sigma_pos / eta).
    """
    if not hasattr(barrier, "inflated"):
        raise TypeError(f"{type(barrier).__name__} has no circular radius to inflate")
    ball = chebyshev_ball(belief, eta)
    grown = barrier.inflated(ball.radius)
    x = mean_state(belief)
    infeasible_start = grown.value(x) < 0.0
    if infeasible_start:
        logger.debug("BE_INFEASIBLE_START | t=%.3f rho=%.3f", belief.t, ball.radius)
    return _state_scbf(x, grown, model, u_ref, Q, box, gamma_cbf,
                       {"rho": ball.radius, "infeasible_start": bool(infeasible_start)})
