"""
State barriers h_x (value, gradient, Hessian) and the belief barrier
h_b = CVaR lower bound of {h_x(x_i)} with its per-particle gradient and
diffusion trace term.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from itertools import product
from typing import List

import numpy as np

from log_utils import get_logger
from particle_filter import BeliefState
from risk_measures import (
    RiskConfig,
    WeightPreconditionError,
    cvar_lower_bound,
    cvar_lower_bound_coefficients,
)
from sde_models import ProcessModel

logger = get_logger("barrier")

DEFAULT_LOOKAHEAD_D = 0.2
WORKSPACE_GRID_POINTS = 41
FD_REL_FLOOR = 1e-3


def _batch(x, dim):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = X[None, :] if single else X
    if X.shape[1] != dim:
        raise ValueError(f"state has {X.shape[1]} entries, barrier expects {dim}")
    return X, single


# ============================================================
# STATE BARRIERS
# ============================================================
class StateBarrier(ABC):
    """Safe set C_x = {x | h(x) >= 0}."""

    state_dim: int

    @property
    @abstractmethod
    def infimum(self) -> float:
        """Exact lower bound of h over the whole state space."""

    @abstractmethod
    def _value(self, X): ...

    @abstractmethod
    def _grad(self, X): ...

    @abstractmethod
    def _hess(self, X): ...

    def value(self, x):
        X, single = _batch(x, self.state_dim)
        out = self._value(X)
        return float(out[0]) if single else out

    def grad(self, x):
        X, single = _batch(x, self.state_dim)
        out = self._grad(X)
        return out[0] if single else out

    def hess(self, x):
        X, single = _batch(x, self.state_dim)
        out = self._hess(X)
        return out[0] if single else out

    # alias matching the h(x) notation
    def h(self, x):
        return self.value(x)


class HalfspaceBarrier(StateBarrier):
    """h(x) = c - a.x"""

    def __init__(self, a, c: float):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.c = float(c)
        self.state_dim = self.a.size

    def _value(self, X):
        return self.c - X @ self.a

    def _grad(self, X):
        return np.broadcast_to(-self.a, X.shape).copy()

    @property
    def infimum(self) -> float:
        return float("-inf")

    def _hess(self, X):
        return np.zeros((X.shape[0], self.state_dim, self.state_dim))


class CircularStayOutBarrier(StateBarrier):
    """
    h(x) = ||p - O|| - r_o on the first two state entries.
    At the center the gradient and Hessian are returned as zero.
    """

    def __init__(self, center, radius: float, state_dim: int = 3):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.state_dim = int(state_dim)
        if self.center.shape != (2,) or self.radius < 0:
            raise ValueError("circular barrier needs a 2D center and radius >= 0")

    def inflated(self, rho: float) -> "CircularStayOutBarrier":
        return CircularStayOutBarrier(self.center, self.radius + rho, self.state_dim)

    @property
    def infimum(self) -> float:
        """h at the center."""
        return -self.radius

    def _offset(self, X):
        D = X[:, :2] - self.center[None, :]
        r = np.linalg.norm(D, axis=1)
        singular = r == 0.0
        if singular.any():
            logger.warning("BARRIER_SINGULAR | n=%d at center", int(singular.sum()))
        return D, r, singular

    def _value(self, X):
        return np.linalg.norm(X[:, :2] - self.center[None, :], axis=1) - self.radius

    def _grad(self, X):
        D, r, singular = self._offset(X)
        out = np.zeros_like(X)
        safe = np.where(singular, 1.0, r)
        out[:, :2] = np.where(singular[:, None], 0.0, D / safe[:, None])
        return out

    def _hess(self, X):
        D, r, singular = self._offset(X)
        safe = np.where(singular, 1.0, r)
        n = D / safe[:, None]
        P = (np.eye(2)[None] - n[:, :, None] * n[:, None, :]) / safe[:, None, None]
        P[singular] = 0.0
        out = np.zeros((X.shape[0], self.state_dim, self.state_dim))
        out[:, :2, :2] = P
        return out


class LookaheadUnicycleBarrier(StateBarrier):
    """
    Stay-out circle seen from a point d ahead of the unicycle:
    p_hat = p + d [cos phi, sin phi], h = ||p_hat - O|| - (r_o + d).
    """

    state_dim = 3

    def __init__(self, center, radius: float, d: float = DEFAULT_LOOKAHEAD_D):
        if d <= 0:
            raise ValueError("lookahead offset d must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.d = float(d)

    def inflated(self, rho: float) -> "LookaheadUnicycleBarrier":
        return LookaheadUnicycleBarrier(self.center, self.radius + rho, self.d)

    @property
    def infimum(self) -> float:
        """h with the look-ahead point on the center."""
        return -(self.radius + self.d)

    def lookahead_point(self, x):
        X, single = _batch(x, 3)
        phi = X[:, 2]
        P = X[:, :2] + self.d * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return P[0] if single else P

    def _parts(self, X):
        phi = X[:, 2]
        c, s = np.cos(phi), np.sin(phi)
        D = X[:, :2] + self.d * np.stack([c, s], axis=1) - self.center[None, :]
        r = np.linalg.norm(D, axis=1)
        safe = np.where(r == 0.0, 1.0, r)
        n = D / safe[:, None]
        t = self.d * np.stack([-s, c], axis=1)  # d p_hat / d phi
        return D, r, safe, n, t, c, s

    def _value(self, X):
        D, r, *_ = self._parts(X)
        return r - (self.radius + self.d)

    def _grad(self, X):
        _, _, _, n, t, _, _ = self._parts(X)
        out = np.empty_like(X)
        out[:, :2] = n
        out[:, 2] = np.einsum("ni,ni->n", n, t)
        return out

    def _hess(self, X):
        _, _, safe, n, t, c, s = self._parts(X)
        P = (np.eye(2)[None] - n[:, :, None] * n[:, None, :]) / safe[:, None, None]
        Pt = np.einsum("nij,nj->ni", P, t)
        curv = -self.d * np.stack([c, s], axis=1)  # d^2 p_hat / d phi^2
        out = np.empty((X.shape[0], 3, 3))
        out[:, :2, :2] = P
        out[:, :2, 2] = Pt
        out[:, 2, :2] = Pt
        out[:, 2, 2] = np.einsum("ni,ni->n", t, Pt) + np.einsum("ni,ni->n", n, curv)
        return out


def workspace_infimum(barrier: StateBarrier, lower, upper,
                      points: int = WORKSPACE_GRID_POINTS) -> float:
    """
    Grid-scan infimum of h over an axis-aligned box, lowered by the largest
    gradient norm on the grid times half a cell diagonal so the result stays
    below the true infimum.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != (barrier.state_dim,) or upper.shape != lower.shape:
        raise ValueError("workspace box must match the barrier state dimension")
    if np.any(upper < lower):
        raise ValueError("workspace box has lower > upper")
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(lower, upper)]
    grid = np.array(list(product(*axes)))
    h = barrier.value(grid)
    lip = float(np.max(np.linalg.norm(barrier.grad(grid), axis=1)))
    half_diag = 0.5 * float(np.linalg.norm((upper - lower) / max(points - 1, 1)))
    return float(np.min(h) - lip * half_diag)


# ============================================================
# BELIEF BARRIER
# ============================================================
@dataclass
class BeliefBarrierTerms:
    """
    h_b with its gradient with respect to every particle. grad_b[i] is
    gamma[i] * grad h_x(x_i); gamma already folds in any dependence of the
    support bound on the particles.
    """

    h_b: float
    grad_b: np.ndarray
    trace_term: float
    gamma: np.ndarray
    gamma_b: float
    b_min: float
    h_values: np.ndarray = field(repr=False)

    def grad_list(self) -> List[np.ndarray]:
        return list(self.grad_b)


def support_bound(h: np.ndarray, cfg: RiskConfig):
    """
    Support lower bound b for the barrier samples h together with db/dh_i and
    d^2b/dh_i^2 (diagonal only) for the particle-dependent policies.
    Only the fixed bound keeps the 1 - delta guarantee; see RiskConfig.
    """
    n = h.size
    zeros = np.zeros(n)
    if cfg.support == "fixed":
        return float(cfg.b_min), zeros, zeros

    j = int(np.argmin(h))
    onehot = zeros.copy()
    onehot[j] = 1.0
    floor = float(h[j]) - cfg.support_margin
    if cfg.support == "sample_min":
        return floor, onehot, zeros

    m = float(h.mean())
    s = float(h.std())
    k = cfg.support_sigmas
    candidate = m - k * s
    if s <= 0.0 or candidate >= h[j]:
        return floor, onehot, zeros
    dev = h - m
    db = (1.0 - k * dev / s) / n
    d2s = (1.0 - 1.0 / n) / (n * s) - dev ** 2 / (n ** 2 * s ** 3)
    return candidate - cfg.support_margin, db, -k * d2s


def belief_barrier_value(particles, barrier: StateBarrier, cfg: RiskConfig) -> float:
    h = barrier.value(np.atleast_2d(particles))
    b, _, _ = support_bound(h, cfg)
    return cvar_lower_bound(h, cfg, b_min=b)


def belief_barrier(belief: BeliefState, barrier: StateBarrier, cfg: RiskConfig,
                   model: ProcessModel) -> BeliefBarrierTerms:
    if not belief.uniform_weights:
        raise WeightPreconditionError(
            "belief barrier needs a uniformly weighted belief; resample first"
        )
    X = belief.particles
    h = barrier.value(X)
    b, db, d2b = support_bound(h, cfg)
    h_b = cvar_lower_bound(h, cfg, b_min=b)
    gamma_rank, gamma_b = cvar_lower_bound_coefficients(h, cfg, b_min=b)
    gamma = gamma_rank + gamma_b * db

    G = barrier.grad(X)
    H = barrier.hess(X)
    S = model.diffusion(X)
    # tr[sigma^T H sigma] and ||sigma^T grad h||^2 per particle
    curvature = np.einsum("nji,njk,nki->n", S, H, S)
    spread = np.sum(np.einsum("nji,nj->ni", S, G) ** 2, axis=1)
    trace_term = 0.5 * float(gamma @ curvature + gamma_b * (d2b @ spread))

    return BeliefBarrierTerms(
        h_b=h_b,
        grad_b=gamma[:, None] * G,
        trace_term=trace_term,
        gamma=gamma,
        gamma_b=gamma_b,
        b_min=b,
        h_values=h,
    )


def relative_error(analytic, numeric, floor: float = FD_REL_FLOOR) -> float:
    """
    Largest entrywise |analytic - numeric| / max(|analytic|, |numeric|). Entries
    smaller than floor times the largest entry are measured against that floor.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    size = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = np.maximum(size, floor * max(float(size.max()), 1e-12))
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradientCheck:
    max_rel_error: float
    ties: List[int]
    checked: int


def finite_difference_check(belief: BeliefState, barrier: StateBarrier,
                            cfg: RiskConfig, eps: float = 1e-6,
                            model: ProcessModel = None) -> GradientCheck:
    """
    Central differences of h_b against the analytic per-particle gradient.
    Particles whose h value lies within 10*eps of another are reported as
    ties and left out. The error is taken per gradient entry, see relative_error.
    """
    X = belief.particles
    h = barrier.value(X)
    order = np.argsort(h, kind="stable")
    close = np.flatnonzero(np.diff(h[order]) < 10.0 * eps)
    ties = sorted({int(order[i]) for i in close} | {int(order[i + 1]) for i in close})
    if ties:
        logger.info("FD_TIES | %d particles at a subgradient point", len(ties))

    if model is None:
        gamma_rank, gamma_b = cvar_lower_bound_coefficients(
            h, cfg, b_min=support_bound(h, cfg)[0]
        )
        analytic = (gamma_rank + gamma_b * support_bound(h, cfg)[1])[:, None] * barrier.grad(X)
    else:
        analytic = belief_barrier(belief, barrier, cfg, model).grad_b

    numeric = np.zeros_like(analytic)
    tied = set(ties)
    for i in range(X.shape[0]):
        if i in tied:
            continue
        for k in range(X.shape[1]):
            Xp = X.copy()
            Xm = X.copy()
            Xp[i, k] += eps
            Xm[i, k] -= eps
            numeric[i, k] = (
                belief_barrier_value(Xp, barrier, cfg)
                - belief_barrier_value(Xm, barrier, cfg)
            ) / (2.0 * eps)

    keep = np.array([i not in tied for i in range(X.shape[0])])
    if not keep.any():
        return GradientCheck(0.0, ties, 0)
    return GradientCheck(relative_error(analytic[keep], numeric[keep]), ties, int(keep.sum()))
