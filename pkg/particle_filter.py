"""
Continuous-discrete particle filter.

Between measurements every particle is pushed through the controlled SDE
with Euler-Maruyama; at measurement times particles are weighted by the
observation likelihood and systematically resampled back to uniform
weights.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from log_utils import get_logger
from sde_models import ObservationModel, ProcessModel

logger = get_logger("particle_filter")

DEFAULT_DT_SDE = 0.01
WEIGHT_TOL = 1e-9
NOISE_BLOCK = 64


class PropagationDivergedError(RuntimeError):
    def __init__(self, index: int, t: float):
        super().__init__(f"particle {index} became non-finite at t={t:.4f}")
        self.index = index
        self.t = t


class DegenerateUpdateError(RuntimeError):
    """All particle likelihoods are zero (or their sum is not finite)."""


class NoObservationError(LookupError):
    """Raised when the most likely particle is requested before any measurement."""


class PFConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    N: int = Field(1000, ge=1)
    dt_sde: float = Field(DEFAULT_DT_SDE, gt=0)
    resample_scheme: Literal["systematic"] = "systematic"
    ess_threshold: float = Field(0.5, ge=0.0, le=1.0)


@dataclass(frozen=True, eq=False)
class BeliefState:
    """
    N weighted particles at time t. Row i of `particles` is particle i;
    the row order is the particle identity used for gradient bookkeeping.
    """

    particles: np.ndarray
    weights: np.ndarray
    t: float = 0.0
    last_z: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.particles, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if X.shape[0] < 1:
            raise ValueError("belief needs at least one particle")
        if w.shape != (X.shape[0],):
            raise ValueError(
                f"weights shape {w.shape} does not match {X.shape[0]} particles"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "particles", X)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, particles, t: float = 0.0):
        X = np.atleast_2d(np.asarray(particles, dtype=float))
        n = X.shape[0]
        return cls(X, np.full(n, 1.0 / n), t)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def state_dim(self) -> int:
        return self.particles.shape[1]

    @property
    def uniform_weights(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.N) <= WEIGHT_TOL))


# ============================================================
# PROPAGATION
# ============================================================
def _substeps(dt: float, dt_sde: float):
    n = max(1, math.ceil(dt / dt_sde - 1e-9))
    steps = [dt_sde] * (n - 1)
    steps.append(dt - dt_sde * (n - 1))
    return steps


class ParticleNoise:
    """
    Per-particle Gaussian noise that does not depend on N. Particle i reads
    from block i // block, and each block owns a generator spawned from
    seed_seq. Every block draws its full (block, q) array on each call, so
    the first k particles see the same noise for any N >= k.
    """

    def __init__(self, seed_seq: np.random.SeedSequence, n: int, block: int = NOISE_BLOCK):
        if n < 1 or block < 1:
            raise ValueError("ParticleNoise needs n >= 1 and block >= 1")
        self.n = int(n)
        self.block = int(block)
        self._gens = [np.random.default_rng(c)
                      for c in seed_seq.spawn(math.ceil(self.n / self.block))]

    def standard_normal(self, q: int) -> np.ndarray:
        draws = [g.standard_normal((self.block, q)) for g in self._gens]
        return np.concatenate(draws)[: self.n]


def _noise(rng: Union[np.random.Generator, ParticleNoise], n: int, q: int) -> np.ndarray:
    if isinstance(rng, ParticleNoise):
        if rng.n != n:
            raise ValueError(f"noise streams cover {rng.n} particles, got {n}")
        return rng.standard_normal(q)
    return rng.standard_normal((n, q))


def euler_maruyama(X, u, dt, model: ProcessModel,
                   rng: Union[np.random.Generator, ParticleNoise],
                   dt_sde: float = DEFAULT_DT_SDE, t0: float = 0.0):
    """
    Advance every row of X by dt. Substeps are dt_sde with the last one
    truncated so they sum to dt. One (N, q) standard-normal block is drawn
    per substep, row i feeding particle i. Pass a ParticleNoise for draws
    that stay fixed per particle as N changes.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = model.check_input(u)
    X = np.array(X, dtype=float, copy=True)
    t = t0
    for h in _substeps(dt, dt_sde):
        f = model.drift(X)
        G = model.input_matrix(X)
        sig = model.diffusion_diag(X)
        eps = _noise(rng, X.shape[0], model.noise_dim)
        X += (f + G @ u) * h
        X[:, : model.noise_dim] += sig * eps * math.sqrt(h)
        t += h
        bad = ~np.all(np.isfinite(X), axis=1)
        if bad.any():
            raise PropagationDivergedError(int(np.argmax(bad)), t)
    return X


def propagate(belief: BeliefState, u, dt: float, model: ProcessModel,
              rng: Union[np.random.Generator, ParticleNoise],
              dt_sde: float = DEFAULT_DT_SDE) -> BeliefState:
    X = euler_maruyama(belief.particles, u, dt, model, rng, dt_sde, belief.t)
    return replace(belief, particles=X, t=belief.t + dt)


# ============================================================
# MEASUREMENT UPDATE
# ============================================================
def systematic_resample(weights, rng: Optional[np.random.Generator] = None,
                        offset: Optional[float] = None) -> np.ndarray:
    """
    Indexes of the particles kept by systematic resampling. The single
    uniform offset is drawn from rng unless given explicitly.
    """
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    if offset is None:
        offset = rng.random()
    positions = (offset + np.arange(n)) / n
    cumulative = np.cumsum(w / w.sum())
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right")


def measurement_update(belief: BeliefState, z, model: ObservationModel,
                       rng: np.random.Generator, ess_threshold: float = 0.5) -> BeliefState:
    z = np.asarray(z, dtype=float).reshape(-1)
    lik = np.asarray(model.likelihood(z, belief.particles), dtype=float)
    w = belief.weights * lik
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateUpdateError(
            f"all {belief.N} likelihoods vanished at t={belief.t:.3f}"
        )
    w = w / total
    ess = 1.0 / np.sum(w ** 2)
    if ess < belief.N * ess_threshold:
        logger.debug("LOW_ESS | t=%.3f ess=%.1f N=%d", belief.t, ess, belief.N)
    idx = systematic_resample(w, rng)
    return BeliefState(
        belief.particles[idx],
        np.full(belief.N, 1.0 / belief.N),
        belief.t,
        last_z=z,
    )


# ============================================================
# ESTIMATES
# ============================================================
def mean_state(belief: BeliefState) -> np.ndarray:
    w = belief.weights / belief.weights.sum()
    return w @ belief.particles


def covariance(belief: BeliefState, dims=None) -> np.ndarray:
    X = belief.particles if dims is None else belief.particles[:, dims]
    w = belief.weights / belief.weights.sum()
    d = X - w @ X
    return (d * w[:, None]).T @ d


def most_likely_particle(belief: BeliefState, last_z, model: ObservationModel) -> np.ndarray:
    """Particle with the highest likelihood of last_z; ties go to the lowest index."""
    if last_z is None:
        raise NoObservationError("no observation yet, fall back to mean_state")
    lik = np.asarray(model.likelihood(last_z, belief.particles), dtype=float)
    return belief.particles[int(np.argmax(lik))].copy()


def effective_sample_size(belief: BeliefState) -> float:
    w = belief.weights / belief.weights.sum()
    return float(1.0 / np.sum(w ** 2))


# ============================================================
# INITIAL BELIEFS
# ============================================================
def sample_mixture(weights, means, covs, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws from a Gaussian mixture, components picked by multinomial draw."""
    weights = np.asarray(weights, dtype=float)
    counts = rng.multinomial(n, weights / weights.sum())
    blocks = [
        rng.multivariate_normal(np.asarray(m, float), np.asarray(c, float), size=k)
        for m, c, k in zip(means, covs, counts)
        if k > 0
    ]
    return np.vstack(blocks)
