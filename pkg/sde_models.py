"""
Controlled SDE process models dx = (f(x) + g(x)u) dt + sigma(x) dW and
discrete observation models z = l(x, v).

All model methods are batched: they accept a single state of shape (n_x,)
or a particle array of shape (N, n_x) and return arrays with a leading
particle axis when given one.
"""

from abc import ABC, abstractmethod

import numpy as np
from scipy.stats import norm


# ==========================
# CONSTANTS
# ==========================
UNICYCLE_SIGMA = (0.3, 0.3, 0.1)
INTEGRATOR_SIGMA = 0.1
OMNI_SIGMA = (0.05, 0.05, 0.02)
BEACON_POSITION = (4.0, 4.0)
BEACON_NOISE_STD = 0.3
BEACON_RATE_HZ = 1.0


class ContractViolationError(ValueError):
    """Raised when an array does not have the dimensions a model declares."""


def _as_batch(x, dim, what="state"):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ContractViolationError(
            f"{what} has shape {arr.shape}, expected ({dim},) or (N, {dim})"
        )
    return batch, single


# ============================================================
# PROCESS MODELS
# ============================================================
class ProcessModel(ABC):
    """
    Controlled SDE with diagonal, non-degenerate diffusion.

    noise_scale multiplies sigma(x); it exists so tests can switch the
    diffusion off and must stay 1.0 in scenarios.
    """

    state_dim: int
    input_dim: int
    noise_dim: int

    def __init__(self, noise_scale: float = 1.0):
        self.noise_scale = float(noise_scale)

    @abstractmethod
    def _drift(self, X: np.ndarray) -> np.ndarray:
        """(N, n_x) -> (N, n_x)"""

    @abstractmethod
    def _input_matrix(self, X: np.ndarray) -> np.ndarray:
        """(N, n_x) -> (N, n_x, m)"""

    @abstractmethod
    def _diffusion_diag(self, X: np.ndarray) -> np.ndarray:
        """(N, n_x) -> (N, q) diagonal entries of sigma(x)"""

    def drift(self, x):
        X, single = _as_batch(x, self.state_dim)
        out = self._drift(X)
        return out[0] if single else out

    def input_matrix(self, x):
        X, single = _as_batch(x, self.state_dim)
        out = self._input_matrix(X)
        return out[0] if single else out

    def diffusion_diag(self, x):
        X, single = _as_batch(x, self.state_dim)
        out = self.noise_scale * self._diffusion_diag(X)
        return out[0] if single else out

    def diffusion(self, x):
        """Full sigma(x) matrices, (n_x, q) or (N, n_x, q)."""
        diag = np.atleast_2d(self.diffusion_diag(x))
        out = np.zeros((diag.shape[0], self.state_dim, self.noise_dim))
        idx = np.arange(self.noise_dim)
        out[:, idx, idx] = diag
        return out[0] if np.asarray(x).ndim == 1 else out

    def check_input(self, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape != (self.input_dim,):
            raise ContractViolationError(
                f"input has shape {u.shape}, expected ({self.input_dim},)"
            )
        return u


class Integrator1D(ProcessModel):
    """dx = u dt + 0.1 dW"""

    state_dim = 1
    input_dim = 1
    noise_dim = 1

    def __init__(self, sigma: float = INTEGRATOR_SIGMA, noise_scale: float = 1.0):
        super().__init__(noise_scale)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def _drift(self, X):
        return np.zeros_like(X)

    def _input_matrix(self, X):
        return np.ones((X.shape[0], 1, 1))

    def _diffusion_diag(self, X):
        return np.full((X.shape[0], 1), self.sigma)


class UnicycleModel(ProcessModel):
    """
    State [p_x, p_y, phi], input [v, omega]. Forward velocity acts along
    the heading: g(x) = [[cos phi, 0], [sin phi, 0], [0, 1]].
    """

    state_dim = 3
    input_dim = 2
    noise_dim = 3

    def __init__(self, sigma=UNICYCLE_SIGMA, noise_scale: float = 1.0):
        super().__init__(noise_scale)
        self.sigma = np.asarray(sigma, dtype=float)
        if self.sigma.shape != (3,) or np.any(self.sigma <= 0):
            raise ValueError("unicycle sigma must be 3 positive entries")

    def _drift(self, X):
        return np.zeros_like(X)

    def _input_matrix(self, X):
        phi = X[:, 2]
        G = np.zeros((X.shape[0], 3, 2))
        G[:, 0, 0] = np.cos(phi)
        G[:, 1, 0] = np.sin(phi)
        G[:, 2, 1] = 1.0
        return G

    def _diffusion_diag(self, X):
        return np.broadcast_to(self.sigma, (X.shape[0], 3)).copy()


class OmniModel(ProcessModel):
    """
    Omnidirectional base. Input [v_x, v_y, omega] in the body frame,
    rotated into the world frame by phi.
    """

    state_dim = 3
    input_dim = 3
    noise_dim = 3

    def __init__(self, sigma=OMNI_SIGMA, noise_scale: float = 1.0):
        super().__init__(noise_scale)
        self.sigma = np.asarray(sigma, dtype=float)
        if self.sigma.shape != (3,) or np.any(self.sigma <= 0):
            raise ValueError("omni sigma must be 3 positive entries")

    def _drift(self, X):
        return np.zeros_like(X)

    def _input_matrix(self, X):
        c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
        G = np.zeros((X.shape[0], 3, 3))
        G[:, 0, 0] = c
        G[:, 0, 1] = -s
        G[:, 1, 0] = s
        G[:, 1, 1] = c
        G[:, 2, 2] = 1.0
        return G

    def _diffusion_diag(self, X):
        return np.broadcast_to(self.sigma, (X.shape[0], 3)).copy()


def drift_input_diffusion(model: ProcessModel, x):
    """The three SDE fields (f, g, sigma) at a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractViolationError(
            f"state has shape {x.shape}, expected ({model.state_dim},)"
        )
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("state must be finite")
    return model.drift(x), model.input_matrix(x), model.diffusion(x)


# ============================================================
# OBSERVATION MODELS
# ============================================================
class ObservationModel(ABC):
    """z = predict(x) + v with v drawn from noise_density."""

    obs_dim: int
    state_dim: int

    def __init__(self, rate_hz: float):
        if rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        self.rate_hz = float(rate_hz)

    @abstractmethod
    def predict(self, x):
        """(n_x,) -> (obs_dim,) or (N, n_x) -> (N, obs_dim)"""

    @abstractmethod
    def noise_density(self, v) -> np.ndarray:
        """Density of the noise at innovations v of shape (N, obs_dim)."""

    @abstractmethod
    def sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        """One noise draw of shape (obs_dim,)."""

    def likelihood(self, z, x):
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.shape != (self.obs_dim,):
            raise ContractViolationError(
                f"observation has shape {z.shape}, expected ({self.obs_dim},)"
            )
        X, single = _as_batch(x, self.state_dim)
        innovation = z[None, :] - np.atleast_2d(self.predict(X))
        out = self.noise_density(innovation)
        return float(out[0]) if single else out


class RangeBeaconObservation(ObservationModel):
    """z = ||p - l||_2 + v, v ~ Normal(0, r)"""

    obs_dim = 1

    def __init__(self, beacon=BEACON_POSITION, noise_std: float = BEACON_NOISE_STD,
                 rate_hz: float = BEACON_RATE_HZ, state_dim: int = 3):
        super().__init__(rate_hz)
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        self.beacon = np.asarray(beacon, dtype=float)
        self.noise_std = float(noise_std)
        self.state_dim = int(state_dim)

    def predict(self, x):
        X, single = _as_batch(x, self.state_dim)
        r = np.linalg.norm(X[:, :2] - self.beacon[None, :], axis=1)[:, None]
        return r[0] if single else r

    def noise_density(self, v):
        return norm.pdf(v[:, 0], loc=0.0, scale=self.noise_std)

    def sample_noise(self, rng):
        return rng.normal(0.0, self.noise_std, size=1)


class PositionObservation(ObservationModel):
    """Direct position fix z = p + v, v ~ Normal(0, r^2 I)."""

    obs_dim = 2

    def __init__(self, noise_std: float = 0.1, rate_hz: float = 10.0,
                 state_dim: int = 3):
        super().__init__(rate_hz)
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        self.noise_std = float(noise_std)
        self.state_dim = int(state_dim)

    def predict(self, x):
        X, single = _as_batch(x, self.state_dim)
        p = X[:, :2].copy()
        return p[0] if single else p

    def noise_density(self, v):
        return np.prod(norm.pdf(v, loc=0.0, scale=self.noise_std), axis=1)

    def sample_noise(self, rng):
        return rng.normal(0.0, self.noise_std, size=2)


def observe_likelihood(model: ObservationModel, z, x) -> float:
    """p(z | x) for a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractViolationError(
            f"state has shape {x.shape}, expected ({model.state_dim},)"
        )
    return model.likelihood(z, x)


def sample_observation(model: ObservationModel, x, rng: np.random.Generator):
    """z = l(x) + v for a single state; reproducible for a given rng state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractViolationError(
            f"state has shape {x.shape}, expected ({model.state_dim},)"
        )
    return np.asarray(model.predict(x), dtype=float) + model.sample_noise(rng)
