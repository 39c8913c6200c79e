"""
Lower-tail VaR / CVaR estimators and the distribution-free CVaR lower bound
built from order statistics.

For equally weighted samples y_1..y_N with Pr[y >= b] = 1, sort them in
descending order xi_1 >= ... >= xi_N, set xi_{N+1} = b and

    bound = xi_{N+1} + (1/alpha) * sum_i (xi_i - xi_{i+1}) * w_i,
    w_i   = max(0, i/N - kappa - (1 - alpha)),  kappa = sqrt(ln(1/delta) / (2N)).

The bound lies below the true CVaR_alpha with probability at least 1 - delta.
"""

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import norm

COEFF_TOL = 1e-12


class SupportViolationError(ValueError):
    """A sample lies below the declared support lower bound."""


class WeightPreconditionError(ValueError):
    """The bound needs equally weighted samples; resample first."""


class RiskConfig(BaseModel):
    """
    alpha: tail level, delta: confidence, b_min: support lower bound.

    support selects where the bound comes from at belief level:
    "fixed" uses b_min, "sample_min" the smallest sample minus
    support_margin, "spread" min(mean - support_sigmas*std, smallest sample)
    minus support_margin.

    Only "fixed" is certified: a bound read off the samples does not satisfy
    Pr[y >= b] = 1 and the 1 - delta guarantee is lost. The sample policies
    are kept as diagnostics.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(0.2, gt=0.0, le=1.0)
    delta: float = Field(0.05, gt=0.0, le=0.5)
    b_min: Optional[float] = None
    support: Literal["fixed", "sample_min", "spread"] = "fixed"
    support_sigmas: float = Field(3.5, ge=0.0)
    support_margin: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_support(self):
        if self.support == "fixed":
            if self.b_min is None or not math.isfinite(self.b_min):
                raise ValueError("support 'fixed' needs a finite b_min")
        elif self.b_min is not None and not math.isfinite(self.b_min):
            raise ValueError("b_min must be finite")
        return self

    @property
    def certified(self) -> bool:
        return self.support == "fixed"


@dataclass(frozen=True)
class SortedTail:
    """Descending order statistics with xi[N] = b_min and the rank->index map."""

    xi: np.ndarray
    perm: np.ndarray


def concentration_margin(n: int, delta: float) -> float:
    return math.sqrt(math.log(1.0 / delta) / (2.0 * n))


def _samples(samples) -> np.ndarray:
    y = np.asarray(samples, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("samples must be non-empty")
    return y


def _check_weights(n: int, weights):
    if weights is None:
        return
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (n,) or np.any(w < 0):
        raise WeightPreconditionError("weights must be N non-negative numbers")
    total = float(w.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise WeightPreconditionError(f"weights sum to {total:.6g}, cannot normalize")
    if np.any(np.abs(w / total - 1.0 / n) > 1e-9):
        raise WeightPreconditionError(
            "CVaR bound requires equally weighted samples"
        )


def _support(cfg: RiskConfig, b_min: Optional[float]) -> float:
    b = cfg.b_min if b_min is None else b_min
    if b is None:
        raise ValueError(
            f"support '{cfg.support}' has no fixed b_min; pass b_min explicitly"
        )
    return float(b)


def sorted_tail(samples, b_min: float) -> SortedTail:
    y = _samples(samples)
    if np.any(y < b_min):
        worst = int(np.argmin(y))
        raise SupportViolationError(
            f"sample {worst} = {y[worst]:.6g} lies below support bound {b_min:.6g}"
        )
    # stable sort on -y: descending, ties keep original index order
    perm = np.argsort(-y, kind="stable")
    xi = np.append(y[perm], b_min)
    return SortedTail(xi=xi, perm=perm)


def empirical_var(samples, alpha: float) -> float:
    """Smallest sample tau with (count of samples <= tau) / N >= alpha."""
    y = np.sort(_samples(samples))
    k = max(1, math.ceil(alpha * y.size - 1e-9))
    return float(y[k - 1])


def empirical_cvar(samples, alpha: float) -> float:
    """Mean of the samples at or below the empirical VaR."""
    y = _samples(samples)
    var = empirical_var(y, alpha)
    return float(y[y <= var].mean())


def _rank_weights(n: int, cfg: RiskConfig) -> np.ndarray:
    """w_0..w_N with w_0 = 0."""
    kappa = concentration_margin(n, cfg.delta)
    ranks = np.arange(0, n + 1) / n
    w = np.maximum(0.0, ranks - kappa - (1.0 - cfg.alpha))
    w[0] = 0.0
    return w


def cvar_lower_bound(samples, cfg: RiskConfig, weights=None,
                     b_min: Optional[float] = None) -> float:
    y = _samples(samples)
    _check_weights(y.size, weights)
    b = _support(cfg, b_min)
    tail = sorted_tail(y, b)
    w = _rank_weights(y.size, cfg)[1:]
    gaps = tail.xi[:-1] - tail.xi[1:]
    return float(tail.xi[-1] + np.dot(gaps, w) / cfg.alpha)


def cvar_lower_bound_coefficients(samples, cfg: RiskConfig, weights=None,
                                  b_min: Optional[float] = None):
    """
    Telescoped form of the bound: returns (gamma, gamma_b) with gamma aligned
    to the original sample order so that

        bound = sum_j gamma_j * samples_j + gamma_b * b_min.

    All coefficients are non-negative and sum to one.
    """
    y = _samples(samples)
    _check_weights(y.size, weights)
    b = _support(cfg, b_min)
    tail = sorted_tail(y, b)
    w = _rank_weights(y.size, cfg)
    by_rank = np.diff(w) / cfg.alpha
    gamma = np.empty_like(by_rank)
    gamma[tail.perm] = by_rank
    gamma_b = 1.0 - w[-1] / cfg.alpha
    return gamma, float(gamma_b)


def gaussian_cvar(mu: float, sigma: float, alpha: float) -> float:
    """Lower-tail CVaR of Normal(mu, sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if alpha >= 1.0:
        return float(mu)
    return float(mu - sigma * norm.pdf(norm.ppf(alpha)) / alpha)
