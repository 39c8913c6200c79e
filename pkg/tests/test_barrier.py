import math

import numpy as np
import pytest

from barrier import (
    CircularStayOutBarrier,
    HalfspaceBarrier,
    LookaheadUnicycleBarrier,
    belief_barrier,
    belief_barrier_value,
    finite_difference_check,
    relative_error,
    support_bound,
    workspace_infimum,
)
from particle_filter import BeliefState
from risk_measures import (
    RiskConfig,
    SupportViolationError,
    WeightPreconditionError,
    empirical_cvar,
    gaussian_cvar,
)
from sde_models import Integrator1D, OmniModel, UnicycleModel

TAIL = RiskConfig(alpha=0.2, delta=0.05, b_min=-10.0)


def _unicycle_belief(rng, n=50):
    particles = np.column_stack([
        rng.uniform(-1.0, 3.0, n),
        rng.uniform(-1.0, 3.0, n),
        rng.uniform(-np.pi, np.pi, n),
    ])
    return BeliefState.uniform(particles)


def _numeric_grad(barrier, x, eps=1e-6):
    out = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        out[k] = (barrier.value(x + e) - barrier.value(x - e)) / (2 * eps)
    return out


def _numeric_hess(barrier, x, eps=1e-5):
    out = np.zeros((x.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        out[:, k] = (barrier.grad(x + e) - barrier.grad(x - e)) / (2 * eps)
    return out


# ============================================================
# STATE BARRIERS
# ============================================================
def test_halfspace():
    b = HalfspaceBarrier([1.0], 2.0)
    assert b.value(np.array([0.5])) == pytest.approx(1.5)
    np.testing.assert_array_equal(b.grad(np.array([0.5])), [-1.0])
    np.testing.assert_array_equal(b.hess(np.array([0.5])), [[0.0]])


def test_circle_gradient_is_unit_away_from_center(rng):
    b = CircularStayOutBarrier([1.0, -1.0], 0.5)
    X = rng.uniform(-3, 3, size=(100, 3))
    np.testing.assert_allclose(np.linalg.norm(b.grad(X), axis=1), 1.0)
    np.testing.assert_array_equal(b.grad(X)[:, 2], 0.0)


def test_circle_center_gives_zero_gradient():
    b = CircularStayOutBarrier([1.0, 1.0], 0.5)
    x = np.array([1.0, 1.0, 0.3])
    assert b.value(x) == pytest.approx(-0.5)
    np.testing.assert_array_equal(b.grad(x), np.zeros(3))
    np.testing.assert_array_equal(b.hess(x), np.zeros((3, 3)))


def test_lookahead_point_and_value():
    b = LookaheadUnicycleBarrier([2.0, 1.0], 0.3, d=0.5)
    x = np.array([0.0, 0.0, 0.0])
    np.testing.assert_allclose(b.lookahead_point(x), [0.5, 0.0])
    assert b.value(x) == pytest.approx(math.hypot(1.5, 1.0) - 0.8)


@pytest.mark.parametrize("barrier", [
    CircularStayOutBarrier([1.0, 0.5], 0.4),
    LookaheadUnicycleBarrier([1.0, 0.5], 0.4, d=0.2),
])
def test_derivatives_match_finite_differences(barrier, rng):
    for _ in range(50):
        x = np.array([rng.uniform(-2, 4), rng.uniform(-2, 4), rng.uniform(-np.pi, np.pi)])
        if np.linalg.norm(x[:2] - barrier.center) < 0.3:
            continue
        np.testing.assert_allclose(barrier.grad(x), _numeric_grad(barrier, x), rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(barrier.hess(x), _numeric_hess(barrier, x), rtol=1e-4, atol=1e-6)


def test_inflated_grows_radius():
    b = LookaheadUnicycleBarrier([0.0, 0.0], 0.5, d=0.2).inflated(0.3)
    assert b.radius == pytest.approx(0.8)
    assert b.d == pytest.approx(0.2)
    c = CircularStayOutBarrier([0.0, 0.0], 0.5).inflated(1.0)
    assert c.value(np.array([3.0, 0.0, 0.0])) == pytest.approx(1.5)


def test_workspace_infimum_is_below_true_minimum():
    b = CircularStayOutBarrier([0.33, 0.71], 0.5)
    inf = workspace_infimum(b, [-1.0, -1.0, -3.2], [2.0, 2.0, 3.2])
    assert -1.0 < inf <= -0.5


# ============================================================
# BELIEF BARRIER
# ============================================================
def test_single_particle_bound():
    cfg = RiskConfig(alpha=1.0, delta=0.5, b_min=-10.0)
    belief = BeliefState.uniform(np.array([[0.0]]))
    terms = belief_barrier(belief, HalfspaceBarrier([1.0], 2.0), cfg, Integrator1D())
    expected = -10.0 + 12.0 * (1.0 - math.sqrt(math.log(2.0) / 2.0))
    assert terms.h_b == pytest.approx(expected, abs=1e-12)
    assert terms.h_b == pytest.approx(-5.0645, abs=1e-4)


def test_identical_particles_at_support():
    x = np.array([1.2])
    barrier = HalfspaceBarrier([1.0], 2.0)
    cfg = RiskConfig(alpha=0.2, delta=0.05, b_min=barrier.value(x))
    belief = BeliefState.uniform(np.tile(x, (20, 1)))
    terms = belief_barrier(belief, barrier, cfg, Integrator1D())
    assert terms.h_b == pytest.approx(0.8)
    np.testing.assert_allclose(terms.grad_b.sum(axis=0), terms.gamma.sum() * barrier.grad(x))


def test_halfspace_has_no_trace_term(rng):
    belief = BeliefState.uniform(rng.normal(0.5, 0.1, size=(100, 1)))
    for cfg in (TAIL, RiskConfig(support="sample_min")):
        terms = belief_barrier(belief, HalfspaceBarrier([1.0], 2.0), cfg, Integrator1D())
        assert terms.trace_term == 0.0


@pytest.mark.parametrize("cfg", [
    TAIL,
    RiskConfig(alpha=0.2, delta=0.05, support="sample_min"),
    RiskConfig(alpha=0.2, delta=0.05, support="spread"),
])
def test_gradient_is_coefficient_times_state_gradient(cfg, rng):
    belief = _unicycle_belief(rng)
    barrier = LookaheadUnicycleBarrier([1.0, 1.0], 0.4)
    terms = belief_barrier(belief, barrier, cfg, UnicycleModel())
    np.testing.assert_array_equal(terms.grad_b, terms.gamma[:, None] * barrier.grad(belief.particles))
    assert len(terms.grad_list()) == belief.N


@pytest.mark.parametrize("cfg", [
    TAIL,
    RiskConfig(alpha=0.05, delta=0.05, support="sample_min"),
    RiskConfig(alpha=0.2, delta=0.1, support="spread"),
])
def test_dominance_chain(cfg, rng):
    barrier = CircularStayOutBarrier([1.0, 1.0], 0.4)
    for _ in range(20):
        belief = _unicycle_belief(rng, n=int(rng.integers(5, 200)))
        h = barrier.value(belief.particles)
        h_b = belief_barrier(belief, barrier, cfg, OmniModel()).h_b
        assert h_b <= empirical_cvar(h, cfg.alpha) + 1e-12 <= h.max() + 1e-12


def test_only_low_particles_carry_gradient(rng):
    belief = BeliefState.uniform(rng.normal(0.0, 1.0, size=(200, 1)))
    barrier = HalfspaceBarrier([1.0], 2.0)
    terms = belief_barrier(belief, barrier, TAIL, Integrator1D())
    h = barrier.value(belief.particles)
    cutoff = np.quantile(h, 0.25)
    assert np.all(terms.gamma[h > cutoff] == 0.0)
    assert np.any(terms.gamma > 0)


def test_support_violation_propagates():
    belief = BeliefState.uniform(np.array([[15.0]]))
    with pytest.raises(SupportViolationError):
        belief_barrier(belief, HalfspaceBarrier([1.0], 2.0), TAIL, Integrator1D())


def test_weighted_belief_is_rejected():
    belief = BeliefState(np.array([[0.0], [1.0]]), np.array([0.9, 0.1]))
    with pytest.raises(WeightPreconditionError):
        belief_barrier(belief, HalfspaceBarrier([1.0], 2.0), TAIL, Integrator1D())


def test_spread_support_sits_below_every_sample(rng):
    h = rng.normal(1.0, 0.2, size=50)
    cfg = RiskConfig(support="spread", support_margin=0.01)
    b, db, _ = support_bound(h, cfg)
    assert b < h.min()
    assert db.sum() == pytest.approx(1.0)


def test_spread_trace_matches_second_differences(rng):
    """With all tail mass on the support bound, h_b is b itself; its curvature
    in each particle gives the diffusion correction."""
    sigma = 0.1
    model = Integrator1D(sigma)
    barrier = HalfspaceBarrier([1.0], 2.0)
    cfg = RiskConfig(alpha=0.2, delta=0.05, support="spread")
    X = rng.normal(0.5, 0.1, size=(20, 1))
    terms = belief_barrier(BeliefState.uniform(X), barrier, cfg, model)
    assert terms.gamma_b == pytest.approx(1.0)

    eps = 1e-4
    curvature = 0.0
    for i in range(X.shape[0]):
        Xp, Xm = X.copy(), X.copy()
        Xp[i, 0] += eps
        Xm[i, 0] -= eps
        curvature += (belief_barrier_value(Xp, barrier, cfg) - 2 * terms.h_b
                      + belief_barrier_value(Xm, barrier, cfg)) / eps ** 2
    assert terms.trace_term == pytest.approx(0.5 * sigma ** 2 * curvature, rel=1e-3)


# ============================================================
# FINITE-DIFFERENCE CHECK
# ============================================================
@pytest.mark.parametrize("cfg", [
    TAIL,
    RiskConfig(alpha=0.2, delta=0.05, support="sample_min"),
    RiskConfig(alpha=0.2, delta=0.05, support="spread"),
])
def test_fd_check_lookahead(cfg):
    rng = np.random.default_rng(77)
    barrier = LookaheadUnicycleBarrier([1.0, 1.0], 0.4)
    for _ in range(100):
        belief = _unicycle_belief(rng)
        report = finite_difference_check(belief, barrier, cfg, model=UnicycleModel())
        assert report.max_rel_error < 1e-4


def test_fd_check_circle():
    rng = np.random.default_rng(78)
    barrier = CircularStayOutBarrier([1.0, 1.0], 0.4)
    for _ in range(100):
        report = finite_difference_check(_unicycle_belief(rng), barrier, TAIL)
        assert report.max_rel_error < 1e-4


def test_fd_check_halfspace_is_linear():
    rng = np.random.default_rng(79)
    barrier = HalfspaceBarrier([1.0], 2.0)
    for _ in range(100):
        belief = BeliefState.uniform(rng.normal(0.5, 0.3, size=(100, 1)))
        report = finite_difference_check(belief, barrier, TAIL, eps=1e-4, model=Integrator1D())
        assert report.max_rel_error < 1e-5


def test_fd_check_reports_ties():
    belief = BeliefState.uniform(np.array([[0.0], [0.0], [1.0]]))
    report = finite_difference_check(belief, HalfspaceBarrier([1.0], 2.0), TAIL)
    assert report.ties == [0, 1]
    assert report.checked == 1


def test_relative_error_is_per_entry():
    analytic = np.array([[1.0], [1e-2], [0.0]])
    numeric = np.array([[1.0], [2e-2], [1e-6]])
    assert relative_error(analytic, numeric) == pytest.approx(0.5)
    # below the floor an entry is measured against floor * largest entry
    assert relative_error(analytic[[0, 2]], numeric[[0, 2]]) == pytest.approx(1e-3)
    assert relative_error(np.zeros((0, 1)), np.zeros((0, 1))) == 0.0


# ============================================================
# SUPPORT BOUNDS
# ============================================================
def test_exact_infima(rng):
    circle = CircularStayOutBarrier([1.0, 2.0], 0.4)
    look = LookaheadUnicycleBarrier([1.8, 3.2], 0.5, 0.2)
    assert circle.infimum == pytest.approx(-0.4)
    assert look.infimum == pytest.approx(-0.7)
    assert HalfspaceBarrier([1.0], 2.0).infimum == float("-inf")
    assert circle.value(np.array([1.0, 2.0, 0.3])) == pytest.approx(circle.infimum)
    assert look.value(np.array([1.6, 3.2, 0.0])) == pytest.approx(look.infimum)
    X = np.column_stack([rng.uniform(-2, 5, 2000), rng.uniform(-2, 5, 2000),
                         rng.uniform(-np.pi, np.pi, 2000)])
    assert look.value(X).min() >= look.infimum
    assert circle.value(X).min() >= circle.infimum


def test_sample_min_support_loses_the_confidence_level():
    """At N=20, alpha=0.2 every rank weight is zero, so the bound is the
    smallest sample; it sits above the true CVaR with probability
    Phi(1.4)^20, about 0.185."""
    rng = np.random.default_rng(5)
    cfg = RiskConfig(alpha=0.2, delta=0.05, support="sample_min")
    barrier = HalfspaceBarrier([-1.0], 0.0)  # h = x
    truth = gaussian_cvar(0.0, 1.0, 0.2)
    trials = 4000
    above = sum(
        belief_barrier_value(rng.standard_normal((20, 1)), barrier, cfg) > truth
        for _ in range(trials)
    )
    assert above / trials > 0.12
