"""
Scenario documents: YAML on disk, pydantic models in memory, and the
builders that turn a validated scenario into model, barrier and risk objects.
"""

import math
import os
from typing import List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from barrier import (
    DEFAULT_LOOKAHEAD_D,
    CircularStayOutBarrier,
    HalfspaceBarrier,
    LookaheadUnicycleBarrier,
    StateBarrier,
    workspace_infimum,
)
from log_utils import get_logger
from particle_filter import PFConfig
from risk_measures import RiskConfig
from safety_filter import DEFAULT_ETA, DEFAULT_GAMMA_CBF
from sde_models import (
    BEACON_NOISE_STD,
    BEACON_POSITION,
    BEACON_RATE_HZ,
    Integrator1D,
    ObservationModel,
    OmniModel,
    PositionObservation,
    ProcessModel,
    RangeBeaconObservation,
    UnicycleModel,
)

logger = get_logger("scenario")

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
SCENARIO_DIR = os.path.join(BASE_DIR, "data", "scenarios")

STATE_DIMS = {"integrator1d": 1, "unicycle": 3, "omni": 3}
INPUT_DIMS = {"integrator1d": 1, "unicycle": 2, "omni": 3}
GRID_TOL = 1e-9
CERTIFIED_POLICIES = ("fixed", "workspace")


class ScenarioConfigError(ValueError):
    def __init__(self, message: str, field_path: str = ""):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field_path = field_path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    kind: Literal["integrator1d", "unicycle", "omni"]
    sigma: Optional[List[float]] = None
    noise_scale: float = Field(1.0, ge=0.0)


class ObservationSpec(_Strict):
    kind: Literal["none", "range_beacon", "position"] = "none"
    beacon: List[float] = Field(default_factory=lambda: list(BEACON_POSITION))
    noise_std: float = Field(BEACON_NOISE_STD, gt=0.0)
    rate_hz: float = Field(BEACON_RATE_HZ, gt=0.0)


class BarrierSpec(_Strict):
    """halfspace: h = c - a.x (m), circle / lookahead: stay out of a disc (m)."""

    kind: Literal["halfspace", "circle", "lookahead"]
    a: Optional[List[float]] = None
    c: Optional[float] = None
    center: Optional[List[float]] = None
    radius: Optional[float] = Field(None, ge=0.0)
    d: float = Field(DEFAULT_LOOKAHEAD_D, gt=0.0)

    @model_validator(mode="after")
    def _check_fields(self):
        if self.kind == "halfspace" and (self.a is None or self.c is None):
            raise ValueError("halfspace barrier needs 'a' and 'c'")
        if self.kind != "halfspace":
            if self.center is None or self.radius is None or len(self.center) != 2:
                raise ValueError(f"{self.kind} barrier needs a 2D 'center' and 'radius'")
        return self


class WorkspaceSpec(_Strict):
    lower: List[float]
    upper: List[float]


class GaussianComponent(_Strict):
    weight: float = Field(1.0, gt=0.0)
    mean: List[float]
    cov: List[List[float]]


class BeliefSpec(_Strict):
    components: List[GaussianComponent] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_weights(self):
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {total:.6g}, expected 1")
        return self


class RiskSpec(_Strict):
    """
    b_min_policy 'workspace' scans the workspace box at load time.
    'sample_min' and 'spread' read the bound off the particles and are not
    certified; studies refuse them.
    """

    alpha: float = Field(0.2, gt=0.0, le=1.0)
    delta: float = Field(0.05, gt=0.0, le=0.5)
    b_min_policy: Literal["fixed", "workspace", "sample_min", "spread"] = "workspace"
    b_min: Optional[float] = None
    support_sigmas: float = Field(3.5, ge=0.0)
    support_margin: float = Field(0.0, ge=0.0)


class ControllerSpec(_Strict):
    variant: Literal["ours", "mu_scbf", "ml_scbf", "be_scbf", "none"] = "ours"
    reference: Literal["constant", "goal"] = "constant"
    u_const: Optional[List[float]] = None
    goal: Optional[List[float]] = None
    gain: float = Field(1.0, gt=0.0)
    q_diag: Optional[List[float]] = None
    u_lower: Optional[List[float]] = None
    u_upper: Optional[List[float]] = None
    gamma_cbf: float = Field(DEFAULT_GAMMA_CBF, gt=0.0)
    eta: float = Field(DEFAULT_ETA, gt=0.0, le=1.0)


class Scenario(_Strict):
    """
    One closed-loop experiment. Times are in seconds, positions in metres,
    headings in radians.
    """

    name: str = "scenario"
    model: ModelSpec
    observation: ObservationSpec = Field(default_factory=ObservationSpec)
    observation_cutoff_s: Optional[float] = Field(None, ge=0.0)
    barrier: BarrierSpec
    workspace: Optional[WorkspaceSpec] = None
    initial_state: Optional[List[float]] = None
    initial_belief: BeliefSpec
    risk: RiskSpec = Field(default_factory=RiskSpec)
    controller: ControllerSpec = Field(default_factory=ControllerSpec)
    pf: PFConfig = Field(default_factory=PFConfig)
    horizon_s: float = Field(2.0, gt=0.0)
    control_dt: float = Field(0.01, gt=0.0)
    seed: int = 0
    repetitions: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_consistency(self):
        n = STATE_DIMS[self.model.kind]
        m = INPUT_DIMS[self.model.kind]

        def need(values, size, what):
            if values is not None and len(values) != size:
                raise ValueError(f"{what} has {len(values)} entries, expected {size}")

        need(self.initial_state, n, "initial_state")
        need(self.model.sigma, n, "model.sigma")
        need(self.barrier.a, n, "barrier.a")
        need(self.controller.u_const, m, "controller.u_const")
        need(self.controller.q_diag, m, "controller.q_diag")
        need(self.controller.u_lower, m, "controller.u_lower")
        need(self.controller.u_upper, m, "controller.u_upper")
        if self.workspace is not None:
            need(self.workspace.lower, n, "workspace.lower")
            need(self.workspace.upper, n, "workspace.upper")
        for comp in self.initial_belief.components:
            need(comp.mean, n, "initial_belief mean")
            if np.shape(comp.cov) != (n, n):
                raise ValueError(f"initial_belief cov must be {n}x{n}")

        if self.barrier.kind == "lookahead" and self.model.kind != "unicycle":
            raise ValueError("lookahead barrier needs the unicycle model")
        if self.barrier.kind != "halfspace" and n < 2:
            raise ValueError("circular barriers need planar position states")
        if self.controller.variant == "be_scbf" and self.barrier.kind == "halfspace":
            raise ValueError("be_scbf needs a circular barrier")
        if self.controller.reference == "constant" and self.controller.u_const is None:
            raise ValueError("constant reference needs controller.u_const")
        if self.controller.reference == "goal":
            if self.model.kind == "integrator1d" or self.controller.goal is None:
                raise ValueError("goal reference needs a planar model and controller.goal")
        if (self.controller.u_lower is None) != (self.controller.u_upper is None):
            raise ValueError("input box needs both u_lower and u_upper")

        if self.risk.b_min_policy == "fixed" and self.risk.b_min is None:
            raise ValueError("b_min_policy 'fixed' needs risk.b_min")
        if self.risk.b_min_policy == "workspace" and self.workspace is None:
            raise ValueError("b_min_policy 'workspace' needs a workspace box")

        if not _on_grid(self.control_dt, self.pf.dt_sde):
            raise ValueError("control_dt must be a multiple of pf.dt_sde")
        if self.observation.kind != "none":
            if not _on_grid(1.0 / self.observation.rate_hz, self.control_dt):
                raise ValueError("observation period must be a multiple of control_dt")
        return self

    @property
    def steps(self) -> int:
        return int(round(self.horizon_s / self.control_dt))

    @property
    def observation_every(self) -> int:
        return int(round(1.0 / (self.observation.rate_hz * self.control_dt)))


def _on_grid(value: float, unit: float) -> bool:
    ratio = value / unit
    return round(ratio) >= 1 and math.isclose(ratio, round(ratio), abs_tol=GRID_TOL * max(1.0, ratio))


# ============================================================
# LOADING
# ============================================================
def _field_path(exc: ValidationError) -> str:
    err = exc.errors()[0]
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_scenario(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ScenarioConfigError(err["msg"], _field_path(exc)) from exc


def load_scenario(path: str) -> Scenario:
    if not os.path.exists(path):
        raise ScenarioConfigError(f"scenario file not found: {path}")
    with open(path) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ScenarioConfigError(f"not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioConfigError("scenario document must be a mapping")
    scenario = parse_scenario(data)
    logger.info("SCENARIO_LOADED | name=%s path=%s", scenario.name, path)
    return scenario


def bundled_scenario(name: str) -> Scenario:
    return load_scenario(os.path.join(SCENARIO_DIR, f"{name}.yaml"))


def with_controller(s: Scenario, **updates) -> Scenario:
    return s.model_copy(update={"controller": s.controller.model_copy(update=updates)})


def with_risk(s: Scenario, **updates) -> Scenario:
    return s.model_copy(update={"risk": s.risk.model_copy(update=updates)})


def with_pf(s: Scenario, **updates) -> Scenario:
    return s.model_copy(update={"pf": s.pf.model_copy(update=updates)})


# ============================================================
# BUILDERS
# ============================================================
def build_model(s: Scenario) -> ProcessModel:
    spec = s.model
    if spec.kind == "integrator1d":
        sigma = spec.sigma[0] if spec.sigma else Integrator1D().sigma
        return Integrator1D(sigma, noise_scale=spec.noise_scale)
    cls = UnicycleModel if spec.kind == "unicycle" else OmniModel
    if spec.sigma is None:
        return cls(noise_scale=spec.noise_scale)
    return cls(spec.sigma, noise_scale=spec.noise_scale)


def build_observation(s: Scenario) -> Optional[ObservationModel]:
    spec = s.observation
    n = STATE_DIMS[s.model.kind]
    if spec.kind == "none":
        return None
    if spec.kind == "range_beacon":
        return RangeBeaconObservation(spec.beacon, spec.noise_std, spec.rate_hz, state_dim=n)
    return PositionObservation(spec.noise_std, spec.rate_hz, state_dim=n)


def build_barrier(s: Scenario) -> StateBarrier:
    spec = s.barrier
    if spec.kind == "halfspace":
        return HalfspaceBarrier(spec.a, spec.c)
    if spec.kind == "circle":
        return CircularStayOutBarrier(spec.center, spec.radius, STATE_DIMS[s.model.kind])
    return LookaheadUnicycleBarrier(spec.center, spec.radius, spec.d)


def build_risk_config(s: Scenario, barrier: Optional[StateBarrier] = None) -> RiskConfig:
    spec = s.risk
    common = dict(alpha=spec.alpha, delta=spec.delta,
                  support_sigmas=spec.support_sigmas, support_margin=spec.support_margin)
    if spec.b_min_policy == "fixed":
        return RiskConfig(b_min=spec.b_min, support="fixed", **common)
    if spec.b_min_policy == "workspace":
        barrier = barrier or build_barrier(s)
        b = workspace_infimum(barrier, s.workspace.lower, s.workspace.upper) - spec.support_margin
        logger.info("B_MIN_RESOLVED | scenario=%s b_min=%.4f", s.name, b)
        return RiskConfig(b_min=b, support="fixed", **common)
    logger.warning("UNCERTIFIED_SUPPORT | scenario=%s policy=%s", s.name, spec.b_min_policy)
    return RiskConfig(support=spec.b_min_policy, **common)


def require_certified(s: Scenario) -> Scenario:
    if s.risk.b_min_policy not in CERTIFIED_POLICIES:
        raise ScenarioConfigError(
            f"'{s.risk.b_min_policy}' support is not certified, use one of {CERTIFIED_POLICIES}",
            "risk.b_min_policy",
        )
    return s


def weight_matrix(s: Scenario) -> np.ndarray:
    m = INPUT_DIMS[s.model.kind]
    if s.controller.q_diag is None:
        return np.eye(m)
    return np.diag(s.controller.q_diag)


def input_box(s: Scenario):
    if s.controller.u_lower is None:
        return None
    return np.asarray(s.controller.u_lower, float), np.asarray(s.controller.u_upper, float)


def scenario_schema() -> dict:
    return Scenario.model_json_schema()
