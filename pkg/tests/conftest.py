import numpy as np
import pytest

from scenario_config import bundled_scenario, with_pf


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def drone_scenario():
    """Bundled drone, cut down to run in a fraction of a second."""
    s = bundled_scenario("example1_drone")
    return with_pf(s, N=200).model_copy(update={"horizon_s": 1.0})


@pytest.fixture
def unicycle_scenario():
    s = bundled_scenario("multimodal_unicycle")
    return with_pf(s, N=200).model_copy(update={"horizon_s": 2.0})


@pytest.fixture
def omni_scenario():
    s = bundled_scenario("omni_dropout")
    return with_pf(s, N=400).model_copy(update={"horizon_s": 5.0})
