import copy
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

from uvms_pitch.model import default_model, model_from_dict  # noqa: E402

# geometry of the planar double-pendulum test arm, shared with the Lagrangian oracle
PENDULUM = dict(m1=0.4, m2=0.35, m3=0.1, a1=0.075, a2=0.07, a3=0.05, l1=0.15, l2=0.14, I1=7.9e-4, I2=6e-4, I3=1e-4, g=9.81)


def default_raw() -> dict:
    return yaml.safe_load(resources.files("uvms_pitch").joinpath("data/default_model.yaml").read_text())


def pendulum_params():
    P = PENDULUM
    return tuple(P[k] for k in ("m1", "m2", "m3", "a1", "a2", "a3", "l1", "l2", "I1", "I2", "I3", "g"))


def pendulum_model():
    """Arm whose two pitch joints form a planar double pendulum; water removed.

    The yaw and wrist-roll joints see no generalised force from planar
    motion, so with the base fixed they stay at rest.
    """
    P = PENDULUM
    raw = copy.deepcopy(default_raw())
    L = raw["links"]
    L[0].update(mass=0.2, center_of_mass=[0, 0, 0], inertia=[[1e-4, 0, 0], [0, 1e-4, 0], [0, 0, 1e-4]])
    L[1].update(mass=P["m1"], center_of_mass=[P["a1"], 0, 0], inertia=[[8e-5, 0, 0], [0, P["I1"], 0], [0, 0, P["I1"]]])
    L[1]["joint"]["origin"] = [0.05, 0, 0]
    L[2].update(mass=P["m2"], center_of_mass=[P["a2"], 0, 0], inertia=[[7e-5, 0, 0], [0, P["I2"], 0], [0, 0, P["I2"]]])
    L[2]["joint"]["origin"] = [P["l1"], 0, 0]
    L[3].update(mass=P["m3"], center_of_mass=[P["a3"], 0, 0], inertia=[[5e-5, 0, 0], [0, P["I3"], 0], [0, 0, P["I3"]]])
    L[3]["joint"]["origin"] = [P["l2"], 0, 0]
    for link in L:
        link["joint"]["limits"] = [-10, 10]
    raw["gravity"] = P["g"]
    return model_from_dict(raw).without_hydrodynamics()


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def raw_config():
    return default_raw()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# fifty random episodes, kept at 50 Hz; per-step torque statistics are
# computed at 1 kHz inside the simulator and stored in each episode's meta
SAMPLE_SEEDS = range(9000, 9050)


@pytest.fixture(scope="session")
def sample_episodes(model):
    from uvms_pitch.dataset import preprocessor
    from uvms_pitch.simulation import generate_dataset

    g = generate_dataset(model, len(SAMPLE_SEEDS), SAMPLE_SEEDS[0], transform=preprocessor(50.0), threads=1)
    assert not g.rejected
    return g.episodes


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
