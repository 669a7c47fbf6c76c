import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from ppfbin.mesh import make_bracket, mesh_to_cloud, object_diameter  # noqa: E402
from ppfbin.ppf import DetectorParams, build_model  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def bracket():
    return make_bracket()


@pytest.fixture(scope="session")
def diameter(bracket):
    return object_diameter(bracket)


@pytest.fixture(scope="session")
def params(diameter):
    return DetectorParams.for_diameter(diameter)


@pytest.fixture(scope="session")
def model_cloud(bracket, params):
    return mesh_to_cloud(bracket, params.tau)


@pytest.fixture(scope="session")
def model(model_cloud, params, diameter):
    return build_model(model_cloud, params, diameter)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
