import numpy as np
import pytest

from psfnav.terminal import default_terminal_set
from psfnav.vessel import HydroParams, VesselModel


@pytest.fixture(scope="session")
def params():
    return HydroParams()


@pytest.fixture(scope="session")
def model(params):
    return VesselModel(params)


@pytest.fixture(scope="session")
def u_max(model):
    return model.max_surge_speed(2.0)


@pytest.fixture(scope="session")
def term():
    return default_terminal_set()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(key: str, passed: bool, detail: str, verdict: str | None = None) -> bool:
        verdict = verdict or ("PASS" if passed else "FAIL")
        _ACCEPTANCE[key] = f"{key} {verdict}: {detail}"
        print(_ACCEPTANCE[key])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
