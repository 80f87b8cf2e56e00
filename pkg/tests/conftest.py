import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lut():
    from pupilkit.luminance import build_synthetic_lut
    return build_synthetic_lut()


@pytest.fixture(scope="session")
def small_study():
    """A reduced synthetic study shared by the integration-style tests."""
    from pupilkit.synth import SynthConfig, generate_study
    return generate_study(SynthConfig(n_participants=6, n_clips=8, frames_per_clip=100))


_acceptance: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    _acceptance[name] = f"{status}  {name.removeprefix('test_')}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_acceptance):
            terminalreporter.write_line(_acceptance[name])
