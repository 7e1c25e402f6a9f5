import numpy as np
import pytest

from nsexplain.fixtures import planted_feature_model, planted_image, tiny_model

_criteria: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        _criteria.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria:
        terminalreporter.write_line(f"[{status}] {name}")


@pytest.fixture(scope="session")
def planted():
    return planted_feature_model()


@pytest.fixture(scope="session")
def planted_img():
    return planted_image(0)


@pytest.fixture(scope="session")
def tiny():
    return tiny_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
