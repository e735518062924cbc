import pytest

from hardnet_dfus import init_weights, load_config

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture(scope="session")
def net53():
    return load_config("hardnetv2-53")[0]


@pytest.fixture(scope="session")
def net_csp69():
    return load_config("hardnetv2-csp69")[0]


@pytest.fixture(scope="session")
def weights53(net53):
    return init_weights(net53, seed=0)
