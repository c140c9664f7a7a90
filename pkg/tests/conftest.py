import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(claim): end-to-end acceptance check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _RESULTS[item.nodeid] = (mark.args[0], rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance")
    for claim, ok in _RESULTS.values():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {claim}")
