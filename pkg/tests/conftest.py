import pytest


def pytest_configure(config):
    config._acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = getattr(item, "acceptance_detail", "")
    if rep.failed:
        detail = (detail + " | " if detail else "") + str(rep.longrepr).strip().splitlines()[-1][:200]
    line = f"[{'PASS' if rep.passed else 'FAIL'}] {marker.args[0]}. {marker.args[1]}: {detail}"
    item.config._acceptance.append((marker.args[0], line))
    print("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config._acceptance):
            terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a one-line result summary to the acceptance report of this test."""

    def record(text):
        request.node.acceptance_detail = text

    return record
