import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config.stash[_VERDICTS] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark and (report.when == "call" or (report.when == "setup" and not report.passed)):
        detail = dict(item.user_properties).get("detail", "")
        crash = getattr(report.longrepr, "reprcrash", None)
        if report.failed and crash is not None:
            detail = " | ".join(filter(None, [detail, crash.message.splitlines()[0]]))
        item.config.stash[_VERDICTS].append((mark.args[0], mark.args[1], report.passed, detail))
    return report


def pytest_terminal_summary(terminalreporter, config):
    verdicts = sorted(config.stash[_VERDICTS], key=lambda v: v[0])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in verdicts:
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
