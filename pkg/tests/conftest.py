import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    status, details, _ = _criteria.get(n, ("PASS", [], title))
    if rep.skipped:
        status = "SKIP" if status == "PASS" else status
    elif rep.failed:
        status = "FAIL"
        details = details + [str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash")
                                 else rep.longrepr).splitlines()[0][:160]]
    if rep.when == "call":
        details = details + [v for k, v in item.user_properties if k == "detail"]
    _criteria[n] = (status, details, title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, details, title = _criteria[n]
        line = f"criterion {n:>2}: {status}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
