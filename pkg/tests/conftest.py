import pytest
from hypothesis import settings

# fixed example generation so every run exercises the same cases
settings.register_profile("repro", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repro")

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _criteria[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
