"""Acceptance reporting: one pass/fail line per criterion in the terminal summary."""
import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture()
def note(request):
    """Attach measured values to the criterion line of the calling test."""
    m = request.node.get_closest_marker("criterion")

    def add(text):
        _NOTES.setdefault(m.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n = m.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        if hasattr(rep, "wasxfail"):
            state = "XPASS" if rep.outcome == "passed" else "XFAIL"
            reason = rep.wasxfail
        else:
            state = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
            reason = ""
        prev = _OUTCOMES.get(n)
        if prev is None or prev[0] == "PASS":
            _OUTCOMES[n] = (state, reason)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        state, reason = _OUTCOMES[n]
        detail = "; ".join(_NOTES.get(n, []))
        if reason:
            detail = f"{detail}; {reason}" if detail else reason
        terminalreporter.write_line(f"criterion {n:2d}: {state}" + (f"  ({detail})" if detail else ""))
