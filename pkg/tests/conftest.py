import pytest

from tokenq.fixtures import single_model

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        num, title = mark.args
        entry = _results.setdefault(num, {"title": title, "ok": True, "tests": []})
        entry["ok"] &= rep.outcome == "passed"
        entry["tests"].append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_results):
        e = _results[num]
        tr.write_line(f"criterion {num:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")


@pytest.fixture(scope="session")
def chat_model():
    return single_model()
