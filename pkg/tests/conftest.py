import pytest

_RESULTS = pytest.StashKey[dict]()
_DETAILS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.stash[_DETAILS] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    results = item.config.stash[_RESULTS]
    entry = results.setdefault(number, {"title": title, "ok": True})
    if call.excinfo is not None:
        entry["ok"] = False


@pytest.fixture
def detail(request):
    """Record a one-line measurement shown next to the criterion verdict."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        request.config.stash[_DETAILS].setdefault(marker.args[0], []).append(text)

    return note


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    details = config.stash[_DETAILS]
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        extra = "; ".join(details.get(number, []))
        line = f"criterion {number:2d} {verdict}: {entry['title']}"
        terminalreporter.write_line(line + (f" ({extra})" if extra else ""))
