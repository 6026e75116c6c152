import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


class Criterion:
    def __init__(self, store: dict, number: int, title: str):
        self.store, self.number, self.title = store, number, title
        self.parts: list[tuple[bool, str]] = []

    def check(self, ok: bool, detail: str) -> bool:
        self.parts.append((bool(ok), detail))
        return bool(ok)

    def finish(self, error: str | None = None) -> None:
        ok = error is None and bool(self.parts) and all(p for p, _ in self.parts)
        detail = "; ".join(d for _, d in self.parts) or ""
        if error:
            detail = f"{detail}; error: {error}" if detail else f"error: {error}"
        self.store[self.number] = (ok, self.title, detail)

    def verdict(self) -> None:
        bad = [d for ok, d in self.parts if not ok]
        assert not bad, "; ".join(bad)


@pytest.fixture
def criterion(request):
    """Collects sub-checks for one acceptance criterion and records one pass/fail line."""
    mark = request.node.get_closest_marker("criterion")
    number, title = mark.args
    c = Criterion(request.config.stash[_RESULTS], number, title)
    yield c
    failed = getattr(request.node, "rep_call", None)
    error = None
    if failed is not None and failed.failed and not any(not ok for ok, _ in c.parts):
        error = failed.longrepr.reprcrash.message if hasattr(failed.longrepr, "reprcrash") else "crashed"
    c.finish(error)


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{number}] {title}: {detail}")
    passed = sum(ok for ok, _, _ in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")

