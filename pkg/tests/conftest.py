import pytest

from ptqlab.harness.data import make_dataset
from ptqlab.harness.train import train_toy_fp


def _teacher(task):
    ds = make_dataset(task, 0)
    return ds, train_toy_fp(ds, 0)


@pytest.fixture(scope="session")
def gaussian_task():
    """(dataset, trained FP MLP) shared by every test in the session."""
    return _teacher("gaussian")


@pytest.fixture(scope="session")
def shapes_task():
    """(dataset, trained FP CNN); training takes about a minute and a half."""
    return _teacher("shapes")


# -- acceptance verdict lines ---------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion checked by the test")
    config.stash[_VERDICTS] = {}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return None if mark is None else mark.args[0]


@pytest.fixture
def verdict(request):
    """Record and assert a criterion: ``verdict(title, checks, detail)``.

    ``checks`` maps a short description to a bool; the criterion passes only
    when every check holds.
    """
    n = _criterion(request.node)
    store = request.config.stash[_VERDICTS]

    def record(title: str, checks: dict, detail: str = ""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {title}: {detail}"
        if failed:
            line += f" [failed: {'; '.join(failed)}]"
        store[n] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = _criterion(item)
    if n is not None and rep.failed and n not in item.config.stash[_VERDICTS]:
        item.config.stash[_VERDICTS][n] = f"FAIL criterion {n:>2} {item.name}: error during {rep.when}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
