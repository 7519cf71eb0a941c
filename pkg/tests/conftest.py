import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, name, ok, detail)`` prints one PASS/FAIL line, then fails the test if ``ok`` is false.

    ``ok=None`` records SKIP and skips the test with ``detail`` as the reason.
    """

    def report(number, name, ok, detail=""):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"CRITERION {number} {status}: {name}" + (f" ({detail})" if detail else "")
        request.config.stash[_RESULTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        if ok is None:
            pytest.skip(detail)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
