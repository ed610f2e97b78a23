import pytest

N_CRITERIA = 9
VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Criterion number -> (passed, detail), reported in the terminal summary."""
    return request.config.stash.setdefault(VERDICTS, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(VERDICTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in results:
            ok, detail = results[k]
            terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k}: FAIL  (not evaluated: setup error or deselected)")
