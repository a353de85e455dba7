import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record one part of an acceptance criterion: ``criterion(n, part, passed, detail)``."""
    table = request.config.stash[CRITERIA]

    def record(n, part, passed, detail):
        table.setdefault(n, []).append((part, bool(passed), detail))
        return bool(passed)

    return record


def criterion_line(n, parts):
    verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
    body = "; ".join(f"{part} {'ok' if ok else 'FAIL'} ({detail})" for part, ok, detail in parts)
    return f"CRITERION {n}: {verdict} {body}"


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        terminalreporter.write_line(criterion_line(n, table[n]))
