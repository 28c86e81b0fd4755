from __future__ import annotations

import pytest

from gazecxr.lexicon import load_lexicon
from gazecxr.mock_server import MockServer, create_app


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon()


@pytest.fixture
def mock_server():
    with MockServer(create_app()) as server:
        yield server


def brute_force_lcs(a, b):
    """Longest common subsequence by enumerating every subsequence of the shorter input."""
    from itertools import combinations

    short, long_ = (a, b) if len(a) <= len(b) else (b, a)

    def is_subsequence(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    for k in range(len(short), 0, -1):
        for idx in combinations(range(len(short)), k):
            if is_subsequence([short[i] for i in idx], long_):
                return k
    return 0


def indel_ratio(a: str, b: str) -> float:
    """1 - indel_distance / (len(a) + len(b)), via a plain edit-distance table."""
    if not a and not b:
        return 1.0
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if a[i - 1] == b[j - 1]:
                d[i][j] = d[i - 1][j - 1]
            else:
                d[i][j] = 1 + min(d[i - 1][j], d[i][j - 1])
    return 1 - d[n][m] / (n + m)


# --- acceptance summary ------------------------------------------------------------------

_criteria: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    name = marker.args[0]
    if report.failed:
        _criteria[name] = "FAIL"
    elif report.when == "call" and report.passed:
        _criteria.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _criteria.items():
        terminalreporter.write_line(f"{verdict}  {name}")
