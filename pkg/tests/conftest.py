"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import time

import pytest

CRITERIA = {
    1: "flattened conv equals brute-force 2-D conv (100 configs, < 1e-6, < 1 min)",
    2: "gradient checks vs central differences (20 trials, < 1e-4, < 5 min)",
    3: "STFT column count, tone localisation, linearity and K-shift",
    4: "waveform unit energy, Parseval, one-hot closed form",
    5: "channel SNR, CFO bin shift, clock identity, draw intervals",
    6: "dataset determinism, 95/4/1 splits, base class balance",
    7: "coexistence SINR, path loss, BER oracle, rotation gain (< 10 min)",
    8: "ERM overfit smoke and desk-scale learnability",
    9: "SWAD averaging and window, MLDG meta-gradient, beta=0 equals ERM",
    10: "every CLI stage reruns from config.lock with identical hashes",
}

_outcomes: dict = {}
_notes: dict = {}
_durations: dict = {}


def _criterion_of(item):
    m = item.get_closest_marker("criterion")
    return None if m is None else int(m.args[0])


@pytest.fixture
def note(request):
    """Attach a short result note to the test's criterion line."""
    n = _criterion_of(request.node)

    def add(text):
        _notes.setdefault(n, []).append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    n = _criterion_of(item)
    if n is not None:
        _durations[n] = _durations.get(n, 0.0) + time.perf_counter() - start


def pytest_runtest_logreport(report):
    n = None
    for key, value in report.user_properties:
        if key == "criterion":
            n = value
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        n = _criterion_of(item)
        if n is not None:
            item.user_properties.append(("criterion", n))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            continue
        ok = all(r == "passed" for r in results)
        status = "PASS" if ok else "FAIL"
        extra = []
        if "skipped" in results:
            extra.append("part not run")
        extra += _notes.get(n, [])
        extra.append(f"{_durations.get(n, 0.0):.1f}s")
        tr.write_line(f"criterion {n:2d} {status}: {title} [{'; '.join(extra)}]")
