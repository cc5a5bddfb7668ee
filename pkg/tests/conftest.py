import os

# Single-threaded BLAS keeps float64 traces bit-reproducible; must precede numpy.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

_verdicts: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    num, title = mark.args
    ok = call.excinfo is None
    prev = _verdicts.get(num)
    verdict = "PASS" if ok and (prev is None or prev[0] == "PASS") else "FAIL"
    _verdicts[num] = (verdict, title)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_verdicts):
        verdict, title = _verdicts[num]
        terminalreporter.write_line(f"{verdict} criterion {num:>2}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
