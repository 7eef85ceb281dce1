import datetime as dt

import numpy as np
import pytest

from curnds.data import COLUMNS, series_from_arrays


def write_csv(path, rows, header=COLUMNS):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return path


def make_rows(n, start=dt.date(2020, 9, 1), c=3000.0):
    rows = []
    for k in range(n):
        day = start + dt.timedelta(days=k)
        rows.append((day.isoformat(), 50000 + 200 * k, c + 10 * k, 5800 + 3 * k, 1_500_000 + 25000 * k))
    return rows


@pytest.fixture
def csv_30(tmp_path):
    return write_csv(tmp_path / "quebec.csv", make_rows(30))


@pytest.fixture
def small_series():
    k = np.arange(20, dtype=float)
    return series_from_arrays(1000 + 20 * k, 500 + 5 * k, 50 + 0.5 * k, 1e5 + 1e3 * k, 100_000)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
