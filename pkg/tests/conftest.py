import numpy as np
import pytest

from curemix.data import SubjectRecord, TrialDataset
from curemix.lifetable import LifeTable

HEADER = "id,endpoint,arm,time,event,age,sex,country\n"


def write_rows(path, rows, header=HEADER):
    path.write_text(header + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def simple_table(country="GBR", sex="female", q=0.04, over85=0.15):
    return LifeTable(country, sex, (q,) * 17, over85)


def table_csv(tables):
    lines = ["country,sex,age_start,q5"]
    for tb in tables:
        for i, q in enumerate(tb.q):
            lines.append(f"{tb.country},{tb.sex},{5 * i},{float(q)!r}")
        lines.append(f"{tb.country},{tb.sex},85,{float(tb.over85_rate)!r}")
    return "\n".join(lines) + "\n"


def random_dataset(rng, n=60, endpoints=("OS", "PFS"), arms=("A", "B"), country="GBR"):
    """Mixed events/censoring over every (arm, end-point) cell."""
    recs = []
    for i in range(n):
        recs.append(SubjectRecord(
            id=f"s{i}",
            endpoint=endpoints[i % len(endpoints)],
            arm=arms[(i // len(endpoints)) % len(arms)],
            time=float(rng.uniform(0.5, 60.0)),
            event=int(rng.random() < 0.6),
            age=float(rng.uniform(30, 85)),
            sex=("female", "male")[i % 2],
            country=country,
        ))
    return TrialDataset(tuple(recs), endpoints, arms)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture
def tables():
    return {
        ("GBR", "female"): LifeTable("GBR", "female", tuple(np.linspace(0.002, 0.25, 17)), 0.16),
        ("GBR", "male"): LifeTable("GBR", "male", tuple(np.linspace(0.003, 0.3, 17)), 0.19),
    }


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip(":abc")), s)):
            terminalreporter.write_line(line)
