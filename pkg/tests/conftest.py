import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treebsde.scenario import load_fixture

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def s1():
    return load_fixture("S1")


@pytest.fixture(scope="session")
def s2():
    return load_fixture("S2")


@pytest.fixture(scope="session")
def s3():
    return load_fixture("S3")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def node(tree, label):
    return tree.labels.index(label)


# acceptance criteria: criterion -> list of (check, ok, detail); printed as one line per criterion
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}
TITLES: dict[int, str] = {}


def record(criterion: int, title: str, check: str, ok: bool, detail: str = "") -> bool:
    TITLES[criterion] = title
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} [{criterion}] {check}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[c]
        ok = all(flag for _, flag, _ in checks)
        failed = [f"{name} ({detail})" for name, flag, detail in checks if not flag]
        line = f"{'PASS' if ok else 'FAIL'} {c:2d}. {TITLES[c]}"
        if failed:
            line += " | failing: " + "; ".join(failed)
        terminalreporter.write_line(line)
