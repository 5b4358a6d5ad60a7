import numpy as np
import pytest

from dual_enkf.model import LqProblem


def scalar(A=0.0, B=1.0, sigma=0.0, C=1.0, R=1.0, G=1.0, kind="LQG", theta=None, T=None):
    return LqProblem.from_matrices([[A]], [[B]], [[sigma]], [[C]], [[R]], [[G]], kind=kind, theta=theta, T=T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    ev = np.geomspace(1.0, cond, d)
    return (Q * ev) @ Q.T


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
