import numpy as np
import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; lines are echoed in the terminal summary."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} :: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene_arrays(rng, n, spread=0.6, depth=3.0):
    """Gaussians in front of a camera looking down +z from the origin."""
    pos = rng.normal(0, spread, (n, 3)) + np.array([0, 0, depth])
    q = random_quaternions(rng, n)
    ls = np.log(rng.uniform(0.08, 0.3, (n, 3)))
    col = rng.uniform(0.05, 0.95, (n, 3))
    opac = rng.uniform(0.2, 0.9, n)
    return pos, q, ls, col, opac
