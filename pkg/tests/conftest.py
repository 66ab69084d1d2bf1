import numpy as np
import pytest

from fedhar.data import GeneratorConfig, generate

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""
    def _report(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else ""))
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_samples():
    cfg = GeneratorConfig(samples_per_cell=12)
    return generate(cfg, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
