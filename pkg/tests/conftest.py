import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_configure(config):
    config.acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance):
            terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion and fail the test when it does not hold."""
    def _record(number: int, name: str, ok: bool, detail: str = ""):
        line = f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        request.config.acceptance.append(line)
        print(line)
        assert ok, line
    return _record
