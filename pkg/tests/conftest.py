import numpy as np
import pytest

from gfncp.model import EncoderConfig, ModelParams


@pytest.fixture
def tiny_params():
    return ModelParams.init(EncoderConfig.small(d_x=2, width=4), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])


@pytest.fixture
def criterion(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_REPORT].append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return record
