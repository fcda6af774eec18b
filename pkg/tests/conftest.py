import numpy as np
import pytest
import torch

from mcpilot.config import Config

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def arm(cfg):
    return cfg.arm()


@pytest.fixture(scope="session")
def ideal_cfg():
    """Drag-free world with no release delay."""
    return Config(drag=False, delay_lo=0.0, delay_hi=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(tag: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE_LINES.append(f"{tag} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
