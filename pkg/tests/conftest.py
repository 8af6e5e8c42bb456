import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def textured(size=64, seed=0):
    """Smooth random colour field plus sharp blocks; plenty of corners."""
    from dcid.synth import procedural_source

    return procedural_source(size, size, np.random.default_rng(seed))


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, line: str) -> None:
    _ACCEPTANCE[number] = line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
