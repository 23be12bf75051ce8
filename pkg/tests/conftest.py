import pytest
import torch

from splathuman.dataset import synth_scan
from splathuman.humanoid import HumanoidConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def coarse_humanoid():
    return HumanoidConfig(grid_resolution=64)


@pytest.fixture(scope="session")
def scan64(coarse_humanoid):
    return synth_scan(7, coarse_humanoid, image_size=64)


@pytest.fixture(scope="session")
def scan128():
    return synth_scan(1, HumanoidConfig(grid_resolution=96), image_size=128)


@pytest.fixture(scope="session")
def scans32():
    cfg = HumanoidConfig(grid_resolution=48)
    return [synth_scan(s, cfg, image_size=32) for s in (3, 4)]


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
