from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diststn.data import generate_dataset  # noqa: E402
from diststn.model import DistStnModel, ModelConfig  # noqa: E402

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return DistStnModel(ModelConfig.tiny(seed=0))


@pytest.fixture(scope="session")
def small_chips():
    """Four classes at 30 degree steps, 32 pixels: cheap but structurally complete."""
    return generate_dataset(num_classes=4, num_scatterers=6, size=32, angle_step=30.0, seed=3)


@pytest.fixture
def record_acceptance():
    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        print(line)
        ACCEPTANCE.append((name, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
