import numpy as np
import pytest

from ticl.data import ScenarioSpec, StepData, make_synthetic, split_scenario
from ticl.encoder import PRESETS


@pytest.fixture
def tiny_config():
    return PRESETS["tiny"]


@pytest.fixture
def tiny_scenario():
    """Three 2-class steps on 8px synthetic images."""
    train = make_synthetic(6, 12, image_side=8, seed=5)
    test = make_synthetic(6, 6, image_side=8, seed=5, split="test")
    views = split_scenario(train, ScenarioSpec.custom([2, 2, 2]), test)
    return train, test, views


def step_data(dataset, view, split="train"):
    return StepData(dataset, view, split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
