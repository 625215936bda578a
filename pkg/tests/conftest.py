import json
from pathlib import Path

import pytest

from procache.evaluate import Simulator
from procache.tinydit import ModelConfig, TinyDiT, init_model

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture(scope="session")
def ref_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def ref_weights(ref_config):
    return init_model(ref_config)


@pytest.fixture(scope="session")
def ref_model(ref_config, ref_weights):
    return TinyDiT(ref_config, ref_weights)


@pytest.fixture(scope="session")
def ref_sim(ref_config, ref_weights):
    return Simulator(ref_config, weights=ref_weights)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(layers=3, dim=16, heads=2, tokens=8, context_tokens=4, steps=8, seed=7)


# -- acceptance reporting ----------------------------------------------------------

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """``criterion(cid, ok, detail)`` records a verdict line and asserts it."""

    def record(cid, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}"
        request.config.stash[_RESULTS].append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
