import os

import numpy as np
import pytest

# acceptance results land here; the terminal summary prints one line each
ACCEPTANCE = {}


def record(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    from fincast.model import ModelConfig
    return ModelConfig(d_model=32, n_layers=2, n_heads=4, n_experts=4, top_k=2,
                       expert_hidden=64, patch_len=16, horizon_len=16)


@pytest.fixture
def tiny_model(tiny_config):
    from fincast.model import FinCastModel
    return FinCastModel(tiny_config, seed=7)


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    monkeypatch.setenv("FINCAST_THREADS", os.environ.get("FINCAST_THREADS", "1"))
